//! Parameter, FLOP, and size accounting.
//!
//! Per-layer rows cover every parameter-bearing layer; GRU cells appear as
//! three gate rows (`<cell>#z`, `#r`, `#h`) so conv totals line up with the
//! published whole-network conv counts. FLOPs count multiplies and adds
//! separately (one MAC = 2 FLOPs) and cover convolutions only; norms and
//! activations are excluded. `size_bytes` sums serialized weight bytes plus
//! per-group quantization metadata and is additive over layers;
//! `file_bytes` is the exact model-file size, delegated to the persistence
//! encoder so reports always match bytes on disk.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, LayerKind, ModelGraph, Precision, GRU_GATES};
use crate::persistence;
use crate::tensor::DType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub params: usize,
    pub flops: u64,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub model: String,
    pub precision_state: Precision,
    pub input_resolution: (usize, usize),
    pub params_total: usize,
    pub flops_total: u64,
    /// Additive weight bytes (payload + weight-quant metadata).
    pub size_bytes: u64,
    /// Exact serialized model-file size.
    pub file_bytes: u64,
    pub per_layer: Vec<LayerCost>,
}

/// Conv2d nodes plus three gate convs per GRU cell.
pub fn conv_count(graph: &ModelGraph) -> usize {
    graph
        .nodes
        .iter()
        .map(|n| match n.kind {
            LayerKind::Conv2d(_) => 1,
            LayerKind::ConvGru(_) => GRU_GATES.len(),
            _ => 0,
        })
        .sum()
}

fn conv_flops(a: &ConvAttrs, out_hw: (usize, usize)) -> u64 {
    let positions = (out_hw.0 * out_hw.1) as u64;
    let macs = (a.kernel.0 * a.kernel.1 * a.in_channels * a.out_channels) as u64 * positions;
    let bias = if a.bias {
        a.out_channels as u64 * positions
    } else {
        0
    };
    2 * macs + bias
}

fn quant_bytes(graph: &ModelGraph, key: &str) -> u64 {
    graph
        .quant
        .as_ref()
        .and_then(|q| q.weights.get(key))
        .map_or(0, |w| 8 * w.scales.len() as u64)
}

/// Full cost breakdown at `resolution`. Params and sizes are
/// resolution-independent; FLOPs are not.
pub fn cost_report(graph: &ModelGraph, resolution: (usize, usize)) -> Result<CostReport> {
    let shapes = graph.infer_shapes_with_resolution(resolution)?;
    let mut per_layer = Vec::new();

    for node in &graph.nodes {
        match &node.kind {
            LayerKind::Conv2d(a) => {
                let (_, ho, wo) = shapes[&node.id];
                let params = node.params.values().map(|t| t.numel()).sum();
                let payload: u64 = node
                    .params
                    .values()
                    .map(|t| (t.numel() * t.dtype().byte_width()) as u64)
                    .sum();
                per_layer.push(LayerCost {
                    layer: node.id.clone(),
                    params,
                    flops: conv_flops(a, (ho, wo)),
                    size_bytes: payload + quant_bytes(graph, &node.id),
                });
            }
            LayerKind::ConvGru(a) => {
                let (_, ho, wo) = shapes[&node.id];
                let gate_attrs = ConvAttrs {
                    in_channels: a.hidden_channels + a.input_channels,
                    out_channels: a.hidden_channels,
                    kernel: a.kernel,
                    stride: (1, 1),
                    padding: a.padding(),
                    bias: true,
                };
                for gate in GRU_GATES {
                    let w = &node.params[&format!("weight_{gate}")];
                    let b = &node.params[&format!("bias_{gate}")];
                    let key = format!("{}#{gate}", node.id);
                    let payload =
                        (w.numel() * w.dtype().byte_width() + b.numel() * b.dtype().byte_width())
                            as u64;
                    per_layer.push(LayerCost {
                        layer: key.clone(),
                        params: w.numel() + b.numel(),
                        flops: conv_flops(&gate_attrs, (ho, wo)),
                        size_bytes: payload + quant_bytes(graph, &key),
                    });
                }
            }
            LayerKind::InstanceNorm { .. } => {
                let params = node.params.values().map(|t| t.numel()).sum::<usize>();
                per_layer.push(LayerCost {
                    layer: node.id.clone(),
                    params,
                    flops: 0,
                    size_bytes: (params * DType::F32.byte_width()) as u64,
                });
            }
            _ => {}
        }
    }

    Ok(CostReport {
        model: graph.name.clone(),
        precision_state: graph.precision(),
        input_resolution: resolution,
        params_total: per_layer.iter().map(|l| l.params).sum(),
        flops_total: per_layer.iter().map(|l| l.flops).sum(),
        size_bytes: per_layer.iter().map(|l| l.size_bytes).sum(),
        file_bytes: persistence::serialized_len(graph)?,
        per_layer,
    })
}

/// Per-layer parameter counts and the total (resolution-free fragment).
pub fn count_params(graph: &ModelGraph) -> Result<(Vec<(String, usize)>, usize)> {
    let report = cost_report(graph, fallback_resolution(graph))?;
    let rows: Vec<(String, usize)> = report
        .per_layer
        .iter()
        .map(|l| (l.layer.clone(), l.params))
        .collect();
    Ok((rows, report.params_total))
}

/// Per-conv-layer FLOPs and the total at `resolution`.
pub fn count_flops(graph: &ModelGraph, resolution: (usize, usize)) -> Result<(Vec<(String, u64)>, u64)> {
    let report = cost_report(graph, resolution)?;
    let rows: Vec<(String, u64)> = report
        .per_layer
        .iter()
        .filter(|l| l.flops > 0)
        .map(|l| (l.layer.clone(), l.flops))
        .collect();
    Ok((rows, report.flops_total))
}

/// Exact bytes `persistence::save` would write.
pub fn serialized_size(graph: &ModelGraph) -> Result<u64> {
    persistence::serialized_len(graph)
}

fn fallback_resolution(graph: &ModelGraph) -> (usize, usize) {
    graph
        .inputs
        .first()
        .map_or((16, 16), |i| (i.height, i.width))
}

pub const MIB: f64 = 1024.0 * 1024.0;

/// Percentage reductions between two cost reports of the same model family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub params_reduction_pct: f64,
    pub flops_reduction_pct: f64,
    pub size_reduction_pct: f64,
    pub baseline_flops: u64,
    pub optimized_flops: u64,
    pub baseline_size_mib: f64,
    pub optimized_size_mib: f64,
}

fn pct(baseline: f64, optimized: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - optimized / baseline)
    }
}

/// Round for display; reductions are computed at full precision.
pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

pub fn reduction_report(baseline: &CostReport, optimized: &CostReport) -> Result<ReductionReport> {
    if baseline.input_resolution != optimized.input_resolution {
        return Err(Error::InvalidConfig(format!(
            "reduction compares resolutions {:?} and {:?}",
            baseline.input_resolution, optimized.input_resolution
        )));
    }
    Ok(ReductionReport {
        params_reduction_pct: pct(baseline.params_total as f64, optimized.params_total as f64),
        flops_reduction_pct: pct(baseline.flops_total as f64, optimized.flops_total as f64),
        size_reduction_pct: pct(baseline.file_bytes as f64, optimized.file_bytes as f64),
        baseline_flops: baseline.flops_total,
        optimized_flops: optimized.flops_total,
        baseline_size_mib: baseline.file_bytes as f64 / MIB,
        optimized_size_mib: optimized.file_bytes as f64 / MIB,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphInput, LayerNode, ModelGraph};
    use crate::tensor::Tensor;
    use crate::zoo::{build, ZooSpec};
    use std::collections::BTreeMap;

    fn lone_conv(a: ConvAttrs, res: (usize, usize)) -> ModelGraph {
        let mut params = BTreeMap::new();
        let numel = a.out_channels * a.in_channels * a.kernel.0 * a.kernel.1;
        params.insert(
            "weight".to_string(),
            Tensor::from_f32(
                vec![a.out_channels, a.in_channels, a.kernel.0, a.kernel.1],
                vec![0.1; numel],
            )
            .unwrap(),
        );
        if a.bias {
            params.insert(
                "bias".to_string(),
                Tensor::from_f32(vec![a.out_channels], vec![0.0; a.out_channels]).unwrap(),
            );
        }
        ModelGraph {
            name: "one-conv".to_string(),
            inputs: vec![GraphInput {
                name: "x".to_string(),
                channels: a.in_channels,
                height: res.0,
                width: res.1,
            }],
            nodes: vec![LayerNode {
                id: "conv".to_string(),
                kind: LayerKind::Conv2d(a),
                inputs: vec!["x".to_string()],
                params,
            }],
            outputs: vec!["conv".to_string()],
            quant: None,
        }
    }

    #[test]
    fn pointwise_conv_param_and_flop_counts() {
        let g = lone_conv(
            ConvAttrs {
                in_channels: 1,
                out_channels: 1,
                kernel: (1, 1),
                stride: (1, 1),
                padding: (0, 0),
                bias: true,
            },
            (1, 1),
        );
        let (_, params) = count_params(&g).unwrap();
        assert_eq!(params, 2);

        let mut no_bias = g;
        no_bias.nodes[0].params.remove("bias");
        if let LayerKind::Conv2d(a) = &mut no_bias.nodes[0].kind {
            a.bias = false;
        }
        let (_, flops) = count_flops(&no_bias, (1, 1)).unwrap();
        assert_eq!(flops, 2, "one MAC counts as two FLOPs");
    }

    #[test]
    fn dense_conv_counts_match_closed_forms() {
        let g = lone_conv(
            ConvAttrs {
                in_channels: 2,
                out_channels: 4,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                bias: true,
            },
            (4, 4),
        );
        let (_, params) = count_params(&g).unwrap();
        assert_eq!(params, 4 * 2 * 3 * 3 + 4);

        let g = lone_conv(
            ConvAttrs {
                in_channels: 1,
                out_channels: 1,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                bias: false,
            },
            (4, 4),
        );
        let (_, flops) = count_flops(&g, (4, 4)).unwrap();
        assert_eq!(flops, 288, "2 * 9 taps * 16 positions");
    }

    #[test]
    fn zoo_totals_match_hand_recounts() {
        // Frozen from a by-hand spreadsheet walk over the layer tables.
        for (name, expected) in [
            ("fnet", 1_094_560usize),
            ("cnet", 1_107_936),
            ("updatenet", 1_992_422),
        ] {
            let g = build(&ZooSpec::preset(name).unwrap()).unwrap();
            assert_eq!(g.param_count(), expected, "{name}");
            let (_, total) = count_params(&g).unwrap();
            assert_eq!(total, expected, "{name} report");
        }
    }

    #[test]
    fn totals_are_additive_and_resolution_scales_flops_only() {
        let g = build(&ZooSpec::preset("toy-gru").unwrap()).unwrap();
        let r16 = cost_report(&g, (16, 16)).unwrap();
        let r32 = cost_report(&g, (32, 32)).unwrap();
        assert_eq!(
            r16.params_total,
            r16.per_layer.iter().map(|l| l.params).sum::<usize>()
        );
        assert_eq!(
            r16.flops_total,
            r16.per_layer.iter().map(|l| l.flops).sum::<u64>()
        );
        assert_eq!(
            r16.size_bytes,
            r16.per_layer.iter().map(|l| l.size_bytes).sum::<u64>()
        );
        assert_eq!(r16.params_total, r32.params_total);
        assert_eq!(4 * r16.flops_total, r32.flops_total, "stride-1 graph");
    }

    #[test]
    fn gru_gates_count_as_convs() {
        let g = build(&ZooSpec::preset("toy-gru").unwrap()).unwrap();
        assert_eq!(conv_count(&g), 6);
        let report = cost_report(&g, (16, 16)).unwrap();
        assert!(report.per_layer.iter().any(|l| l.layer == "gru#z"));
        // Gate conv: (6+5) in, 6 out, 3x3, bias, at 16x16.
        let gate = report
            .per_layer
            .iter()
            .find(|l| l.layer == "gru#h")
            .unwrap();
        assert_eq!(gate.params, 6 * 11 * 9 + 6);
        assert_eq!(gate.flops, 2 * (9 * 11 * 6) * 256 + 6 * 256);
    }

    #[test]
    fn reduction_percentages_match_published_arithmetic() {
        let base = CostReport {
            model: "m".to_string(),
            precision_state: Precision::Fp32,
            input_resolution: (384, 512),
            params_total: 4_000_000,
            flops_total: 4_640_000_000,
            size_bytes: 0,
            file_bytes: 16_060_000,
            per_layer: vec![],
        };
        let mut opt = base.clone();
        opt.flops_total = 4_200_000_000;
        let r = reduction_report(&base, &opt).unwrap();
        assert!((r.flops_reduction_pct - 9.4827586).abs() < 1e-4);
        let mut opt2 = base.clone();
        opt2.flops_total = 3_760_000_000;
        let r2 = reduction_report(&base, &opt2).unwrap();
        assert!((round2(r2.flops_reduction_pct) - 18.97).abs() < 1e-9);

        let same = reduction_report(&base, &base).unwrap();
        assert_eq!(same.flops_reduction_pct, 0.0);
        assert_eq!(same.size_reduction_pct, 0.0);

        let mut other_res = base.clone();
        other_res.input_resolution = (48, 64);
        assert!(reduction_report(&base, &other_res).is_err());
    }
}
