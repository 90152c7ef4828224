//! Calibration-range collection and static graph quantization.
//!
//! Calibration runs the float graph over a set of representative input
//! batches and records per-site min/max activation ranges with a min-max
//! observer.  Quantization then freezes those ranges into affine activation
//! records, converts convolution weights to symmetric per-output-channel
//! int8, and converts biases to int32 at the combined input/weight scale.

use std::collections::BTreeMap;

use log::warn;

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, Precision, GRU_GATES};
use crate::tensor::{DType, Tensor};

use super::{
    ActQuant, CalibrationStats, QuantState, WeightQuant, SITE_GRU_H, SITE_GRU_ZR,
};

/// Largest supported kernel volume (`Kh * Kw * Cin`) for int8 convolution.
///
/// Each product term is bounded by `127 * 255`, so `2^15` terms keep the
/// worst-case accumulator magnitude below `2^30 + 2^15 * 127`, comfortably
/// inside `i32` even after the bias add.
pub const MAX_KERNEL_VOLUME: usize = 1 << 15;

/// Options for the post-training quantization pipeline.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuantConfig {
    /// Use the double-precision reference requantizer inside the integer
    /// convolution core instead of the fixed-point one.  Intended for
    /// testing the float-contamination guard; production runs leave this
    /// off.
    pub reference_requant: bool,
}

fn merge_range(ranges: &mut BTreeMap<String, (f32, f32)>, site: &str, data: &[f32]) {
    if data.is_empty() {
        return;
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    ranges
        .entry(site.to_string())
        .and_modify(|r| {
            r.0 = r.0.min(lo);
            r.1 = r.1.max(hi);
        })
        .or_insert((lo, hi));
}

/// Run the min-max observer over `batches` and collect activation ranges.
///
/// Every graph input, every node output, and the two internal
/// gate-concatenation sites of each GRU cell (`<id>#zr_in`, `<id>#h_in`)
/// receive one range entry.
pub fn calibrate(
    graph: &ModelGraph,
    batches: &[BTreeMap<String, Tensor>],
) -> Result<CalibrationStats> {
    if graph.precision() != Precision::Fp32 {
        return Err(Error::Quantization(
            "graph is already quantized".to_string(),
        ));
    }
    if batches.is_empty() {
        return Err(Error::Quantization(
            "calibration requires at least one input batch".to_string(),
        ));
    }
    let mut ranges = BTreeMap::new();
    for batch in batches {
        let (_, tape) = engine::forward_recorded(graph, batch)?;
        for (site, tensor) in tape.values_map() {
            if tensor.dtype() == DType::F32 {
                merge_range(&mut ranges, site, tensor.as_f32()?);
            }
        }
        for (id, saved) in tape.gru_map() {
            merge_range(
                &mut ranges,
                &format!("{id}{SITE_GRU_ZR}"),
                saved.cat_zr.as_f32()?,
            );
            merge_range(
                &mut ranges,
                &format!("{id}{SITE_GRU_H}"),
                saved.cat_h.as_f32()?,
            );
        }
    }
    Ok(CalibrationStats {
        ranges,
        batches: batches.len(),
    })
}

fn act_record(site: &str, lo: f32, hi: f32) -> ActQuant {
    debug_assert!(lo <= hi);
    let span = hi - lo;
    let scale = if span > 0.0 && span.is_finite() {
        span / 255.0
    } else {
        warn!("degenerate activation range at {site}; using unit scale");
        1.0
    };
    let zero_point = (-lo / scale).round().clamp(0.0, 255.0) as i32;
    ActQuant { scale, zero_point }
}

fn quantize_weight(id: &str, weight: &Tensor) -> Result<(Tensor, WeightQuant)> {
    let shape = weight.shape().to_vec();
    let out_channels = shape[0];
    let per_channel = weight.numel() / out_channels;
    if per_channel > MAX_KERNEL_VOLUME {
        return Err(Error::Quantization(format!(
            "kernel volume {per_channel} at {id} exceeds the int8 accumulator budget ({MAX_KERNEL_VOLUME})"
        )));
    }
    let data = weight.as_f32()?;
    let mut scales = Vec::with_capacity(out_channels);
    let mut q = vec![0i8; data.len()];
    for c in 0..out_channels {
        let chunk = &data[c * per_channel..(c + 1) * per_channel];
        let peak = chunk.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        let scale = if peak > 0.0 && peak.is_finite() {
            peak / 127.0
        } else {
            warn!("degenerate weight channel {c} at {id}; using unit scale");
            1.0
        };
        scales.push(scale);
        for (dst, &v) in q[c * per_channel..(c + 1) * per_channel]
            .iter_mut()
            .zip(chunk)
        {
            *dst = (v / scale).round().clamp(-127.0, 127.0) as i8;
        }
    }
    Ok((Tensor::from_i8(shape, q)?, WeightQuant { scales }))
}

fn quantize_bias(bias: &Tensor, in_scale: f32, weight: &WeightQuant) -> Result<Tensor> {
    let data = bias.as_f32()?;
    let q = data
        .iter()
        .zip(&weight.scales)
        .map(|(&b, &sw)| {
            let s = f64::from(in_scale) * f64::from(sw);
            (f64::from(b) / s).round().clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
        })
        .collect();
    Tensor::from_i32(bias.shape().to_vec(), q)
}

fn site_record(stats: &CalibrationStats, site: &str) -> Result<ActQuant> {
    let (lo, hi) = stats
        .ranges
        .get(site)
        .copied()
        .ok_or_else(|| Error::Quantization(format!("no calibration range for site {site}")))?;
    Ok(act_record(site, lo, hi))
}

/// Freeze calibration statistics into a fully quantized graph.
///
/// Convolution and GRU-gate weights become symmetric per-output-channel
/// int8 (`scale = max |W_c| / 127`, zero point 0, range `[-127, 127]`);
/// biases become int32 at `s_in * s_w,c`; every activation site gets an
/// asymmetric per-tensor uint8 record (`scale = (max - min) / 255`).
pub fn quantize_graph(graph: &ModelGraph, stats: &CalibrationStats) -> Result<ModelGraph> {
    if graph.precision() != Precision::Fp32 {
        return Err(Error::Quantization(
            "graph is already quantized".to_string(),
        ));
    }
    let mut out = graph.clone();
    let mut state = QuantState::default();

    for input in &graph.inputs {
        state
            .activations
            .insert(input.name.clone(), site_record(stats, &input.name)?);
    }

    for node in &mut out.nodes {
        let id = node.id.clone();
        match node.kind {
            LayerKind::Conv2d { .. } => {
                let record = site_record(stats, &id)?;
                let in_site = &node.inputs[0];
                let in_scale = state
                    .activations
                    .get(in_site)
                    .map(|r| r.scale)
                    .ok_or_else(|| {
                        Error::Quantization(format!(
                            "conv {id} consumes unquantized site {in_site}"
                        ))
                    })?;
                let weight = node.params.get("weight").expect("validated conv weight");
                let (qw, wq) = quantize_weight(&id, weight)?;
                if let Some(bias) = node.params.get("bias") {
                    let qb = quantize_bias(bias, in_scale, &wq)?;
                    node.params.insert("bias".to_string(), qb);
                }
                node.params.insert("weight".to_string(), qw);
                state.weights.insert(id.clone(), wq);
                state.activations.insert(id.clone(), record);
            }
            LayerKind::ConvGru { .. } => {
                let zr_site = format!("{id}{SITE_GRU_ZR}");
                let h_site = format!("{id}{SITE_GRU_H}");
                let zr_record = site_record(stats, &zr_site)?;
                let h_record = site_record(stats, &h_site)?;
                for gate in GRU_GATES {
                    let weight_key = format!("weight_{gate}");
                    let bias_key = format!("bias_{gate}");
                    let gate_id = format!("{id}#{gate}");
                    let in_scale = if gate == "h" {
                        h_record.scale
                    } else {
                        zr_record.scale
                    };
                    let weight = node.params.get(&weight_key).expect("validated gate weight");
                    let (qw, wq) = quantize_weight(&gate_id, weight)?;
                    let qb = quantize_bias(
                        node.params.get(&bias_key).expect("validated gate bias"),
                        in_scale,
                        &wq,
                    )?;
                    node.params.insert(weight_key, qw);
                    node.params.insert(bias_key, qb);
                    state.weights.insert(gate_id, wq);
                }
                state.activations.insert(zr_site, zr_record);
                state.activations.insert(h_site, h_record);
                state.activations.insert(id.clone(), site_record(stats, &id)?);
            }
            _ => {
                state.activations.insert(id.clone(), site_record(stats, &id)?);
            }
        }
    }

    out.quant = Some(state);
    Ok(out)
}

/// One-call post-training static quantization: calibrate, then freeze.
pub fn spaq_quantize(
    graph: &ModelGraph,
    batches: &[BTreeMap<String, Tensor>],
) -> Result<(ModelGraph, CalibrationStats)> {
    let stats = calibrate(graph, batches)?;
    let quantized = quantize_graph(graph, &stats)?;
    Ok((quantized, stats))
}
