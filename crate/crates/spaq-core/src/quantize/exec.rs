//! Integer execution of quantized graphs.
//!
//! Activations travel between layers as uint8 planes tagged with their
//! site record.  Convolutions run an i32 accumulator core followed by
//! per-channel fixed-point requantization — no float instruction executes
//! between reading the uint8 inputs and writing the uint8 outputs.  Every
//! other layer kind (norms, activations, Add, Concat, and the GRU
//! nonlinearities) dequantizes to fp32, computes, and requantizes at its own
//! calibrated site.

use std::collections::{BTreeMap, HashMap};

use crate::engine::{check_inputs, conv_shape_from_dims};
use crate::error::{Error, Result};
use crate::graph::{GruAttrs, LayerKind, LayerNode, ModelGraph, INSTANCE_NORM_EPS};
use crate::ops::{self, ConvShape};
use crate::tensor::{DType, Tensor};

use super::fixed_point::{requantize_reference, FixedPointScale};
use super::fp_guard;
use super::{
    requantize_multiplier, ActQuant, QuantConfig, QuantState, SITE_GRU_H, SITE_GRU_ZR,
};

/// A quantized activation plane in flight.
#[derive(Clone)]
struct QPlane {
    q: Vec<u8>,
    shape: Vec<usize>,
    rec: ActQuant,
}

impl QPlane {
    fn from_f32(data: &[f32], shape: Vec<usize>, rec: ActQuant) -> Self {
        let q = data.iter().map(|&v| rec.quantize(v)).collect();
        QPlane { q, shape, rec }
    }

    fn dequantize(&self) -> Vec<f32> {
        self.q.iter().map(|&v| self.rec.dequantize(v)).collect()
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

fn site_record(state: &QuantState, site: &str) -> Result<ActQuant> {
    state
        .activations
        .get(site)
        .copied()
        .ok_or_else(|| Error::Quantization(format!("missing activation record for site {site}")))
}

fn weight_scales<'a>(state: &'a QuantState, key: &str) -> Result<&'a [f32]> {
    state
        .weights
        .get(key)
        .map(|w| w.scales.as_slice())
        .ok_or_else(|| Error::Quantization(format!("missing weight scales for {key}")))
}

/// i32 accumulation core shared by plain convs and GRU gate convs.
///
/// Zero padding in the real domain maps to the input zero point, so padded
/// taps contribute `(z_x - z_x) = 0` and are simply skipped.  Runs entirely
/// under the float-op guard.
fn conv_acc_i32(
    xq: &[u8],
    zx: i32,
    wq: &[i8],
    bias: Option<&[i32]>,
    s: &ConvShape,
) -> Vec<i32> {
    let _guard = fp_guard::conv_region();
    let (h, w) = s.in_hw;
    let (ho, wo) = s.out_hw;
    let (kh, kw) = s.kernel;
    let (sh, sw) = s.stride;
    let (ph, pw) = s.padding;
    let (ci_n, co_n) = (s.in_channels, s.out_channels);
    let mut acc = vec![0i32; s.batch * co_n * ho * wo];
    for n in 0..s.batch {
        for co in 0..co_n {
            let base_w = co * ci_n * kh * kw;
            let b = bias.map_or(0, |b| b[co]);
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut sum = b;
                    for ci in 0..ci_n {
                        let base_x = (n * ci_n + ci) * h * w;
                        let base_k = base_w + ci * kh * kw;
                        for dk in 0..kh {
                            let ih = (oh * sh + dk) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let iw = (ow * sw + dj) as isize - pw as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                let x = i32::from(xq[base_x + (ih as usize) * w + iw as usize]);
                                let k = i32::from(wq[base_k + dk * kw + dj]);
                                sum += k * (x - zx);
                            }
                        }
                    }
                    acc[((n * co_n + co) * ho + oh) * wo + ow] = sum;
                }
            }
        }
    }
    acc
}

/// Requantize conv accumulators to the output site, per output channel.
fn requantize_planes(
    acc: &[i32],
    s: &ConvShape,
    multipliers: &[f64],
    out_rec: ActQuant,
    cfg: &QuantConfig,
) -> Vec<u8> {
    let fixed: Vec<FixedPointScale> = multipliers
        .iter()
        .map(|&m| requantize_multiplier(m))
        .collect();
    let _guard = fp_guard::conv_region();
    let plane = s.out_hw.0 * s.out_hw.1;
    let mut out = vec![0u8; acc.len()];
    for n in 0..s.batch {
        for co in 0..s.out_channels {
            let base = (n * s.out_channels + co) * plane;
            for i in base..base + plane {
                let r = if cfg.reference_requant {
                    requantize_reference(acc[i], multipliers[co])
                } else {
                    fixed[co].apply(acc[i])
                };
                out[i] = (r + out_rec.zero_point).clamp(0, 255) as u8;
            }
        }
    }
    out
}

/// Dequantize conv accumulators straight to fp32 (GRU gate path).
fn dequantize_acc(acc: &[i32], s: &ConvShape, in_scale: f32, w_scales: &[f32]) -> Vec<f32> {
    let plane = s.out_hw.0 * s.out_hw.1;
    let mut out = vec![0f32; acc.len()];
    for n in 0..s.batch {
        for co in 0..s.out_channels {
            let scale = (f64::from(in_scale) * f64::from(w_scales[co])) as f32;
            let base = (n * s.out_channels + co) * plane;
            for i in base..base + plane {
                out[i] = acc[i] as f32 * scale;
            }
        }
    }
    out
}

fn int_param<'a>(node: &'a LayerNode, name: &str, dtype: DType) -> Result<&'a Tensor> {
    let t = node
        .params
        .get(name)
        .ok_or_else(|| Error::InvalidGraph(format!("node `{}` missing param `{name}`", node.id)))?;
    if t.dtype() != dtype {
        return Err(Error::Quantization(format!(
            "param `{name}` of `{}` is {}, expected {dtype}",
            node.id,
            t.dtype()
        )));
    }
    Ok(t)
}

fn gru_gate_acc(
    node: &LayerNode,
    gate: &str,
    cat: &QPlane,
    s: &ConvShape,
    state: &QuantState,
) -> Result<Vec<f32>> {
    let w = int_param(node, &format!("weight_{gate}"), DType::I8)?;
    let b = int_param(node, &format!("bias_{gate}"), DType::I32)?;
    let acc = conv_acc_i32(&cat.q, cat.rec.zero_point, w.as_i8()?, Some(b.as_i32()?), s);
    let scales = weight_scales(state, &format!("{}#{gate}", node.id))?;
    Ok(dequantize_acc(&acc, s, cat.rec.scale, scales))
}

fn eval_gru(
    node: &LayerNode,
    attrs: &GruAttrs,
    hidden: &QPlane,
    input: &QPlane,
    state: &QuantState,
) -> Result<QPlane> {
    let (batch, ch, hh, hw) = hidden.dims();
    let (_, cx, _, _) = input.dims();
    if ch != attrs.hidden_channels || cx != attrs.input_channels {
        return Err(Error::ShapeMismatch(format!(
            "gru `{}` got channels ({ch}, {cx}), expected ({}, {})",
            node.id, attrs.hidden_channels, attrs.input_channels
        )));
    }
    let plane = hh * hw;
    let s = ops::gru_conv_shape(batch, ch, cx, (hh, hw), attrs.kernel);

    let h = hidden.dequantize();
    let x = input.dequantize();

    let zr_rec = site_record(state, &format!("{}{SITE_GRU_ZR}", node.id))?;
    let cat_zr = ops::concat_channels(&h, ch, &x, cx, batch, plane);
    let cat_zr = QPlane::from_f32(&cat_zr, vec![batch, ch + cx, hh, hw], zr_rec);
    let z = ops::sigmoid(&gru_gate_acc(node, "z", &cat_zr, &s, state)?);
    let r = ops::sigmoid(&gru_gate_acc(node, "r", &cat_zr, &s, state)?);

    let rh: Vec<f32> = r.iter().zip(&h).map(|(&r, &h)| r * h).collect();
    let h_rec = site_record(state, &format!("{}{SITE_GRU_H}", node.id))?;
    let cat_h = ops::concat_channels(&rh, ch, &x, cx, batch, plane);
    let cat_h = QPlane::from_f32(&cat_h, vec![batch, ch + cx, hh, hw], h_rec);
    let htilde = ops::tanh(&gru_gate_acc(node, "h", &cat_h, &s, state)?);

    let hnew: Vec<f32> = z
        .iter()
        .zip(&htilde)
        .zip(&h)
        .map(|((&z, &ht), &h)| (1.0 - z) * h + z * ht)
        .collect();
    let out_rec = site_record(state, &node.id)?;
    Ok(QPlane::from_f32(&hnew, vec![batch, ch, hh, hw], out_rec))
}

/// Run a quantized graph on fp32 inputs, returning fp32 outputs.
///
/// Inputs are quantized at their calibrated input sites; outputs are
/// dequantized from the producing node's site.
pub fn quantized_forward(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
    cfg: &QuantConfig,
) -> Result<BTreeMap<String, Tensor>> {
    let state = graph
        .quant
        .as_ref()
        .ok_or_else(|| Error::Quantization("graph carries no quantization state".to_string()))?;
    check_inputs(graph, inputs, DType::F32)?;

    let mut planes: HashMap<String, QPlane> = HashMap::new();
    for spec in &graph.inputs {
        let t = &inputs[&spec.name];
        let rec = site_record(state, &spec.name)?;
        planes.insert(
            spec.name.clone(),
            QPlane::from_f32(t.as_f32()?, t.shape().to_vec(), rec),
        );
    }

    for node in &graph.nodes {
        let ins: Vec<&QPlane> = node
            .inputs
            .iter()
            .map(|name| planes.get(name).ok_or_else(|| Error::UnknownNode(name.clone())))
            .collect::<Result<_>>()?;
        let out = eval_quantized(node, &ins, state, cfg)?;
        planes.insert(node.id.clone(), out);
    }

    let mut outputs = BTreeMap::new();
    for id in &graph.outputs {
        let p = &planes[id];
        outputs.insert(
            id.clone(),
            Tensor::from_f32(p.shape.clone(), p.dequantize())?,
        );
    }
    Ok(outputs)
}

fn eval_quantized(
    node: &LayerNode,
    ins: &[&QPlane],
    state: &QuantState,
    cfg: &QuantConfig,
) -> Result<QPlane> {
    match &node.kind {
        LayerKind::Conv2d(a) => {
            let x = ins[0];
            let s = conv_shape_from_dims(a, x.dims(), &node.id)?;
            let w = int_param(node, "weight", DType::I8)?;
            let bias = if a.bias {
                Some(int_param(node, "bias", DType::I32)?.as_i32()?)
            } else {
                None
            };
            let out_rec = site_record(state, &node.id)?;
            let w_scales = weight_scales(state, &node.id)?;
            let multipliers: Vec<f64> = w_scales
                .iter()
                .map(|&sw| {
                    f64::from(x.rec.scale) * f64::from(sw) / f64::from(out_rec.scale)
                })
                .collect();
            let acc = conv_acc_i32(&x.q, x.rec.zero_point, w.as_i8()?, bias, &s);
            let q = requantize_planes(&acc, &s, &multipliers, out_rec, cfg);
            Ok(QPlane {
                q,
                shape: vec![s.batch, s.out_channels, s.out_hw.0, s.out_hw.1],
                rec: out_rec,
            })
        }
        LayerKind::ConvGru(a) => eval_gru(node, a, ins[0], ins[1], state),
        LayerKind::InstanceNorm { channels } => {
            let (n, c, h, w) = ins[0].dims();
            if c != *channels {
                return Err(Error::ShapeMismatch(format!(
                    "norm `{}` expects {channels} channels, got {c}",
                    node.id
                )));
            }
            let gamma = int_param(node, "gamma", DType::F32)?;
            let beta = int_param(node, "beta", DType::F32)?;
            let y = ops::instance_norm_forward(
                &ins[0].dequantize(),
                gamma.as_f32()?,
                beta.as_f32()?,
                n,
                c,
                h * w,
                INSTANCE_NORM_EPS,
            )?;
            requant_unary(node, ins[0], y, state)
        }
        LayerKind::Relu => {
            let y = ops::relu(&ins[0].dequantize());
            requant_unary(node, ins[0], y, state)
        }
        LayerKind::Sigmoid => {
            let y = ops::sigmoid(&ins[0].dequantize());
            requant_unary(node, ins[0], y, state)
        }
        LayerKind::Tanh => {
            let y = ops::tanh(&ins[0].dequantize());
            requant_unary(node, ins[0], y, state)
        }
        LayerKind::Add => {
            let mut y = ins[0].dequantize();
            for other in &ins[1..] {
                if other.shape != ins[0].shape {
                    return Err(Error::ShapeMismatch(format!(
                        "add `{}` mixes shapes {:?} and {:?}",
                        node.id, ins[0].shape, other.shape
                    )));
                }
                for (dst, &q) in y.iter_mut().zip(&other.q) {
                    *dst += other.rec.dequantize(q);
                }
            }
            requant_unary(node, ins[0], y, state)
        }
        LayerKind::Concat => {
            let (n, _, h, w) = ins[0].dims();
            let plane = h * w;
            let c_total: usize = ins.iter().map(|p| p.shape[1]).sum();
            for p in ins {
                if p.shape[0] != n || (p.shape[2], p.shape[3]) != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "concat `{}` mixes spatial shapes",
                        node.id
                    )));
                }
            }
            let srcs: Vec<Vec<f32>> = ins.iter().map(|p| p.dequantize()).collect();
            let mut y = vec![0f32; n * c_total * plane];
            for b in 0..n {
                let mut at = 0;
                for (p, src) in ins.iter().zip(&srcs) {
                    let c = p.shape[1];
                    y[(b * c_total + at) * plane..(b * c_total + at + c) * plane]
                        .copy_from_slice(&src[b * c * plane..(b + 1) * c * plane]);
                    at += c;
                }
            }
            let rec = site_record(state, &node.id)?;
            Ok(QPlane::from_f32(&y, vec![n, c_total, h, w], rec))
        }
    }
}

fn requant_unary(
    node: &LayerNode,
    like: &QPlane,
    y: Vec<f32>,
    state: &QuantState,
) -> Result<QPlane> {
    let rec = site_record(state, &node.id)?;
    Ok(QPlane::from_f32(&y, like.shape.clone(), rec))
}
