//! Graph execution: forward pass, gradient tape, reverse-mode backward.
//!
//! The executor runs in the graph's float dtype (fp32 in production, fp64
//! for gradient checking — both share one generic code path). Quantized
//! graphs are rejected here; they execute through `quantize::quantized_forward`.
//!
//! Determinism: node order, accumulation order and kernel internals are all
//! fixed, so two forward calls over identical inputs produce bit-identical
//! outputs.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, LayerNode, ModelGraph, INSTANCE_NORM_EPS};
use crate::ops::{self, ConvShape, GruWeights, Real};
use crate::tensor::{DType, Tensor};

/// Gradients keyed by (node id, param name).
pub type GradientMap = BTreeMap<(String, String), Tensor>;

/// Tensor access for the generic executor.
pub trait TensorElem: Real {
    const DTYPE: DType;
    fn slice(t: &Tensor) -> Result<&[Self]>;
    fn make(shape: Vec<usize>, data: Vec<Self>) -> Result<Tensor>;
}

impl TensorElem for f32 {
    const DTYPE: DType = DType::F32;
    fn slice(t: &Tensor) -> Result<&[Self]> {
        t.as_f32()
    }
    fn make(shape: Vec<usize>, data: Vec<Self>) -> Result<Tensor> {
        Tensor::from_f32(shape, data)
    }
}

impl TensorElem for f64 {
    const DTYPE: DType = DType::F64;
    fn slice(t: &Tensor) -> Result<&[Self]> {
        t.as_f64()
    }
    fn make(shape: Vec<usize>, data: Vec<Self>) -> Result<Tensor> {
        Tensor::from_f64(shape, data)
    }
}

/// Saved ConvGRU intermediates, one entry per cell node on the tape.
#[derive(Debug, Clone)]
pub struct GruSavedTensors {
    pub cat_zr: Tensor,
    pub z: Tensor,
    pub r: Tensor,
    pub cat_h: Tensor,
    pub htilde: Tensor,
}

/// Recorded forward pass: every node output (plus the graph inputs) with
/// enough side state to run backward once.
#[derive(Debug, Clone)]
pub struct GradientTape {
    fingerprint: u64,
    values: HashMap<String, Tensor>,
    gru_saved: HashMap<String, GruSavedTensors>,
}

impl GradientTape {
    pub fn value(&self, id: &str) -> Option<&Tensor> {
        self.values.get(id)
    }

    pub(crate) fn values_map(&self) -> &HashMap<String, Tensor> {
        &self.values
    }

    pub(crate) fn gru_map(&self) -> &HashMap<String, GruSavedTensors> {
        &self.gru_saved
    }
}

/// The graph's float dtype, derived from its parameters.
pub fn float_dtype(graph: &ModelGraph) -> Result<DType> {
    if graph.quant.is_some() {
        return Err(Error::DtypeMismatch(
            "graph is quantized; use quantized_forward".into(),
        ));
    }
    for node in &graph.nodes {
        for t in node.params.values() {
            match t.dtype() {
                DType::F32 => return Ok(DType::F32),
                DType::F64 => return Ok(DType::F64),
                _ => {}
            }
        }
    }
    Ok(DType::F32)
}

pub(crate) fn check_inputs(graph: &ModelGraph, inputs: &BTreeMap<String, Tensor>, dtype: DType) -> Result<usize> {
    let mut batch = None;
    for spec in &graph.inputs {
        let t = inputs.get(&spec.name).ok_or_else(|| {
            Error::ShapeMismatch(format!("missing graph input `{}`", spec.name))
        })?;
        if t.dtype() != dtype {
            return Err(Error::DtypeMismatch(format!(
                "input `{}` is {}, graph runs in {dtype}",
                spec.name,
                t.dtype()
            )));
        }
        let s = t.shape();
        if s.len() != 4 || s[1] != spec.channels {
            return Err(Error::ShapeMismatch(format!(
                "input `{}` has shape {s:?}, expected [N, {}, H, W]",
                spec.name, spec.channels
            )));
        }
        match batch {
            None => batch = Some(s[0]),
            Some(n) if n != s[0] => {
                return Err(Error::ShapeMismatch(format!(
                    "inputs disagree on batch size: {n} vs {}",
                    s[0]
                )))
            }
            _ => {}
        }
    }
    for name in inputs.keys() {
        if graph.input(name).is_none() {
            return Err(Error::UnknownNode(format!("unexpected input `{name}`")));
        }
    }
    batch.ok_or_else(|| Error::InvalidGraph("graph has no inputs".into()))
}

/// Run the graph, returning the declared outputs keyed by node id.
pub fn forward(graph: &ModelGraph, inputs: &BTreeMap<String, Tensor>) -> Result<BTreeMap<String, Tensor>> {
    let (outputs, _) = forward_recorded_inner(graph, inputs, false)?;
    Ok(outputs)
}

/// Run the graph and keep every intermediate for a later [`backward`] call.
pub fn forward_recorded(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
) -> Result<(BTreeMap<String, Tensor>, GradientTape)> {
    let (outputs, tape) = forward_recorded_inner(graph, inputs, true)?;
    Ok((outputs, tape.expect("tape requested")))
}

fn forward_recorded_inner(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
    record: bool,
) -> Result<(BTreeMap<String, Tensor>, Option<GradientTape>)> {
    match float_dtype(graph)? {
        DType::F64 => run_forward::<f64>(graph, inputs, record),
        _ => run_forward::<f32>(graph, inputs, record),
    }
}

fn run_forward<T: TensorElem>(
    graph: &ModelGraph,
    inputs: &BTreeMap<String, Tensor>,
    record: bool,
) -> Result<(BTreeMap<String, Tensor>, Option<GradientTape>)> {
    let batch = check_inputs(graph, inputs, T::DTYPE)?;
    let mut values: HashMap<String, Tensor> = inputs
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut gru_saved = HashMap::new();

    for node in &graph.nodes {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .map(|name| {
                values
                    .get(name)
                    .ok_or_else(|| Error::UnknownNode(name.clone()))
            })
            .collect::<Result<_>>()?;
        let (out, saved) = eval_node::<T>(node, &ins, batch)?;
        if let Some(saved) = saved {
            gru_saved.insert(node.id.clone(), saved);
        }
        values.insert(node.id.clone(), out);
    }

    let mut outputs = BTreeMap::new();
    for id in &graph.outputs {
        outputs.insert(id.clone(), values[id].clone());
    }
    let tape = record.then(|| GradientTape {
        fingerprint: graph.fingerprint(),
        values,
        gru_saved,
    });
    Ok((outputs, tape))
}

fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

pub(crate) fn conv_shape_for(attrs: &crate::graph::ConvAttrs, x: &Tensor, id: &str) -> Result<ConvShape> {
    let (n, c, h, w) = dims4(x);
    conv_shape_from_dims(attrs, (n, c, h, w), id)
}

pub(crate) fn conv_shape_from_dims(
    attrs: &crate::graph::ConvAttrs,
    (n, c, h, w): (usize, usize, usize, usize),
    id: &str,
) -> Result<ConvShape> {
    if c != attrs.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "conv `{id}` expects {} input channels, got {c}",
            attrs.in_channels
        )));
    }
    let out_hw = crate::graph::conv_output_hw((h, w), attrs.kernel, attrs.stride, attrs.padding, id)?;
    Ok(ConvShape {
        batch: n,
        in_channels: attrs.in_channels,
        out_channels: attrs.out_channels,
        in_hw: (h, w),
        out_hw,
        kernel: attrs.kernel,
        stride: attrs.stride,
        padding: attrs.padding,
    })
}

fn param<'a, T: TensorElem>(node: &'a LayerNode, name: &str) -> Result<(&'a Tensor, &'a [T])> {
    let t = node
        .params
        .get(name)
        .ok_or_else(|| Error::InvalidGraph(format!("node `{}` missing param `{name}`", node.id)))?;
    Ok((t, T::slice(t)?))
}

fn eval_node<T: TensorElem>(
    node: &LayerNode,
    ins: &[&Tensor],
    batch: usize,
) -> Result<(Tensor, Option<GruSavedTensors>)> {
    match &node.kind {
        LayerKind::Conv2d(a) => {
            let s = conv_shape_for(a, ins[0], &node.id)?;
            let (_, w) = param::<T>(node, "weight")?;
            let x = T::slice(ins[0])?;
            let y = if a.bias {
                let (_, b) = param::<T>(node, "bias")?;
                ops::conv2d_forward(x, w, Some(b), &s)
            } else {
                ops::conv2d_forward(x, w, None, &s)
            };
            let t = T::make(vec![s.batch, s.out_channels, s.out_hw.0, s.out_hw.1], y)?;
            Ok((t, None))
        }
        LayerKind::InstanceNorm { channels } => {
            let (n, c, h, w) = dims4(ins[0]);
            if c != *channels {
                return Err(Error::ShapeMismatch(format!(
                    "instance_norm `{}` expects {channels} channels, got {c}",
                    node.id
                )));
            }
            let (_, gamma) = param::<T>(node, "gamma")?;
            let (_, beta) = param::<T>(node, "beta")?;
            let y = ops::instance_norm_forward(
                T::slice(ins[0])?,
                gamma,
                beta,
                n,
                c,
                h * w,
                INSTANCE_NORM_EPS,
            )?;
            Ok((T::make(vec![n, c, h, w], y)?, None))
        }
        LayerKind::Relu => {
            let y = ops::relu(T::slice(ins[0])?);
            Ok((T::make(ins[0].shape().to_vec(), y)?, None))
        }
        LayerKind::Sigmoid => {
            let y = ops::sigmoid(T::slice(ins[0])?);
            Ok((T::make(ins[0].shape().to_vec(), y)?, None))
        }
        LayerKind::Tanh => {
            let y = ops::tanh(T::slice(ins[0])?);
            Ok((T::make(ins[0].shape().to_vec(), y)?, None))
        }
        LayerKind::Add => {
            let first = T::slice(ins[0])?;
            let mut acc = first.to_vec();
            for t in &ins[1..] {
                if t.shape() != ins[0].shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "add `{}` inputs disagree: {:?} vs {:?}",
                        node.id,
                        ins[0].shape(),
                        t.shape()
                    )));
                }
                for (o, &v) in acc.iter_mut().zip(T::slice(t)?) {
                    *o += v;
                }
            }
            Ok((T::make(ins[0].shape().to_vec(), acc)?, None))
        }
        LayerKind::Concat => {
            let (n, _, h, w) = dims4(ins[0]);
            let mut c_total = 0;
            for t in ins {
                let (ni, ci, hi, wi) = dims4(t);
                if (ni, hi, wi) != (n, h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "concat `{}` inputs disagree spatially",
                        node.id
                    )));
                }
                c_total += ci;
            }
            let plane = h * w;
            let mut out = vec![T::ZERO; n * c_total * plane];
            for nb in 0..n {
                let mut off = 0;
                for t in ins {
                    let ci = t.shape()[1];
                    let src = T::slice(t)?;
                    out[(nb * c_total + off) * plane..(nb * c_total + off + ci) * plane]
                        .copy_from_slice(&src[nb * ci * plane..(nb + 1) * ci * plane]);
                    off += ci;
                }
            }
            Ok((T::make(vec![n, c_total, h, w], out)?, None))
        }
        LayerKind::ConvGru(a) => {
            let (hidden, input) = (ins[0], ins[1]);
            let (n, ch, hh, ww) = dims4(hidden);
            let (_, cx, _, _) = dims4(input);
            if ch != a.hidden_channels || cx != a.input_channels {
                return Err(Error::ShapeMismatch(format!(
                    "conv_gru `{}` expects hidden {} / input {} channels, got {ch}/{cx}",
                    node.id, a.hidden_channels, a.input_channels
                )));
            }
            if input.shape()[2] != hh || input.shape()[3] != ww || input.shape()[0] != n {
                return Err(Error::ShapeMismatch(format!(
                    "conv_gru `{}` hidden/input tensors disagree",
                    node.id
                )));
            }
            let weights = gru_weights::<T>(node)?;
            let (hp, saved) = ops::gru_forward(
                T::slice(hidden)?,
                T::slice(input)?,
                &weights,
                n,
                ch,
                cx,
                (hh, ww),
                a.kernel,
            );
            let shape = vec![n, ch, hh, ww];
            let saved = GruSavedTensors {
                cat_zr: T::make(vec![n, ch + cx, hh, ww], saved.cat_zr)?,
                z: T::make(shape.clone(), saved.z)?,
                r: T::make(shape.clone(), saved.r)?,
                cat_h: T::make(vec![n, ch + cx, hh, ww], saved.cat_h)?,
                htilde: T::make(shape.clone(), saved.htilde)?,
            };
            Ok((T::make(shape, hp)?, Some(saved)))
        }
    }
    .map(|(t, s)| {
        let _ = batch;
        (t, s)
    })
}

fn gru_weights<T: TensorElem>(node: &LayerNode) -> Result<GruWeights<'_, T>> {
    Ok(GruWeights {
        wz: param::<T>(node, "weight_z")?.1,
        bz: param::<T>(node, "bias_z")?.1,
        wr: param::<T>(node, "weight_r")?.1,
        br: param::<T>(node, "bias_r")?.1,
        wh: param::<T>(node, "weight_h")?.1,
        bh: param::<T>(node, "bias_h")?.1,
    })
}

/// Functional single-step ConvGRU over an existing cell node.
pub fn conv_gru_step(cell: &LayerNode, hidden: &Tensor, input: &Tensor) -> Result<Tensor> {
    let attrs = match &cell.kind {
        LayerKind::ConvGru(a) => a.clone(),
        other => {
            return Err(Error::InvalidGraph(format!(
                "conv_gru_step on `{}` which is a {}",
                cell.id,
                other.name()
            )))
        }
    };
    let ins = [hidden, input];
    let dtype = hidden.dtype();
    if input.dtype() != dtype {
        return Err(Error::DtypeMismatch(format!(
            "hidden is {dtype}, input is {}",
            input.dtype()
        )));
    }
    let node = LayerNode {
        id: cell.id.clone(),
        kind: LayerKind::ConvGru(attrs),
        inputs: cell.inputs.clone(),
        params: cell.params.clone(),
    };
    let (out, _) = match dtype {
        DType::F64 => eval_node::<f64>(&node, &ins, hidden.shape()[0])?,
        DType::F32 => eval_node::<f32>(&node, &ins, hidden.shape()[0])?,
        other => return Err(Error::DtypeMismatch(format!("conv_gru_step on {other}"))),
    };
    Ok(out)
}

/// Reverse-mode pass over a recorded forward. `output_grads` seeds dL/d(out)
/// for any subset of the declared outputs; parameters not reachable from the
/// seeded outputs get zero gradients.
pub fn backward(
    graph: &ModelGraph,
    tape: &GradientTape,
    output_grads: &BTreeMap<String, Tensor>,
) -> Result<GradientMap> {
    if tape.fingerprint != graph.fingerprint() {
        return Err(Error::TapeMismatch);
    }
    match float_dtype(graph)? {
        DType::F64 => run_backward::<f64>(graph, tape, output_grads),
        _ => run_backward::<f32>(graph, tape, output_grads),
    }
}

fn run_backward<T: TensorElem>(
    graph: &ModelGraph,
    tape: &GradientTape,
    output_grads: &BTreeMap<String, Tensor>,
) -> Result<GradientMap> {
    let mut grads: HashMap<String, Vec<T>> = HashMap::new();
    for (id, g) in output_grads {
        if !graph.outputs.contains(id) {
            return Err(Error::UnknownNode(format!(
                "`{id}` is not a declared output"
            )));
        }
        let value = tape
            .values
            .get(id)
            .ok_or_else(|| Error::TapeMismatch)?;
        if value.shape() != g.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output grad for `{id}` has shape {:?}, value is {:?}",
                g.shape(),
                value.shape()
            )));
        }
        grads.insert(id.clone(), T::slice(g)?.to_vec());
    }

    let mut param_grads = GradientMap::new();

    for node in graph.nodes.iter().rev() {
        let Some(dy) = grads.remove(&node.id) else {
            continue;
        };
        backprop_node::<T>(node, &dy, tape, &mut grads, &mut param_grads)?;
    }

    // Unreached parameters still appear, as zeros.
    for node in &graph.nodes {
        for (pname, t) in &node.params {
            param_grads
                .entry((node.id.clone(), pname.clone()))
                .or_insert_with(|| Tensor::zeros(T::DTYPE, t.shape().to_vec()));
        }
    }
    Ok(param_grads)
}

fn accumulate<T: TensorElem>(grads: &mut HashMap<String, Vec<T>>, name: &str, delta: Vec<T>) {
    match grads.get_mut(name) {
        Some(acc) => {
            for (o, v) in acc.iter_mut().zip(delta) {
                *o += v;
            }
        }
        None => {
            grads.insert(name.to_string(), delta);
        }
    }
}

fn store_param_grad<T: TensorElem>(
    param_grads: &mut GradientMap,
    node: &LayerNode,
    pname: &str,
    data: Vec<T>,
) -> Result<()> {
    let shape = node.params[pname].shape().to_vec();
    let t = T::make(shape, data)?;
    match param_grads.get_mut(&(node.id.clone(), pname.to_string())) {
        Some(existing) => {
            // A node can only be visited once in reverse topological order,
            // so accumulation here would indicate a bug.
            debug_assert!(false, "param grad stored twice for {}.{}", node.id, pname);
            *existing = t;
        }
        None => {
            param_grads.insert((node.id.clone(), pname.to_string()), t);
        }
    }
    Ok(())
}

fn backprop_node<T: TensorElem>(
    node: &LayerNode,
    dy: &[T],
    tape: &GradientTape,
    grads: &mut HashMap<String, Vec<T>>,
    param_grads: &mut GradientMap,
) -> Result<()> {
    let value = |name: &str| -> Result<&Tensor> {
        tape.values.get(name).ok_or(Error::TapeMismatch)
    };
    match &node.kind {
        LayerKind::Conv2d(a) => {
            let x_t = value(&node.inputs[0])?;
            let s = conv_shape_for(a, x_t, &node.id)?;
            let (_, w) = param::<T>(node, "weight")?;
            let g = ops::conv2d_backward(dy, T::slice(x_t)?, w, a.bias, &s);
            store_param_grad(param_grads, node, "weight", g.dw)?;
            if let Some(db) = g.db {
                store_param_grad(param_grads, node, "bias", db)?;
            }
            accumulate(grads, &node.inputs[0], g.dx);
        }
        LayerKind::InstanceNorm { .. } => {
            let x_t = value(&node.inputs[0])?;
            let (n, c, h, w) = dims4(x_t);
            let (_, gamma) = param::<T>(node, "gamma")?;
            let g = ops::instance_norm_backward(
                dy,
                T::slice(x_t)?,
                gamma,
                n,
                c,
                h * w,
                INSTANCE_NORM_EPS,
            );
            store_param_grad(param_grads, node, "gamma", g.dgamma)?;
            store_param_grad(param_grads, node, "beta", g.dbeta)?;
            accumulate(grads, &node.inputs[0], g.dx);
        }
        LayerKind::Relu => {
            let y = T::slice(value(&node.id)?)?;
            accumulate(grads, &node.inputs[0], ops::relu_backward(dy, y));
        }
        LayerKind::Sigmoid => {
            let y = T::slice(value(&node.id)?)?;
            accumulate(grads, &node.inputs[0], ops::sigmoid_backward(dy, y));
        }
        LayerKind::Tanh => {
            let y = T::slice(value(&node.id)?)?;
            accumulate(grads, &node.inputs[0], ops::tanh_backward(dy, y));
        }
        LayerKind::Add => {
            for name in &node.inputs {
                accumulate(grads, name, dy.to_vec());
            }
        }
        LayerKind::Concat => {
            let (n, c_total, h, w) = dims4(value(&node.id)?);
            let plane = h * w;
            let mut off = 0;
            for name in &node.inputs {
                let ci = value(name)?.shape()[1];
                let mut dxi = vec![T::ZERO; n * ci * plane];
                for nb in 0..n {
                    dxi[nb * ci * plane..(nb + 1) * ci * plane].copy_from_slice(
                        &dy[(nb * c_total + off) * plane..(nb * c_total + off + ci) * plane],
                    );
                }
                accumulate(grads, name, dxi);
                off += ci;
            }
        }
        LayerKind::ConvGru(a) => {
            let saved = tape
                .gru_saved
                .get(&node.id)
                .ok_or(Error::TapeMismatch)?;
            let h_t = value(&node.inputs[0])?;
            let (n, ch, hh, ww) = dims4(h_t);
            let weights = gru_weights::<T>(node)?;
            let saved_t = ops::GruSaved {
                cat_zr: T::slice(&saved.cat_zr)?.to_vec(),
                z: T::slice(&saved.z)?.to_vec(),
                r: T::slice(&saved.r)?.to_vec(),
                cat_h: T::slice(&saved.cat_h)?.to_vec(),
                htilde: T::slice(&saved.htilde)?.to_vec(),
            };
            let g = ops::gru_backward(
                dy,
                T::slice(h_t)?,
                &saved_t,
                &weights,
                n,
                ch,
                a.input_channels,
                (hh, ww),
                a.kernel,
            );
            store_param_grad(param_grads, node, "weight_z", g.dwz)?;
            store_param_grad(param_grads, node, "bias_z", g.dbz)?;
            store_param_grad(param_grads, node, "weight_r", g.dwr)?;
            store_param_grad(param_grads, node, "bias_r", g.dbr)?;
            store_param_grad(param_grads, node, "weight_h", g.dwh)?;
            store_param_grad(param_grads, node, "bias_h", g.dbh)?;
            accumulate(grads, &node.inputs[0], g.dh);
            accumulate(grads, &node.inputs[1], g.dx);
        }
    }
    Ok(())
}
