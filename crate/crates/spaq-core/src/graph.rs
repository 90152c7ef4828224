//! Static compute graphs over a small CNN layer vocabulary.
//!
//! A [`ModelGraph`] is an immutable, topologically-ordered list of
//! [`LayerNode`]s plus named entry tensors and designated outputs. Graphs are
//! plain values — cloning one clones its parameters, and shared references
//! are safe to use across threads. All structural passes (validation, shape
//! inference, pruning surgery, quantization) build new graphs rather than
//! mutating in place.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::quantize::QuantState;
use crate::tensor::{DType, Tensor};

/// Epsilon used by every InstanceNorm layer, fixed crate-wide.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvAttrs {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GruAttrs {
    pub hidden_channels: usize,
    pub input_channels: usize,
    /// Gate kernel, odd in both dims; gates use "same" padding, stride 1.
    pub kernel: (usize, usize),
}

impl GruAttrs {
    pub fn padding(&self) -> (usize, usize) {
        ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d(ConvAttrs),
    InstanceNorm { channels: usize },
    Relu,
    Sigmoid,
    Tanh,
    Add,
    Concat,
    ConvGru(GruAttrs),
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::InstanceNorm { .. } => "instance_norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Tanh => "tanh",
            LayerKind::Add => "add",
            LayerKind::Concat => "concat",
            LayerKind::ConvGru(_) => "conv_gru",
        }
    }
}

/// The three gate convolutions housed inside a ConvGru node. Cost accounting
/// and pruning treat each gate as its own conv layer (`<node>#z` etc.).
pub const GRU_GATES: [&str; 3] = ["z", "r", "h"];

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub id: String,
    pub kind: LayerKind,
    /// Producer node ids or graph input names, in positional order.
    pub inputs: Vec<String>,
    /// Learnable parameters, keyed by conventional names ("weight", "bias",
    /// "gamma", "beta", "weight_z", ...). BTreeMap keeps iteration stable.
    pub params: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GraphInput {
    pub name: String,
    pub channels: usize,
    /// Default spatial size; forward accepts any H/W the stride chain admits.
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Fp32,
    Int8,
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Fp32 => "fp32",
            Precision::Int8 => "int8",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub inputs: Vec<GraphInput>,
    pub nodes: Vec<LayerNode>,
    pub outputs: Vec<String>,
    /// Present iff the graph has been through post-training quantization.
    pub quant: Option<QuantState>,
}

/// Per-node output shape (C, H, W); batch size is free.
pub type ShapeMap = BTreeMap<String, (usize, usize, usize)>;

impl ModelGraph {
    pub fn precision(&self) -> Precision {
        if self.quant.is_some() {
            Precision::Int8
        } else {
            Precision::Fp32
        }
    }

    pub fn node(&self, id: &str) -> Result<&LayerNode> {
        self.nodes
            .iter()
            .find(|n| n.id == id)
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    pub fn input(&self, name: &str) -> Option<&GraphInput> {
        self.inputs.iter().find(|i| i.name == name)
    }

    /// Total learnable parameter count (conv weights/biases, norm affine,
    /// GRU gates), independent of dtype.
    pub fn param_count(&self) -> usize {
        self.nodes
            .iter()
            .flat_map(|n| n.params.values())
            .map(Tensor::numel)
            .sum()
    }

    /// Structural + parameter-shape validation at the declared input sizes.
    pub fn validate(&self) -> Result<()> {
        let mut seen: HashSet<&str> = HashSet::new();
        for inp in &self.inputs {
            if !seen.insert(inp.name.as_str()) {
                return Err(Error::InvalidGraph(format!(
                    "duplicate input name `{}`",
                    inp.name
                )));
            }
            if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
                return Err(Error::InvalidGraph(format!(
                    "input `{}` has a zero extent",
                    inp.name
                )));
            }
        }
        for node in &self.nodes {
            if !seen.insert(node.id.as_str()) {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", node.id)));
            }
        }
        // Topological order: every referenced producer must precede its consumer.
        let mut defined: HashSet<&str> = self.inputs.iter().map(|i| i.name.as_str()).collect();
        for node in &self.nodes {
            for input in &node.inputs {
                if !defined.contains(input.as_str()) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` consumes `{input}` before it is defined",
                        node.id
                    )));
                }
            }
            defined.insert(node.id.as_str());
        }
        for out in &self.outputs {
            if !self.nodes.iter().any(|n| &n.id == out) {
                return Err(Error::InvalidGraph(format!(
                    "declared output `{out}` is not a node"
                )));
            }
        }
        if self.outputs.is_empty() {
            return Err(Error::InvalidGraph("graph declares no outputs".into()));
        }

        let shapes = self.infer_shapes_at(None)?;
        self.validate_params(&shapes)?;
        Ok(())
    }

    fn expect_param(&self, node: &LayerNode, name: &str, shape: &[usize]) -> Result<()> {
        let t = node.params.get(name).ok_or_else(|| {
            Error::InvalidGraph(format!("node `{}` is missing param `{name}`", node.id))
        })?;
        if t.shape() != shape {
            return Err(Error::InvalidGraph(format!(
                "node `{}` param `{name}` has shape {:?}, expected {:?}",
                node.id,
                t.shape(),
                shape
            )));
        }
        Ok(())
    }

    fn validate_params(&self, shapes: &ShapeMap) -> Result<()> {
        for node in &self.nodes {
            match &node.kind {
                LayerKind::Conv2d(a) => {
                    self.expect_param(
                        node,
                        "weight",
                        &[a.out_channels, a.in_channels, a.kernel.0, a.kernel.1],
                    )?;
                    if a.bias {
                        self.expect_param(node, "bias", &[a.out_channels])?;
                    }
                }
                LayerKind::InstanceNorm { channels } => {
                    self.expect_param(node, "gamma", &[*channels])?;
                    self.expect_param(node, "beta", &[*channels])?;
                }
                LayerKind::ConvGru(a) => {
                    if a.kernel.0 % 2 == 0 || a.kernel.1 % 2 == 0 {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: GRU gate kernel must be odd, got {:?}",
                            node.id, a.kernel
                        )));
                    }
                    let cin = a.hidden_channels + a.input_channels;
                    for gate in GRU_GATES {
                        self.expect_param(
                            node,
                            &format!("weight_{gate}"),
                            &[a.hidden_channels, cin, a.kernel.0, a.kernel.1],
                        )?;
                        self.expect_param(node, &format!("bias_{gate}"), &[a.hidden_channels])?;
                    }
                }
                _ => {
                    if !node.params.is_empty() {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}` ({}) must not carry parameters",
                            node.id,
                            node.kind.name()
                        )));
                    }
                }
            }
        }
        // Floating params must agree on one dtype; quantized graphs carry
        // int8 weights with int32 biases and fp32 norm affine.
        let mut float_dtype: Option<DType> = None;
        for node in &self.nodes {
            for (pname, t) in &node.params {
                match t.dtype() {
                    DType::F32 | DType::F64 => {
                        let d = t.dtype();
                        match float_dtype {
                            None => float_dtype = Some(d),
                            Some(prev) if prev != d => {
                                return Err(Error::DtypeMismatch(format!(
                                    "mixed float dtypes: `{}.{pname}` is {d}, earlier params are {prev}",
                                    node.id
                                )))
                            }
                            _ => {}
                        }
                    }
                    DType::I8 | DType::I32 => {
                        if self.quant.is_none() {
                            return Err(Error::DtypeMismatch(format!(
                                "`{}.{pname}` is integer but the graph is not quantized",
                                node.id
                            )));
                        }
                    }
                }
            }
        }
        let _ = shapes;
        Ok(())
    }

    /// Shape inference at the declared input sizes.
    pub fn infer_shapes(&self) -> Result<ShapeMap> {
        self.infer_shapes_at(None)
    }

    /// Shape inference with every input's H/W overridden to `resolution`.
    pub fn infer_shapes_with_resolution(&self, resolution: (usize, usize)) -> Result<ShapeMap> {
        self.infer_shapes_at(Some(resolution))
    }

    fn infer_shapes_at(&self, resolution: Option<(usize, usize)>) -> Result<ShapeMap> {
        let mut env: HashMap<&str, (usize, usize, usize)> = HashMap::new();
        for inp in &self.inputs {
            let (h, w) = resolution.unwrap_or((inp.height, inp.width));
            env.insert(inp.name.as_str(), (inp.channels, h, w));
        }
        let mut out = ShapeMap::new();
        for node in &self.nodes {
            let mut ins: Vec<(usize, usize, usize)> = Vec::with_capacity(node.inputs.len());
            for name in &node.inputs {
                ins.push(
                    *env.get(name.as_str())
                        .ok_or_else(|| Error::UnknownNode(name.clone()))?,
                );
            }
            let shape = infer_node_shape(node, &ins)?;
            env.insert(node.id.as_str(), shape);
            out.insert(node.id.clone(), shape);
        }
        Ok(out)
    }

    /// Structure-only fingerprint (ids, kinds, attrs, param shapes/dtypes).
    /// Used to detect graph mutation between tape recording and backward.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv1a::new();
        for inp in &self.inputs {
            h.write(inp.name.as_bytes());
            h.write_usize(inp.channels);
            h.write_usize(inp.height);
            h.write_usize(inp.width);
        }
        for node in &self.nodes {
            h.write(node.id.as_bytes());
            h.write(node.kind.name().as_bytes());
            if let LayerKind::Conv2d(a) = &node.kind {
                for v in [
                    a.in_channels,
                    a.out_channels,
                    a.kernel.0,
                    a.kernel.1,
                    a.stride.0,
                    a.stride.1,
                    a.padding.0,
                    a.padding.1,
                    a.bias as usize,
                ] {
                    h.write_usize(v);
                }
            }
            for name in &node.inputs {
                h.write(name.as_bytes());
            }
            for (pname, t) in &node.params {
                h.write(pname.as_bytes());
                h.write(&[t.dtype().code()]);
                for &e in t.shape() {
                    h.write_usize(e);
                }
            }
        }
        for out in &self.outputs {
            h.write(out.as_bytes());
        }
        h.finish()
    }
}

pub(crate) fn conv_output_hw(
    (h, w): (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    id: &str,
) -> Result<(usize, usize)> {
    let hp = h + 2 * padding.0;
    let wp = w + 2 * padding.1;
    if hp < kernel.0 || wp < kernel.1 {
        return Err(Error::BadResolution(format!(
            "conv `{id}`: padded input {hp}x{wp} smaller than kernel {}x{}",
            kernel.0, kernel.1
        )));
    }
    Ok(((hp - kernel.0) / stride.0 + 1, (wp - kernel.1) / stride.1 + 1))
}

fn infer_node_shape(node: &LayerNode, ins: &[(usize, usize, usize)]) -> Result<(usize, usize, usize)> {
    let arity = |want: usize| -> Result<()> {
        if ins.len() != want {
            return Err(Error::InvalidGraph(format!(
                "node `{}` ({}) wants {want} inputs, has {}",
                node.id,
                node.kind.name(),
                ins.len()
            )));
        }
        Ok(())
    };
    match &node.kind {
        LayerKind::Conv2d(a) => {
            arity(1)?;
            let (c, h, w) = ins[0];
            if c != a.in_channels {
                return Err(Error::ShapeMismatch(format!(
                    "conv `{}` expects {} input channels, got {c}",
                    node.id, a.in_channels
                )));
            }
            let (ho, wo) = conv_output_hw((h, w), a.kernel, a.stride, a.padding, &node.id)?;
            Ok((a.out_channels, ho, wo))
        }
        LayerKind::InstanceNorm { channels } => {
            arity(1)?;
            let (c, h, w) = ins[0];
            if c != *channels {
                return Err(Error::ShapeMismatch(format!(
                    "instance_norm `{}` expects {channels} channels, got {c}",
                    node.id
                )));
            }
            Ok((c, h, w))
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Tanh => {
            arity(1)?;
            Ok(ins[0])
        }
        LayerKind::Add => {
            if ins.len() < 2 {
                return Err(Error::InvalidGraph(format!(
                    "add `{}` wants at least 2 inputs",
                    node.id
                )));
            }
            for &s in &ins[1..] {
                if s != ins[0] {
                    return Err(Error::ShapeMismatch(format!(
                        "add `{}` inputs disagree: {:?} vs {:?}",
                        node.id, ins[0], s
                    )));
                }
            }
            Ok(ins[0])
        }
        LayerKind::Concat => {
            if ins.len() < 2 {
                return Err(Error::InvalidGraph(format!(
                    "concat `{}` wants at least 2 inputs",
                    node.id
                )));
            }
            let (_, h, w) = ins[0];
            let mut c = 0;
            for &(ci, hi, wi) in ins {
                if (hi, wi) != (h, w) {
                    return Err(Error::ShapeMismatch(format!(
                        "concat `{}` inputs disagree spatially: {}x{} vs {h}x{w}",
                        node.id, hi, wi
                    )));
                }
                c += ci;
            }
            Ok((c, h, w))
        }
        LayerKind::ConvGru(a) => {
            arity(2)?;
            let (ch, hh, wh) = ins[0];
            let (cx, hx, wx) = ins[1];
            if ch != a.hidden_channels || cx != a.input_channels {
                return Err(Error::ShapeMismatch(format!(
                    "conv_gru `{}` expects hidden {}ch / input {}ch, got {ch}/{cx}",
                    node.id, a.hidden_channels, a.input_channels
                )));
            }
            if (hh, wh) != (hx, wx) {
                return Err(Error::ShapeMismatch(format!(
                    "conv_gru `{}` hidden {hh}x{wh} and input {hx}x{wx} disagree spatially",
                    node.id
                )));
            }
            Ok((ch, hh, wh))
        }
    }
}

/// FNV-1a 64-bit. Small, deterministic, dependency-free; used for graph
/// fingerprints, config hashes and the model-file output digest.
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_usize(&mut self, v: usize) {
        self.write(&(v as u64).to_le_bytes());
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_node(id: &str, input: &str, cin: usize, cout: usize) -> LayerNode {
        let mut params = BTreeMap::new();
        params.insert(
            "weight".to_string(),
            Tensor::zeros(DType::F32, vec![cout, cin, 3, 3]),
        );
        params.insert("bias".to_string(), Tensor::zeros(DType::F32, vec![cout]));
        LayerNode {
            id: id.to_string(),
            kind: LayerKind::Conv2d(ConvAttrs {
                in_channels: cin,
                out_channels: cout,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                bias: true,
            }),
            inputs: vec![input.to_string()],
            params,
        }
    }

    fn chain() -> ModelGraph {
        ModelGraph {
            name: "chain".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                channels: 3,
                height: 8,
                width: 8,
            }],
            nodes: vec![conv_node("c1", "x", 3, 4), conv_node("c2", "c1", 4, 5)],
            outputs: vec!["c2".into()],
            quant: None,
        }
    }

    #[test]
    fn valid_chain_passes_and_infers_shapes() {
        let g = chain();
        g.validate().unwrap();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes["c1"], (4, 8, 8));
        assert_eq!(shapes["c2"], (5, 8, 8));
    }

    #[test]
    fn forward_reference_order_is_rejected() {
        let mut g = chain();
        g.nodes.swap(0, 1);
        let err = g.validate().unwrap_err();
        assert!(matches!(err, Error::InvalidGraph(_)), "{err}");
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut g = chain();
        if let LayerKind::Conv2d(a) = &mut g.nodes[1].kind {
            a.in_channels = 7;
        }
        assert!(g.validate().is_err());
    }

    #[test]
    fn strided_conv_shape_math() {
        // 7x7 stride-2 pad-3 stem halves even inputs exactly.
        let (h, w) = conv_output_hw((384, 512), (7, 7), (2, 2), (3, 3), "stem").unwrap();
        assert_eq!((h, w), (192, 256));
        let (h, w) = conv_output_hw((192, 256), (3, 3), (2, 2), (1, 1), "down").unwrap();
        assert_eq!((h, w), (96, 128));
    }

    #[test]
    fn fingerprint_tracks_structure_not_values() {
        let g = chain();
        let mut h = chain();
        assert_eq!(g.fingerprint(), h.fingerprint());
        h.nodes[0]
            .params
            .get_mut("weight")
            .unwrap()
            .as_f32_mut()
            .unwrap()[0] = 9.0;
        // Same structure, different values: fingerprint is structural only.
        assert_eq!(g.fingerprint(), h.fingerprint());
        let mut g2 = chain();
        g2.nodes[1].id = "c2b".into();
        g2.outputs = vec!["c2b".into()];
        assert_ne!(g.fingerprint(), g2.fingerprint());
    }
}
