//! Model zoo: SLAM-style feature/context/update networks plus test toys.
//!
//! The three production models reconstruct the deep modules of a
//! correspondence-based SLAM system at their published computational
//! profile:
//!
//! - `fnet` — feature encoder, 18 convs, instance-normalized, D=128;
//! - `cnet` — context encoder, same trunk without normalization, D=256;
//! - `updatenet` — iterative update operator, 19 convs counting the three
//!   ConvGRU gates, producing flow revisions, confidence weights and
//!   damping factors from correlation features, current flow and context.
//!
//! Encoders use a 7x7 stride-2 stem, an extra 3x3 conv, three stages at
//! 1/2, 1/4 and 1/8 resolution with widths (64, 96, 128) and two residual
//! blocks each, 1x1 projections on each stage's entry skip, and a 1x1 head
//! to the output dimension. The update operator initializes its GRU hidden
//! state from the context features (tanh of a 1x1 conv), runs one unrolled
//! update, and feeds the new state to its three output heads; further
//! iterations are available through [`crate::engine::conv_gru_step`].
//!
//! Weights are Kaiming-uniform over the fan-in, biases zero, drawn from a
//! ChaCha8 stream seeded by `ZooSpec::seed` in node order — the same spec
//! always rebuilds bit-identical parameters.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ConvAttrs, GraphInput, GruAttrs, LayerKind, LayerNode, ModelGraph};
use crate::tensor::Tensor;

/// Construction recipe for one zoo model.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ZooSpec {
    /// One of `fnet`, `cnet`, `updatenet`, `toy-residual`, `toy-gru`.
    pub name: String,
    /// Output feature dimension of the final head.
    pub output_dim: usize,
    /// Default spatial size used for FLOPs reporting.
    pub input_resolution: (usize, usize),
    pub seed: u64,
}

impl ZooSpec {
    /// The default recipe for a zoo name.
    pub fn preset(name: &str) -> Result<ZooSpec> {
        let (output_dim, input_resolution) = match name {
            "fnet" => (128, (384, 512)),
            "cnet" => (256, (384, 512)),
            // The update operator runs on 1/8-resolution feature maps.
            "updatenet" => (2, (48, 64)),
            "toy-residual" => (2, (16, 16)),
            "toy-gru" => (2, (16, 16)),
            other => {
                return Err(Error::InvalidConfig(format!("unknown zoo model `{other}`")))
            }
        };
        Ok(ZooSpec {
            name: name.to_string(),
            output_dim,
            input_resolution,
            seed: 0,
        })
    }
}

/// Published computational profile the zoo is calibrated against.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ReferenceProfile {
    pub total_params_m: f64,
    pub cnn_params_m: f64,
    pub cnn_share_pct: f64,
    pub flops_b: f64,
}

/// Reference profile of the reconstructed system's deep modules.
pub fn profile_reference() -> ReferenceProfile {
    ReferenceProfile {
        total_params_m: 4.00,
        cnn_params_m: 3.94,
        cnn_share_pct: 98.5,
        flops_b: 4.64,
    }
}

/// Build a zoo model. Same spec, same bits.
pub fn build(spec: &ZooSpec) -> Result<ModelGraph> {
    let mut b = Builder::new(&spec.name, spec.seed);
    match spec.name.as_str() {
        "fnet" => build_encoder(&mut b, spec, true),
        "cnet" => build_encoder(&mut b, spec, false),
        "updatenet" => build_update(&mut b, spec),
        "toy-residual" => build_toy_residual(&mut b, spec, (4, 8)),
        "toy-gru" => build_toy_gru(&mut b, spec),
        other => return Err(Error::InvalidConfig(format!("unknown zoo model `{other}`"))),
    }
    let graph = b.finish();
    graph.validate()?;
    Ok(graph)
}

struct Builder {
    name: String,
    rng: ChaCha8Rng,
    inputs: Vec<GraphInput>,
    nodes: Vec<LayerNode>,
    outputs: Vec<String>,
}

impl Builder {
    fn new(name: &str, seed: u64) -> Self {
        Builder {
            name: name.to_string(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            inputs: Vec::new(),
            nodes: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, name: &str, channels: usize, (h, w): (usize, usize)) -> String {
        self.inputs.push(GraphInput {
            name: name.to_string(),
            channels,
            height: h,
            width: w,
        });
        name.to_string()
    }

    fn kaiming(&mut self, out_c: usize, in_c: usize, (kh, kw): (usize, usize)) -> Tensor {
        let fan_in = in_c * kh * kw;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data: Vec<f32> = (0..out_c * in_c * kh * kw)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        Tensor::from_f32(vec![out_c, in_c, kh, kw], data).expect("init shape")
    }

    fn push(&mut self, id: &str, kind: LayerKind, inputs: &[&str], params: BTreeMap<String, Tensor>) -> String {
        self.nodes.push(LayerNode {
            id: id.to_string(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params,
        });
        id.to_string()
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        id: &str,
        from: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
    ) -> String {
        let k = (kernel, kernel);
        let weight = self.kaiming(out_c, in_c, k);
        let mut params = BTreeMap::new();
        params.insert("weight".to_string(), weight);
        params.insert("bias".to_string(), Tensor::from_f32(vec![out_c], vec![0.0; out_c]).expect("bias"));
        let attrs = ConvAttrs {
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
            stride: (stride, stride),
            padding: ((kernel - 1) / 2, (kernel - 1) / 2),
            bias: true,
        };
        self.push(id, LayerKind::Conv2d(attrs), &[from], params)
    }

    fn norm(&mut self, id: &str, from: &str, channels: usize) -> String {
        let mut params = BTreeMap::new();
        params.insert("gamma".to_string(), Tensor::from_f32(vec![channels], vec![1.0; channels]).expect("gamma"));
        params.insert("beta".to_string(), Tensor::from_f32(vec![channels], vec![0.0; channels]).expect("beta"));
        self.push(id, LayerKind::InstanceNorm { channels }, &[from], params)
    }

    fn relu(&mut self, id: &str, from: &str) -> String {
        self.push(id, LayerKind::Relu, &[from], BTreeMap::new())
    }

    fn tanh(&mut self, id: &str, from: &str) -> String {
        self.push(id, LayerKind::Tanh, &[from], BTreeMap::new())
    }

    fn sigmoid(&mut self, id: &str, from: &str) -> String {
        self.push(id, LayerKind::Sigmoid, &[from], BTreeMap::new())
    }

    fn add(&mut self, id: &str, from: &[&str]) -> String {
        self.push(id, LayerKind::Add, from, BTreeMap::new())
    }

    fn concat(&mut self, id: &str, from: &[&str]) -> String {
        self.push(id, LayerKind::Concat, from, BTreeMap::new())
    }

    fn gru(&mut self, id: &str, hidden: &str, input: &str, ch: usize, cx: usize, kernel: usize) -> String {
        let k = (kernel, kernel);
        let mut params = BTreeMap::new();
        for gate in crate::graph::GRU_GATES {
            let weight = self.kaiming(ch, ch + cx, k);
            params.insert(format!("weight_{gate}"), weight);
            params.insert(
                format!("bias_{gate}"),
                Tensor::from_f32(vec![ch], vec![0.0; ch]).expect("gate bias"),
            );
        }
        let attrs = GruAttrs {
            hidden_channels: ch,
            input_channels: cx,
            kernel: k,
        };
        self.push(id, LayerKind::ConvGru(attrs), &[hidden, input], params)
    }

    fn output(&mut self, id: &str) {
        self.outputs.push(id.to_string());
    }

    fn finish(self) -> ModelGraph {
        ModelGraph {
            name: self.name,
            inputs: self.inputs,
            nodes: self.nodes,
            outputs: self.outputs,
            quant: None,
        }
    }
}

/// Conv (+ optional norm) + ReLU, the encoder's repeating unit.
fn conv_unit(
    b: &mut Builder,
    id: &str,
    from: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    normed: bool,
) -> String {
    let c = b.conv(id, from, in_c, out_c, kernel, stride);
    let pre = if normed {
        b.norm(&format!("{id}.norm"), &c, out_c)
    } else {
        c
    };
    b.relu(&format!("{id}.relu"), &pre)
}

/// One residual block: two 3x3 convs with a skip, projected on entry blocks.
#[allow(clippy::too_many_arguments)]
fn res_block(
    b: &mut Builder,
    id: &str,
    from: &str,
    in_c: usize,
    out_c: usize,
    stride: usize,
    project: bool,
    normed: bool,
) -> String {
    let y = conv_unit(b, &format!("{id}.conv1"), from, in_c, out_c, 3, stride, normed);
    let y = b.conv(&format!("{id}.conv2"), &y, out_c, out_c, 3, 1);
    let y = if normed {
        b.norm(&format!("{id}.conv2.norm"), &y, out_c)
    } else {
        y
    };
    let skip = if project {
        let p = b.conv(&format!("{id}.proj"), from, in_c, out_c, 1, stride);
        if normed {
            b.norm(&format!("{id}.proj.norm"), &p, out_c)
        } else {
            p
        }
    } else {
        from.to_string()
    };
    let sum = b.add(&format!("{id}.add"), &[&y, &skip]);
    b.relu(&format!("{id}.relu"), &sum)
}

fn build_encoder(b: &mut Builder, spec: &ZooSpec, normed: bool) {
    let x = b.input("image", 3, spec.input_resolution);
    let x = conv_unit(b, "stem", &x, 3, 64, 7, 2, normed);
    let x = conv_unit(b, "stem2", &x, 64, 64, 3, 1, normed);
    let widths = [64usize, 96, 128];
    let mut x = x;
    let mut in_c = 64;
    for (i, &w) in widths.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let s = i + 1;
        x = res_block(b, &format!("s{s}b1"), &x, in_c, w, stride, true, normed);
        x = res_block(b, &format!("s{s}b2"), &x, w, w, 1, false, normed);
        in_c = w;
    }
    let head = b.conv("head", &x, 128, spec.output_dim, 1, 1);
    b.output(&head);
}

fn build_update(b: &mut Builder, spec: &ZooSpec) {
    let res = spec.input_resolution;
    let corr = b.input("corr", 196, res);
    let flow = b.input("flow", 4, res);
    let ctx = b.input("ctx", 256, res);

    let c = conv_unit(b, "corr1", &corr, 196, 128, 1, 1, false);
    let c = conv_unit(b, "corr2", &c, 128, 128, 3, 1, false);
    let c = conv_unit(b, "corr3", &c, 128, 96, 3, 1, false);

    let f = conv_unit(b, "flow1", &flow, 4, 64, 7, 1, false);
    let f = conv_unit(b, "flow2", &f, 64, 64, 3, 1, false);
    let f = conv_unit(b, "flow3", &f, 64, 64, 3, 1, false);

    let m = b.concat("motion", &[&c, &f]);
    let m = conv_unit(b, "fuse", &m, 160, 128, 3, 1, false);

    let h0 = b.conv("ctx_init", &ctx, 256, 128, 1, 1);
    let h0 = b.tanh("ctx_init.tanh", &h0);

    let h = b.gru("gru", &h0, &m, 128, 128, 3);

    let r = conv_unit(b, "rev1", &h, 128, 128, 3, 1, false);
    let r = conv_unit(b, "rev2", &r, 128, 64, 3, 1, false);
    let r = b.conv("rev3", &r, 64, spec.output_dim, 3, 1);
    b.output(&r);

    let w = conv_unit(b, "conf1", &h, 128, 128, 3, 1, false);
    let w = conv_unit(b, "conf2", &w, 128, 64, 3, 1, false);
    let w = b.conv("conf3", &w, 64, spec.output_dim, 3, 1);
    let w = b.sigmoid("conf3.sigmoid", &w);
    b.output(&w);

    let d = conv_unit(b, "damp1", &h, 128, 64, 3, 1, false);
    let d = b.conv("damp2", &d, 64, spec.output_dim, 3, 1);
    let d = b.sigmoid("damp2.sigmoid", &d);
    b.output(&d);
}

fn build_toy_residual(b: &mut Builder, spec: &ZooSpec, (w1, w2): (usize, usize)) {
    let x = b.input("image", 3, spec.input_resolution);
    let x = conv_unit(b, "stem", &x, 3, w1, 3, 1, false);
    let x = res_block(b, "b1", &x, w1, w1, 1, true, false);
    let x = conv_unit(b, "down", &x, w1, w2, 3, 2, false);
    let x = res_block(b, "b2", &x, w2, w2, 1, true, false);
    let head = b.conv("head", &x, w2, spec.output_dim, 1, 1);
    b.output(&head);
}

fn build_toy_gru(b: &mut Builder, spec: &ZooSpec) {
    let res = spec.input_resolution;
    let x = b.input("image", 3, res);
    let ctx = b.input("ctx", 4, res);
    let e = conv_unit(b, "enc", &x, 3, 5, 3, 1, false);
    let h0 = b.conv("ctx_init", &ctx, 4, 6, 1, 1);
    let h0 = b.tanh("ctx_init.tanh", &h0);
    let h = b.gru("gru", &h0, &e, 6, 5, 3);
    let head = b.conv("head", &h, 6, spec.output_dim, 3, 1);
    b.output(&head);
}
