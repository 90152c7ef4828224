//! Gradient-based fine-tuning on deterministic synthetic regression tasks.
//!
//! Fine-tuning recovers accuracy after each pruning round. Tasks are small
//! dense-prediction regressions (a blurred-flow target or a downsampled
//! identity target) so that damage and recovery are measurable in seconds
//! on a CPU; step counts and learning rates are configurable for longer
//! runs.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::engine;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tensor::{DType, Tensor};

/// Loss functions available to [`finetune`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
}

/// Optimizers available to [`finetune`]. Momentum uses the conventional 0.9.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
}

pub const MOMENTUM: f32 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 200,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            batch_size: 2,
            seed: 0,
            loss: LossKind::Mse,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Target functions for [`SyntheticTask`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Target = channel-tiled adaptive average pool of the first input,
    /// followed by a 3×3 box blur. Suits same-resolution flow-style heads.
    BlurFlow,
    /// Target = channel-tiled adaptive average pool only. Suits strided
    /// encoders whose outputs live at a fraction of the input resolution.
    DownsampleIdentity,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::BlurFlow => "blur-flow",
            TaskKind::DownsampleIdentity => "downsample-identity",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blur-flow" => Ok(TaskKind::BlurFlow),
            "downsample-identity" => Ok(TaskKind::DownsampleIdentity),
            other => Err(Error::InvalidConfig(format!(
                "unknown task kind `{other}` (expected blur-flow or downsample-identity)"
            ))),
        }
    }
}

/// A fixed, seeded regression dataset derived from a graph's own input and
/// output shapes. Regenerating with the same seed yields identical samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    /// Spatial size (H, W) the samples are drawn at.
    pub resolution: (usize, usize),
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// Desk-scale default: 4 samples at 16×16.
    pub fn desk(kind: TaskKind, seed: u64) -> Self {
        SyntheticTask {
            kind,
            resolution: (16, 16),
            samples: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidConfig("task needs at least one sample".into()));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 {
            return Err(Error::InvalidConfig("task resolution must be non-zero".into()));
        }
        Ok(())
    }

    /// Materializes the full sample set, grouped into batches of up to
    /// `batch_size`. Sample values are independent of the grouping, so any
    /// batch size sees the same dataset.
    pub fn sample_batches(&self, graph: &ModelGraph, batch_size: usize) -> Result<Vec<TaskBatch>> {
        self.validate()?;
        if batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be ≥ 1".into()));
        }
        let shapes = graph.infer_shapes_with_resolution(self.resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut singles: Vec<(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)> = Vec::new();
        for _ in 0..self.samples {
            let mut inputs = BTreeMap::new();
            for gi in &graph.inputs {
                let numel = gi.channels * self.resolution.0 * self.resolution.1;
                let data: Vec<f32> = (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect();
                let t = Tensor::from_f32(
                    vec![1, gi.channels, self.resolution.0, self.resolution.1],
                    data,
                )?;
                inputs.insert(gi.name.clone(), t);
            }
            let base = graph
                .inputs
                .first()
                .ok_or_else(|| Error::InvalidGraph("task needs a graph with inputs".into()))?;
            let base_plane = &inputs[&base.name];
            let mut targets = BTreeMap::new();
            for out in &graph.outputs {
                let (c, h, w) = *shapes
                    .get(out)
                    .ok_or_else(|| Error::UnknownNode(out.clone()))?;
                targets.insert(out.clone(), self.target_for(base_plane, c, h, w)?);
            }
            singles.push((inputs, targets));
        }
        let mut batches = Vec::new();
        for chunk in singles.chunks(batch_size) {
            batches.push(stack_samples(chunk)?);
        }
        Ok(batches)
    }

    /// Builds one target tensor of shape (1, c, h, w): adaptive-average-pool
    /// the base input to (h, w), tile its channels to width c, and blur for
    /// the blur-flow task.
    fn target_for(&self, base: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
        let src = base.as_f32()?;
        let (src_c, src_h, src_w) = (base.shape()[1], base.shape()[2], base.shape()[3]);
        let mut pooled = vec![0.0f32; src_c * h * w];
        for ch in 0..src_c {
            let plane = &src[ch * src_h * src_w..(ch + 1) * src_h * src_w];
            adaptive_avg_pool(plane, src_h, src_w, h, w, &mut pooled[ch * h * w..(ch + 1) * h * w]);
        }
        let planes: Vec<Vec<f32>> = if self.kind == TaskKind::BlurFlow {
            (0..src_c)
                .map(|ch| box_blur3(&pooled[ch * h * w..(ch + 1) * h * w], h, w))
                .collect()
        } else {
            (0..src_c)
                .map(|ch| pooled[ch * h * w..(ch + 1) * h * w].to_vec())
                .collect()
        };
        let mut data = vec![0.0f32; c * h * w];
        for ch in 0..c {
            data[ch * h * w..(ch + 1) * h * w].copy_from_slice(&planes[ch % src_c]);
        }
        Tensor::from_f32(vec![1, c, h, w], data)
    }
}

/// One batch of inputs and matching per-output regression targets.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub inputs: BTreeMap<String, Tensor>,
    pub targets: BTreeMap<String, Tensor>,
}

fn stack_samples(chunk: &[(BTreeMap<String, Tensor>, BTreeMap<String, Tensor>)]) -> Result<TaskBatch> {
    let mut inputs = BTreeMap::new();
    let mut targets = BTreeMap::new();
    let first = &chunk[0];
    for key in first.0.keys() {
        let parts: Vec<&Tensor> = chunk.iter().map(|(i, _)| &i[key]).collect();
        inputs.insert(key.clone(), stack_batch(&parts)?);
    }
    for key in first.1.keys() {
        let parts: Vec<&Tensor> = chunk.iter().map(|(_, t)| &t[key]).collect();
        targets.insert(key.clone(), stack_batch(&parts)?);
    }
    Ok(TaskBatch { inputs, targets })
}

fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
    let inner = &parts[0].shape()[1..];
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(inner);
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
    for t in parts {
        data.extend_from_slice(t.as_f32()?);
    }
    Tensor::from_f32(shape, data)
}

/// PyTorch-style adaptive average pooling of one plane.
fn adaptive_avg_pool(src: &[f32], sh: usize, sw: usize, dh: usize, dw: usize, dst: &mut [f32]) {
    for i in 0..dh {
        let r0 = i * sh / dh;
        let r1 = ((i + 1) * sh).div_ceil(dh);
        for j in 0..dw {
            let c0 = j * sw / dw;
            let c1 = ((j + 1) * sw).div_ceil(dw);
            let mut acc = 0.0f64;
            for r in r0..r1 {
                for c in c0..c1 {
                    acc += f64::from(src[r * sw + c]);
                }
            }
            dst[i * dw + j] = (acc / ((r1 - r0) * (c1 - c0)) as f64) as f32;
        }
    }
}

/// 3×3 box blur with zero padding and constant 1/9 normalization.
fn box_blur3(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0f64;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    let r = i as i64 + di;
                    let c = j as i64 + dj;
                    if r >= 0 && r < h as i64 && c >= 0 && c < w as i64 {
                        acc += f64::from(src[(r as usize) * w + c as usize]);
                    }
                }
            }
            out[i * w + j] = (acc / 9.0) as f32;
        }
    }
    out
}

/// MSE across all outputs: mean over output tensors of the elementwise mean
/// squared error. Returns the loss and the per-output gradient dL/dy.
fn mse_loss(
    outputs: &BTreeMap<String, Tensor>,
    targets: &BTreeMap<String, Tensor>,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let n_outputs = outputs.len() as f64;
    let mut loss = 0.0f64;
    let mut grads = BTreeMap::new();
    for (id, y) in outputs {
        let t = targets
            .get(id)
            .ok_or_else(|| Error::Evaluation(format!("no target for output `{id}`")))?;
        if y.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "output `{id}` is {:?} but target is {:?}",
                y.shape(),
                t.shape()
            )));
        }
        let ys = y.as_f32()?;
        let ts = t.as_f32()?;
        let numel = ys.len() as f64;
        let mut g = vec![0.0f32; ys.len()];
        let mut acc = 0.0f64;
        for ((gi, &yi), &ti) in g.iter_mut().zip(ys).zip(ts) {
            let d = f64::from(yi) - f64::from(ti);
            acc += d * d;
            *gi = (2.0 * d / (numel * n_outputs)) as f32;
        }
        loss += acc / numel;
        grads.insert(id.clone(), Tensor::from_f32(y.shape().to_vec(), g)?);
    }
    Ok((loss / n_outputs, grads))
}

/// Computes the task loss of a graph without updating it.
pub fn task_loss(graph: &ModelGraph, task: &SyntheticTask, batch_size: usize) -> Result<f64> {
    let batches = task.sample_batches(graph, batch_size)?;
    let mut total = 0.0f64;
    for batch in &batches {
        let outputs = engine::forward(graph, &batch.inputs)?;
        let (loss, _) = mse_loss(&outputs, &batch.targets)?;
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Runs `cfg.steps` SGD steps of the task on a copy of the graph, cycling
/// through the task's batches in order. Returns the updated graph and the
/// per-step loss trace; `steps = 0` returns the graph bit-exactly unchanged.
pub fn finetune(
    graph: &ModelGraph,
    task: &SyntheticTask,
    cfg: &FinetuneConfig,
) -> Result<(ModelGraph, Vec<f64>)> {
    cfg.validate()?;
    if graph.precision() != crate::graph::Precision::Fp32 {
        return Err(Error::InvalidConfig(
            "fine-tuning requires an fp32 graph".into(),
        ));
    }
    let mut tuned = graph.clone();
    if cfg.steps == 0 {
        return Ok((tuned, Vec::new()));
    }
    let batches = task.sample_batches(&tuned, cfg.batch_size)?;
    let lr = cfg.learning_rate as f32;
    let mut velocity: BTreeMap<(String, String), Vec<f32>> = BTreeMap::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = &batches[step % batches.len()];
        let (outputs, tape) = engine::forward_recorded(&tuned, &batch.inputs)?;
        let (loss, out_grads) = match cfg.loss {
            LossKind::Mse => mse_loss(&outputs, &batch.targets)?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
        let grads = engine::backward(&tuned, &tape, &out_grads)?;
        for ((node_id, pname), g) in &grads {
            let node = tuned
                .nodes
                .iter_mut()
                .find(|n| n.id == *node_id)
                .ok_or_else(|| Error::UnknownNode(node_id.clone()))?;
            let param = node
                .params
                .get_mut(pname)
                .ok_or_else(|| Error::UnknownNode(format!("{node_id}.{pname}")))?;
            debug_assert_eq!(param.dtype(), DType::F32);
            let pv = param.as_f32_mut()?;
            let gv = g.as_f32()?;
            match cfg.optimizer {
                OptimizerKind::Sgd => {
                    for (p, &gr) in pv.iter_mut().zip(gv) {
                        *p -= lr * gr;
                    }
                }
                OptimizerKind::SgdMomentum => {
                    let v = velocity
                        .entry((node_id.clone(), pname.clone()))
                        .or_insert_with(|| vec![0.0f32; gv.len()]);
                    for ((p, vi), &gr) in pv.iter_mut().zip(v.iter_mut()).zip(gv) {
                        *vi = MOMENTUM * *vi + gr;
                        *p -= lr * *vi;
                    }
                }
            }
        }
    }
    Ok((tuned, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphInput, LayerKind, LayerNode, ModelGraph};
    use crate::zoo;

    fn toy(name: &str) -> ModelGraph {
        zoo::build(&zoo::ZooSpec::preset(name).unwrap()).unwrap()
    }

    fn one_conv_graph(weight: f32) -> ModelGraph {
        let mut params = BTreeMap::new();
        params.insert(
            "weight".to_string(),
            Tensor::from_f32(vec![2, 2, 1, 1], vec![weight, 0.0, 0.0, weight]).unwrap(),
        );
        params.insert("bias".to_string(), Tensor::from_f32(vec![2], vec![0.0, 0.0]).unwrap());
        ModelGraph {
            name: "one-conv".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                channels: 2,
                height: 8,
                width: 8,
            }],
            nodes: vec![LayerNode {
                id: "conv".into(),
                kind: LayerKind::Conv2d(ConvAttrs {
                    in_channels: 2,
                    out_channels: 2,
                    kernel: (1, 1),
                    stride: (1, 1),
                    padding: (0, 0),
                    bias: true,
                }),
                inputs: vec!["x".into()],
                params,
            }],
            outputs: vec!["conv".into()],
            quant: None,
        }
    }

    #[test]
    fn zero_steps_is_bit_exact_noop() {
        let g = toy("toy-residual");
        let task = SyntheticTask::desk(TaskKind::DownsampleIdentity, 7);
        let cfg = FinetuneConfig {
            steps: 0,
            ..FinetuneConfig::default()
        };
        let (tuned, trace) = finetune(&g, &task, &cfg).unwrap();
        assert!(trace.is_empty());
        assert_eq!(tuned, g);
    }

    #[test]
    fn task_regeneration_is_identical() {
        let g = toy("toy-residual");
        let task = SyntheticTask::desk(TaskKind::BlurFlow, 3);
        let a = task.sample_batches(&g, 2).unwrap();
        let b = task.sample_batches(&g, 2).unwrap();
        assert_eq!(a.len(), b.len());
        for (ba, bb) in a.iter().zip(&b) {
            for (k, t) in &ba.inputs {
                assert_eq!(t.as_f32().unwrap(), bb.inputs[k].as_f32().unwrap());
            }
            for (k, t) in &ba.targets {
                assert_eq!(t.as_f32().unwrap(), bb.targets[k].as_f32().unwrap());
            }
        }
    }

    #[test]
    fn batching_does_not_change_the_sample_set() {
        let g = toy("toy-residual");
        let task = SyntheticTask::desk(TaskKind::DownsampleIdentity, 11);
        let all = task.sample_batches(&g, 4).unwrap();
        let split = task.sample_batches(&g, 1).unwrap();
        assert_eq!(all.len(), 1);
        assert_eq!(split.len(), 4);
        let joined: Vec<f32> = split
            .iter()
            .flat_map(|b| b.inputs["image"].as_f32().unwrap().to_vec())
            .collect();
        assert_eq!(all[0].inputs["image"].as_f32().unwrap(), &joined[..]);
    }

    /// A 1×1 identity-structured conv fitting target = 2×input is convex
    /// least-squares with an exact optimum; 200 SGD steps must reduce the
    /// loss below 1% of its initial value.
    #[test]
    fn linear_fit_converges() {
        let g = one_conv_graph(1.0);
        // Target 2×input: the blur/downsample tasks don't express this, so
        // drive the loop directly through a custom batch set.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..2 * 2 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_f32(vec![2, 2, 8, 8], data.clone()).unwrap();
        let t = Tensor::from_f32(vec![2, 2, 8, 8], data.iter().map(|v| 2.0 * v).collect()).unwrap();
        let mut inputs = BTreeMap::new();
        inputs.insert("x".to_string(), x);
        let mut targets = BTreeMap::new();
        targets.insert("conv".to_string(), t);

        let mut tuned = g;
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let (outputs, tape) = engine::forward_recorded(&tuned, &inputs).unwrap();
            let (loss, out_grads) = mse_loss(&outputs, &targets).unwrap();
            first.get_or_insert(loss);
            last = loss;
            let grads = engine::backward(&tuned, &tape, &out_grads).unwrap();
            for ((nid, pname), gt) in &grads {
                let node = tuned.nodes.iter_mut().find(|n| n.id == *nid).unwrap();
                let pv = node.params.get_mut(pname).unwrap().as_f32_mut().unwrap();
                for (p, &gr) in pv.iter_mut().zip(gt.as_f32().unwrap()) {
                    *p -= 0.5 * gr;
                }
            }
        }
        assert!(last < 0.01 * first.unwrap(), "last {last} vs first {first:?}");
    }

    #[test]
    fn finetune_reduces_smoothed_loss() {
        let g = toy("toy-residual");
        let task = SyntheticTask::desk(TaskKind::DownsampleIdentity, 5);
        let cfg = FinetuneConfig::default();
        let (_, trace) = finetune(&g, &task, &cfg).unwrap();
        assert_eq!(trace.len(), cfg.steps);
        let window = 20.min(trace.len());
        let head: f64 = trace[..window].iter().sum::<f64>() / window as f64;
        let tail: f64 = trace[trace.len() - window..].iter().sum::<f64>() / window as f64;
        assert!(
            tail <= head,
            "smoothed loss should not increase: head {head}, tail {tail}"
        );
    }

    #[test]
    fn identical_runs_produce_identical_traces() {
        let g = toy("toy-gru");
        let task = SyntheticTask::desk(TaskKind::BlurFlow, 9);
        let cfg = FinetuneConfig {
            steps: 20,
            optimizer: OptimizerKind::SgdMomentum,
            ..FinetuneConfig::default()
        };
        let (ga, ta) = finetune(&g, &task, &cfg).unwrap();
        let (gb, tb) = finetune(&g, &task, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn divergence_reports_step_index() {
        // A NaN parameter poisons the first forward pass, so the non-finite
        // loss must surface as a divergence at step 0.
        let g = one_conv_graph(f32::NAN);
        let task = SyntheticTask {
            kind: TaskKind::DownsampleIdentity,
            resolution: (8, 8),
            samples: 1,
            seed: 0,
        };
        let err = finetune(&g, &task, &FinetuneConfig::default()).unwrap_err();
        match err {
            Error::Diverged { step, .. } => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
