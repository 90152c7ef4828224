//! Evaluation interface used by sensitivity probing and the pipeline.
//!
//! An [`Evaluator`] turns a graph into a single non-negative error scalar.
//! Probing fans out over many temporary graph variants, so evaluators also
//! declare whether they may be invoked concurrently.

use crate::engine;
use crate::error::{Error, Result};
use crate::finetune::SyntheticTask;
use crate::graph::{ModelGraph, Precision};
use crate::quantize::{quantized_forward, QuantConfig};

/// Model-quality oracle: lower is better, 0 is perfect.
pub trait Evaluator: Sync {
    /// Stable identifier recorded in sensitivity profiles and reports.
    fn id(&self) -> String;

    /// Deterministic error of the graph on the evaluator's fixed dataset.
    fn evaluate(&self, graph: &ModelGraph) -> Result<f64>;

    /// Whether `evaluate` may be called from several threads at once.
    /// Serial evaluators force the probe scheduler into sequential mode.
    fn concurrent(&self) -> bool {
        true
    }
}

/// RMSE of a graph against a [`SyntheticTask`]'s fixed sample set.
///
/// The error is the mean over graph outputs of the per-output RMSE across
/// all samples. Stateless between calls: the sample set is regenerated from
/// the task seed on every evaluation, which makes the evaluator trivially
/// parallel-safe.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticEvaluator {
    task: SyntheticTask,
}

impl SyntheticEvaluator {
    pub fn new(task: SyntheticTask) -> Self {
        SyntheticEvaluator { task }
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }
}

impl Evaluator for SyntheticEvaluator {
    fn id(&self) -> String {
        format!(
            "synthetic:{}:{}x{}:n{}:seed{}",
            self.task.kind.as_str(),
            self.task.resolution.0,
            self.task.resolution.1,
            self.task.samples,
            self.task.seed
        )
    }

    fn evaluate(&self, graph: &ModelGraph) -> Result<f64> {
        let batches = self.task.sample_batches(graph, self.task.samples.max(1))?;
        let mut per_output_sq: std::collections::BTreeMap<String, (f64, usize)> =
            std::collections::BTreeMap::new();
        for batch in &batches {
            let outputs = match graph.precision() {
                Precision::Fp32 => engine::forward(graph, &batch.inputs)?,
                Precision::Int8 => {
                    quantized_forward(graph, &batch.inputs, &QuantConfig::default())?
                }
            };
            for (id, y) in &outputs {
                let t = batch
                    .targets
                    .get(id)
                    .ok_or_else(|| Error::Evaluation(format!("no target for output `{id}`")))?;
                let ys = y.as_f32()?;
                let ts = t.as_f32()?;
                if ys.len() != ts.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "output `{id}` is {:?} but target is {:?}",
                        y.shape(),
                        t.shape()
                    )));
                }
                let entry = per_output_sq.entry(id.clone()).or_insert((0.0, 0));
                for (&yi, &ti) in ys.iter().zip(ts) {
                    let d = f64::from(yi) - f64::from(ti);
                    entry.0 += d * d;
                }
                entry.1 += ys.len();
            }
        }
        if per_output_sq.is_empty() {
            return Err(Error::Evaluation("graph produced no outputs".into()));
        }
        let mut total = 0.0;
        for (sq, n) in per_output_sq.values() {
            total += (sq / *n as f64).sqrt();
        }
        Ok(total / per_output_sq.len() as f64)
    }
}
