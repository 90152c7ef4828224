//! Crate-wide error type.
//!
//! One enum instead of per-module error types: most failures cross module
//! boundaries anyway (a probe failure surfaces through the pruning driver,
//! a dtype mismatch through the executor), and callers almost always want
//! the message plus a stable variant to match on.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype mismatch: {0}")]
    DtypeMismatch(String),

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("unknown node or input `{0}`")]
    UnknownNode(String),

    #[error("resolution incompatible with stride chain: {0}")]
    BadResolution(String),

    #[error("tape replay mismatch: graph changed between forward and backward")]
    TapeMismatch,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error("invalid pruning plan: {0}")]
    InvalidPlan(String),

    #[error("fine-tuning diverged at step {step} (loss = {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("pruning stage {index} failed: {source}")]
    Stage {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("quantization error: {0}")]
    Quantization(String),

    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    #[error("trajectory parse error at line {line}: {msg}")]
    TrajectoryParse { line: usize, msg: String },

    #[error("bad magic: not a model file")]
    BadMagic,

    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated model file: {0}")]
    Truncated(String),

    #[error("tensor payload overlap in model file: {0}")]
    OffsetOverlap(String),

    #[error("model file corrupt: {0}")]
    Corrupt(String),

    #[error("forward-output digest mismatch (stored {stored:#018x}, recomputed {actual:#018x})")]
    DigestMismatch { stored: u64, actual: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
