//! Goal-conditioned dialogue modeling on a self-contained reverse-mode
//! autodiff core.
//!
//! The crate is generic over the float type through [`scalar::Scalar`]:
//! `f32` is the training precision, `f64` backs gradient verification.

pub mod adam;
pub mod checkpoint;
pub mod corpus;
pub mod generation;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;

use thiserror::Error;

/// Training-precision scalar.
pub type TrainScalar = f32;
/// Verification-precision scalar.
pub type CheckScalar = f64;

/// Graph built at training precision.
pub type TrainGraph = graph::Graph<TrainScalar>;
/// Parameter store at training precision.
pub type TrainParams = params::Params<TrainScalar>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{path}:{line}: {msg}")]
    Record {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("dialogue {id}: {msg}")]
    Dialogue { id: String, msg: String },
    #[error("schema: {0}")]
    Schema(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("config: {0}")]
    Config(String),
    #[error("gradient check: {0}")]
    GradCheck(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
