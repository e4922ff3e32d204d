//! A small INT8 inference engine with LogClip activations and early exits.
//!
//! Models are trained in `f32` ([`model`], [`train`]), post-training
//! quantized and serialized into an [`engine::EngineImage`]. The image bytes
//! are the injection target: inference always runs on whatever those bytes
//! currently say, so weight corruption propagates silently while a broken
//! header or layer table shows up as a parse error.

pub mod activation;
pub mod data;
pub mod engine;
pub mod exit;
pub mod metrics;
pub mod model;
pub mod quant;
pub mod suite;
pub mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use activation::{logclip, relu_clip, ActivationKind, ActivationSpec};
pub use engine::{EngineImage, EngineModel, ParseError};
pub use exit::{should_exit_classifier, should_exit_detector, Detection, DetectionSet, ExitPolicy};
pub use model::{LayerKind, LayerSpec, Model, ModelSpec};
pub use quant::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    Detection,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Detection => "detection",
        })
    }
}

/// (channels, height, width)
pub type Shape = (usize, usize, usize);

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f32 },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset manifest: {0}")]
    Json(#[from] serde_json::Error),
}
