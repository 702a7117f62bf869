//! Lightweight cross-modal alignment transformer trained contrastively on
//! frozen encoder outputs.
//!
//! The model reads `[CLS | visual | textual]`, where each visual row is a
//! projected patch (or one pooled image vector for the global variant) and
//! each textual row a projected token, runs pre-norm transformer blocks with
//! masked self-attention and maps the final CLS state to a scalar score.
//! Everything is generic over `f32` (training) and `f64` (reference checks),
//! and gradients are derived by hand.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod scorer;
pub mod train;

use std::fmt::Debug;

use compose_probe_core::embedding::EmbedError;
use num_traits::Float;
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CKP1_MAGIC};
pub use config::{TransformerConfig, Variant};
pub use data::{synthetic_pairs, Batch, PairItem, Seq};
pub use loss::{batch_accuracy, contrastive_loss, contrastive_loss_grad, LossGrad};
pub use model::{forward, score_matrix};
pub use optim::{adamw_step, cosine_schedule, AdamWConfig, AdamWState};
pub use params::{config_param_count, param_count, Layout, Params, TensorSpec};
pub use scorer::{pairs_from_instances, TransformerScorer};
pub use train::{grad, history_csv, train, validation_accuracy, GradOutput, HistoryRow, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient in {tensor}")]
    NonFiniteGradient { tensor: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("format error: {0}")]
    Format(String),
}

/// Floating-point type the model runs in.
pub trait Scalar: Float + Send + Sync + Debug + Default + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn f64(self) -> f64 {
        self
    }
}
