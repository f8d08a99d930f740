//! Deterministic toy decoder with a continuous image-prefix channel and an
//! MLP-output hook bus.

mod checkpoint;
mod config;
mod session;
mod transformer;

pub use checkpoint::{MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use session::{
    argmax, forward, generate_greedy, generate_greedy_timed, ForwardTrace, GenerationTrace, HookSite, MlpHook, NoHook,
    ResidualInjector, Session, SiteKind, StepInput,
};
pub use transformer::{TokenId, Transformer};

use thiserror::Error;

use crate::linalg::LinalgError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("position {position} is outside a sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("sequence of length {needed} exceeds max_seq {max_seq}")]
    LengthOverflow { needed: usize, max_seq: usize },
    #[error("layer {layer} is outside 0..{n_layers}")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfVocab(u32),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("prefix embedding contains a non-finite value")]
    NonFinitePrefix,
    #[error("generation needs at least one prefix row or prompt token")]
    EmptyInput,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ModelError {
    /// `ZeroVector` from a degenerate plant direction.
    pub fn is_zero_vector(&self) -> bool {
        matches!(self, ModelError::Linalg(LinalgError::ZeroVector))
    }
}
