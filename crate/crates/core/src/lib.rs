//! Context-preference activation steering.
//!
//! Two steering directions are extracted from conflict samples by per-layer
//! ridge regression of a first-token logit preference on MLP outputs, then
//! added back as a signed, position-gated residual at a window of MLP layers
//! during greedy decoding. A deterministic toy decoder stands in for a real
//! multimodal model.
//!
//! The numeric core is generic over [`Scalar`]; the aliases below fix the
//! precisions used by the pipeline (32-bit model, 64-bit regression).

pub mod calibration;
pub mod corpus;
pub mod extraction;
mod jsonl;
pub mod linalg;
pub mod metrics;
pub mod model;
mod scalar;
pub mod steering;
pub mod tokenizer;

pub use scalar::Scalar;

/// Regression-side dense vector.
pub type DenseVector = linalg::Vector<f64>;
/// One row per retained sample.
pub type DesignMatrix = linalg::Matrix<f64>;
pub type RidgeSolution = linalg::RidgeSolution<f64>;
/// The toy decoder at its working precision.
pub type Model = model::Transformer<f32>;
/// Image prefix rows fed to [`Model`].
pub type PrefixEmbedding = linalg::Matrix<f32>;
pub type ForwardTrace = model::ForwardTrace<f32>;
pub type GenerationTrace = model::GenerationTrace<f32>;

/// Lowercase hex SHA-256 of `bytes`; used for manifests and provenance fields.
pub fn content_hash(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
