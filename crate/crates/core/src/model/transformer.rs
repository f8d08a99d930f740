//! Weights, seeded initialization and the single-position block math.
//!
//! Initialization draws from ChaCha8 seeded with `config.seed`, in this order:
//!
//! 1. output codes `C` (`vocab × d`, standard normal); the unembedding is
//!    initialized to `C` and stored as its own parameter block.
//! 2. input embedding `E = G − 0.5·C` with `G` standard normal, so a token
//!    already present in the context inhibits its own prediction.
//! 3. learned positions, normal with std 0.02.
//! 4. per layer: `W_q`, `W_k` normal with std `1/√d`; `W_v` a random
//!    orthogonal matrix and `W_o = W_vᵀ`, so attention copies normalized
//!    context content; `W_1` std `1/√d`; `W_2` std `0.5/√d_mlp`.
//!
//! Norm gains start at one and every bias at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ModelError};
use crate::linalg::{Matrix, Vector};
use crate::Scalar;

pub type TokenId = u32;

const LN_EPS: f64 = 1e-5;
const SELF_INHIBITION: f64 = 0.5;
const POS_STD: f64 = 0.02;
const MLP_OUT_GAIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm<S: Scalar> {
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![S::one(); d],
            bias: vec![S::zero(); d],
        }
    }

    pub fn apply(&self, x: &[S], out: &mut [S]) {
        let n = S::from_usize(x.len()).expect("width fits the scalar type");
        let mean = x.iter().copied().sum::<S>() / n;
        let mut var = S::zero();
        for v in x {
            let c = *v - mean;
            var += c * c;
        }
        var /= n;
        let inv = S::one() / (var + S::from_f64_lossy(LN_EPS)).sqrt();
        for i in 0..x.len() {
            out[i] = (x[i] - mean) * inv * self.gain[i] + self.bias[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block<S: Scalar> {
    pub ln1: LayerNorm<S>,
    pub wq: Matrix<S>,
    pub wk: Matrix<S>,
    pub wv: Matrix<S>,
    pub wo: Matrix<S>,
    pub ln2: LayerNorm<S>,
    pub w1: Matrix<S>,
    pub b1: Vec<S>,
    pub w2: Matrix<S>,
    /// MLP output bias; planted offsets accumulate here.
    pub b2: Vec<S>,
}

/// Pre-norm decoder-only transformer with learned positions and an untied
/// unembedding. Immutable once built; generation state lives in a
/// [`Session`](super::Session).
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<S: Scalar> {
    pub(crate) config: ModelConfig,
    pub(crate) tok_embed: Matrix<S>,
    pub(crate) pos_embed: Matrix<S>,
    pub(crate) blocks: Vec<Block<S>>,
    pub(crate) ln_f: LayerNorm<S>,
    pub(crate) unembed: Matrix<S>,
    pub(crate) unembed_bias: Vec<S>,
}

fn normal_matrix<S: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix<S> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::from_f64_lossy(z * std)
        })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent")
}

impl<S: Scalar> Transformer<S> {
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let ModelConfig {
            n_layers,
            d_model: d,
            d_mlp,
            vocab_size: v,
            max_seq,
            seed,
            ..
        } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let codes: Matrix<S> = normal_matrix(&mut rng, v, d, 1.0);
        let mut tok_embed: Matrix<S> = normal_matrix(&mut rng, v, d, 1.0);
        let k = S::from_f64_lossy(SELF_INHIBITION);
        for i in 0..v {
            for (e, c) in tok_embed.row_mut(i).iter_mut().zip(codes.row(i)) {
                *e -= k * *c;
            }
        }
        let pos_embed = normal_matrix(&mut rng, max_seq, d, POS_STD);

        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let wq = normal_matrix(&mut rng, d, d, inv_sqrt_d);
            let wk = normal_matrix(&mut rng, d, d, inv_sqrt_d);
            let mut wv = normal_matrix(&mut rng, d, d, 1.0);
            wv.orthonormalize_rows()
                .map_err(|e| ModelError::ConfigInvalid(format!("orthogonal init failed: {e}")))?;
            let wo = wv.transpose();
            let w1 = normal_matrix(&mut rng, d_mlp, d, inv_sqrt_d);
            let w2 = normal_matrix(&mut rng, d, d_mlp, MLP_OUT_GAIN / (d_mlp as f64).sqrt());
            blocks.push(Block {
                ln1: LayerNorm::identity(d),
                wq,
                wk,
                wv,
                wo,
                ln2: LayerNorm::identity(d),
                w1,
                b1: vec![S::zero(); d_mlp],
                w2,
                b2: vec![S::zero(); d],
            });
        }

        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            ln_f: LayerNorm::identity(d),
            unembed: codes,
            unembed_bias: vec![S::zero(); v],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    /// Unit-norm output code of a token: the direction in the final residual
    /// stream that most raises its logit. Synthetic image prefixes are built
    /// from these.
    pub fn token_code(&self, token: TokenId) -> Result<Vector<S>, ModelError> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfVocab(token));
        }
        Vector::new(self.unembed.row(t).to_vec())?
            .normalized()
            .map_err(ModelError::from)
    }

    /// Return a model whose MLP output at `layer` is shifted by
    /// `magnitude · direction/‖direction‖` at every position.
    pub fn plant_bias(&self, layer: usize, direction: &Vector<S>, magnitude: S) -> Result<Self, ModelError> {
        if layer >= self.config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        if direction.dim() != self.config.d_model {
            return Err(ModelError::DimMismatch {
                expected: self.config.d_model,
                got: direction.dim(),
            });
        }
        let unit = direction.normalized()?;
        let mut planted = self.clone();
        for (b, u) in planted.blocks[layer].b2.iter_mut().zip(unit.iter()) {
            *b += magnitude * *u;
        }
        Ok(planted)
    }

    /// SHA-256 over every parameter in checkpoint order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.for_each_block(|block| {
            for v in block {
                h.update(v.to_f64_lossy().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    /// Visit parameter blocks in the documented checkpoint order.
    pub(crate) fn for_each_block(&self, mut f: impl FnMut(&[S])) {
        f(self.tok_embed.as_slice());
        f(self.pos_embed.as_slice());
        for b in &self.blocks {
            f(&b.ln1.gain);
            f(&b.ln1.bias);
            f(b.wq.as_slice());
            f(b.wk.as_slice());
            f(b.wv.as_slice());
            f(b.wo.as_slice());
            f(&b.ln2.gain);
            f(&b.ln2.bias);
            f(b.w1.as_slice());
            f(&b.b1);
            f(b.w2.as_slice());
            f(&b.b2);
        }
        f(&self.ln_f.gain);
        f(&self.ln_f.bias);
        f(self.unembed.as_slice());
        f(&self.unembed_bias);
    }

    pub(crate) fn embed_token(&self, token: TokenId, position: usize, out: &mut [S]) -> Result<(), ModelError> {
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfVocab(token));
        }
        for ((o, e), p) in out
            .iter_mut()
            .zip(self.tok_embed.row(t))
            .zip(self.pos_embed.row(position))
        {
            *o = *e + *p;
        }
        Ok(())
    }

    pub(crate) fn embed_vector(&self, vector: &[S], position: usize, out: &mut [S]) {
        for ((o, e), p) in out.iter_mut().zip(vector).zip(self.pos_embed.row(position)) {
            *o = *e + *p;
        }
    }

    /// Logits from the final residual.
    pub(crate) fn logits(&self, residual: &[S], scratch: &mut [S]) -> Vec<S> {
        self.ln_f.apply(residual, scratch);
        (0..self.config.vocab_size)
            .map(|v| super::session::dot(self.unembed.row(v), scratch) + self.unembed_bias[v])
            .collect()
    }
}

pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let half = S::from_f64_lossy(0.5);
    let k = S::from_f64_lossy(0.044715);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}
