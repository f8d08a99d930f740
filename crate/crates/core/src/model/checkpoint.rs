//! Binary checkpoint container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        4 bytes  "CASM"
//! version      u32      1
//! n_layers     u32
//! d_model      u32
//! n_heads      u32
//! d_mlp        u32
//! vocab_size   u32
//! max_seq      u32
//! seed         u64
//! weights      f32 × N  row-major blocks:
//!     tok_embed [vocab × d], pos_embed [max_seq × d],
//!     per layer: ln1.gain [d], ln1.bias [d], W_q [d × d], W_k, W_v, W_o,
//!                ln2.gain [d], ln2.bias [d], W_1 [d_mlp × d], b_1 [d_mlp],
//!                W_2 [d × d_mlp], b_2 [d],
//!     ln_f.gain [d], ln_f.bias [d], unembed [vocab × d], unembed_bias [vocab]
//! ```
//!
//! Matrices are stored output-major (row `i` produces output `i`).

use std::io::{Read, Write};
use std::path::Path;

use super::transformer::{Block, LayerNorm, Transformer};
use super::{ModelConfig, ModelError};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 4] = b"CASM";
pub const VERSION: u32 = 1;

impl Transformer<f32> {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let c = &self.config;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for v in [c.n_layers, c.d_model, c.n_heads, c.d_mlp, c.vocab_size, c.max_seq] {
            let v = u32::try_from(v).map_err(|_| ModelError::ConfigInvalid("dimension exceeds u32".into()))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        let mut buf = Vec::new();
        self.for_each_block(|block| {
            for v in block {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(ModelError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 6];
        for d in &mut dims {
            *d = read_u32(&mut r)? as usize;
        }
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed).map_err(truncated)?;
        let config = ModelConfig {
            n_layers: dims[0],
            d_model: dims[1],
            n_heads: dims[2],
            d_mlp: dims[3],
            vocab_size: dims[4],
            max_seq: dims[5],
            seed: u64::from_le_bytes(seed),
        };
        config.validate()?;
        let (d, v, m) = (config.d_model, config.vocab_size, config.d_mlp);
        let mut reader = BlockReader { r: &mut r };
        let tok_embed = reader.matrix(v, d)?;
        let pos_embed = reader.matrix(config.max_seq, d)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1: reader.norm(d)?,
                wq: reader.matrix(d, d)?,
                wk: reader.matrix(d, d)?,
                wv: reader.matrix(d, d)?,
                wo: reader.matrix(d, d)?,
                ln2: reader.norm(d)?,
                w1: reader.matrix(m, d)?,
                b1: reader.vec(m)?,
                w2: reader.matrix(d, m)?,
                b2: reader.vec(d)?,
            });
        }
        let ln_f = reader.norm(d)?;
        let unembed = reader.matrix(v, d)?;
        let unembed_bias = reader.vec(v)?;
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(ModelError::Checkpoint("trailing bytes after weights".into()));
        }
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            blocks,
            ln_f,
            unembed,
            unembed_bias,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn truncated(e: std::io::Error) -> ModelError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ModelError::Checkpoint("truncated checkpoint".into())
    } else {
        ModelError::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

struct BlockReader<'a, R: Read> {
    r: &'a mut R,
}

impl<R: Read> BlockReader<'_, R> {
    fn vec(&mut self, n: usize) -> Result<Vec<f32>, ModelError> {
        let mut bytes = vec![0u8; n * 4];
        self.r.read_exact(&mut bytes).map_err(truncated)?;
        let out: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Checkpoint("non-finite weight".into()));
        }
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix<f32>, ModelError> {
        Ok(Matrix::from_vec(rows, cols, self.vec(rows * cols)?)?)
    }

    fn norm(&mut self, d: usize) -> Result<LayerNorm<f32>, ModelError> {
        Ok(LayerNorm {
            gain: self.vec(d)?,
            bias: self.vec(d)?,
        })
    }
}
