//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (config, tokenizer, parameter names and shapes, RNG state, step),
//! then every parameter as little-endian `f64` in header order.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::encoders::Tokenizer;
use crate::error::{Error, Result};
use crate::model::GkModel;
use crate::params::Param;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"GKVLPCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::CorruptCheckpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub params: Vec<Param>,
    pub rng: RngState,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    tokenizer: Tokenizer,
    tensors: Vec<TensorInfo>,
    rng: RngState,
    step: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &GkModel, rng: &ChaCha8Rng, step: usize) -> Self {
        Self {
            config: config.clone(),
            tokenizer: model.tokenizer.clone(),
            params: model.store.params().to_vec(),
            rng: RngState::capture(rng),
            step,
        }
    }

    pub fn to_model(&self) -> Result<GkModel> {
        GkModel::from_params(
            self.config.encoder.clone(),
            self.config.fusion.clone(),
            self.tokenizer.clone(),
            self.params.clone(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            tensors: self
                .params
                .iter()
                .map(|p| TensorInfo {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                    decay: p.decay,
                })
                .collect(),
            rng: self.rng.clone(),
            step: self.step,
        };
        let json = serde_json::to_vec(&header)?;
        let scalars: usize = self.params.iter().map(|p| p.value.len()).sum();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * scalars);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = || Error::CorruptCheckpoint("file is truncated".into());
        if bytes.len() < 20 {
            return Err(truncated());
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::CorruptCheckpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::IncompatibleCheckpoint {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < header_len {
            return Err(truncated());
        }
        let header: Header = serde_json::from_slice(&body[..header_len])?;
        let data = &body[header_len..];
        let scalars: usize = header.tensors.iter().map(|t| t.rows * t.cols).sum();
        if data.len() != 8 * scalars {
            return Err(if data.len() < 8 * scalars {
                truncated()
            } else {
                Error::CorruptCheckpoint("trailing bytes after tensor data".into())
            });
        }
        let mut values = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let params = header
            .tensors
            .into_iter()
            .map(|t| Param {
                value: Matrix::from_vec(t.rows, t.cols, values.by_ref().take(t.rows * t.cols).collect()),
                name: t.name,
                decay: t.decay,
            })
            .collect();
        Ok(Self {
            config: header.config,
            tokenizer: header.tokenizer,
            params,
            rng: header.rng,
            step: header.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
