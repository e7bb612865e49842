//! Tokenizer, attention primitive, and the image and report encoders with
//! their projection heads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_model::record::Raster;
use crate::error::{Error, Result};
use crate::nn::{self, attention_mask, EncoderBlock, Init, LayerNorm, Linear};
use crate::params::ParamId;
use crate::tensor::Matrix;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const ENC: usize = 4;
pub const UNK: usize = 5;
pub const SPECIALS: [&str; 6] = ["[PAD]", "[CLS]", "[BOS]", "[EOS]", "[ENC]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub region_dim: usize,
    pub prompt_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub max_text_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            hidden_dim: 128,
            projection_dim: 64,
            region_dim: 128,
            prompt_dim: 128,
            num_layers: 2,
            num_heads: 4,
            ffn_mult: 4,
            max_text_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.patch_size,
            self.hidden_dim,
            self.projection_dim,
            self.region_dim,
            self.prompt_dim,
            self.num_layers,
            self.num_heads,
            self.ffn_mult,
            self.max_text_len,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("all encoder dimensions must be positive".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.prompt_dim != self.hidden_dim {
            return Err(Error::Config(
                "prompt_dim must equal hidden_dim: prompts are encoded by the report encoder".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }
}

/// Lowercased word/punctuation vocabulary with six reserved specials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.tokens
    }
}

/// Splits on whitespace; punctuation characters become their own words.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Tokenizer {
    /// Frequency-sorted vocabulary, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in split_words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// `start` followed by the text's tokens.
    pub fn encode(&self, text: &str, start: usize) -> TokenSequence {
        let mut ids = vec![start];
        ids.extend(self.word_ids(text));
        TokenSequence::new(ids)
    }

    /// Joins non-special tokens with spaces.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len() && i < self.tokens.len())
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Self { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn padded(&self, len: usize) -> Self {
        let mut s = self.clone();
        while s.ids.len() < len {
            s.ids.push(PAD);
            s.mask.push(false);
        }
        s
    }

    /// Truncates to `max_len`; returns whether anything was dropped.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        let cut = self.ids.len() > max_len;
        self.ids.truncate(max_len);
        self.mask.truncate(max_len);
        cut
    }
}

/// `softmax(QKᵀ/√d_k)·V` on plain matrices. Keys whose mask entry is
/// `false` receive zero weight.
pub fn scaled_dot_attention(q: &Matrix, k: &Matrix, v: &Matrix, key_mask: Option<&[bool]>) -> Result<Matrix> {
    if q.cols() != k.cols() || k.rows() != v.rows() {
        return Err(Error::Validation(format!(
            "attention shapes disagree: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let mask = attention_mask(q.rows(), k.rows(), key_mask, false);
    let (out, _) = nn::scaled_dot_attention(&mut g, qv, kv, vv, mask.as_deref())?;
    Ok(g.value(out).clone())
}

/// Non-overlapping patches in raster order, one flattened patch per row.
pub fn patchify(image: &Raster, patch: usize) -> Matrix {
    let (ph, pw) = (image.height / patch, image.width / patch);
    let mut m = Matrix::zeros(ph * pw, patch * patch);
    for py in 0..ph {
        for px in 0..pw {
            let row = m.row_mut(py * pw + px);
            for y in 0..patch {
                for x in 0..patch {
                    row[y * patch + x] = image.get(py * patch + y, px * patch + x);
                }
            }
        }
    }
    m
}

/// Centres `(x, y)` of each patch in raster order.
pub fn patch_centers(image_size: usize, patch: usize) -> Vec<(f64, f64)> {
    let n = image_size / patch;
    let half = patch as f64 / 2.0;
    (0..n * n)
        .map(|i| (((i % n) * patch) as f64 + half, ((i / n) * patch) as f64 + half))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    patch_size: usize,
    image_size: usize,
}

pub struct ImageEncoding {
    /// `(1 + num_patches) × N_I`; row 0 is the class token.
    pub v: Var,
    pub v_cls: Var,
    /// Projection of the class token before normalization.
    pub z_raw: Var,
    /// Unit-norm `1 × N_P` projection.
    pub z: Var,
}

impl ImageEncoder {
    pub fn init(init: &mut Init, cfg: &EncoderConfig) -> Self {
        let d = cfg.hidden_dim;
        Self {
            patch_embed: init.linear("img.patch", cfg.patch_size * cfg.patch_size, d),
            cls: init.embedding("img.cls", 1, d),
            pos: init.embedding("img.pos", 1 + cfg.num_patches(), d),
            blocks: (0..cfg.num_layers)
                .map(|l| EncoderBlock::init(init, &format!("img.block{l}"), d, cfg.num_heads, cfg.ffn_dim()))
                .collect(),
            ln_final: init.layer_norm("img.ln_final", d),
            proj: init.linear("img.proj", d, cfg.projection_dim),
            patch_size: cfg.patch_size,
            image_size: cfg.image_size,
        }
    }

    pub fn forward(&self, g: &mut Graph, image: &Raster) -> Result<ImageEncoding> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(Error::Config(format!(
                "image is {}x{}, encoder expects {}x{}",
                image.height, image.width, self.image_size, self.image_size
            )));
        }
        let patches = g.constant(patchify(image, self.patch_size).map(|p| 2.0 * p - 1.0));
        let emb = self.patch_embed.forward(g, patches);
        let cls = g.param(self.cls);
        let x = g.concat_rows(&[cls, emb]);
        let pos = g.param(self.pos);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, x, None)?;
        }
        let v = self.ln_final.forward(g, x);
        let v_cls = g.slice_rows(v, 0, 1);
        let z_raw = self.proj.forward(g, v_cls);
        let z = g.l2_normalize_rows(z_raw);
        Ok(ImageEncoding { v, v_cls, z_raw, z })
    }
}

/// Bidirectional report encoder. Its parameters also serve the prompt and
/// entity encoders, which read them through a frozen graph.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
    max_len: usize,
}

pub struct TextEncoding {
    /// `len × N_T` token states.
    pub t: Var,
    /// Unit-norm `1 × N_P` projection of the first token.
    pub z: Var,
    pub truncated: bool,
}

impl TextEncoder {
    pub fn init(init: &mut Init, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let d = cfg.hidden_dim;
        Self {
            tok: init.embedding("txt.tok", vocab_size, d),
            pos: init.embedding("txt.pos", cfg.max_text_len, d),
            blocks: (0..cfg.num_layers)
                .map(|l| EncoderBlock::init(init, &format!("txt.block{l}"), d, cfg.num_heads, cfg.ffn_dim()))
                .collect(),
            ln_final: init.layer_norm("txt.ln_final", d),
            proj: init.linear("txt.proj", d, cfg.projection_dim),
            max_len: cfg.max_text_len,
        }
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence) -> Result<TextEncoding> {
        let mut seq = seq.clone();
        let truncated = seq.truncate(self.max_len);
        if seq.is_empty() {
            return Err(Error::Validation("empty token sequence".into()));
        }
        let n = seq.len();
        let tok = g.param(self.tok);
        let x = g.gather_rows(tok, &seq.ids);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, n);
        let mut x = g.add(x, pos);
        let mask = attention_mask(n, n, Some(&seq.mask), false);
        for b in &self.blocks {
            x = b.forward(g, x, mask.as_deref())?;
        }
        let t = self.ln_final.forward(g, x);
        let first = g.slice_rows(t, 0, 1);
        let z = self.proj.forward(g, first);
        let z = g.l2_normalize_rows(z);
        Ok(TextEncoding { t, z, truncated })
    }
}
