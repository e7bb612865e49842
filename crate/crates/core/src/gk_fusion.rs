//! Grounded knowledge fusion: region features, frozen prompt and entity
//! encodings, two-stage cross-attention fusion and the entity
//! classification loss.

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_model::atlas::{AtlasVocab, NUM_REGIONS};
use crate::data_model::record::BBox;
use crate::encoders::{patch_centers, TextEncoder, Tokenizer, CLS};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, CrossBlock, Init, Linear};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grounding {
    None,
    Concat,
    CrossAttention,
}

impl std::str::FromStr for Grounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Grounding::None),
            "concat" => Ok(Grounding::Concat),
            "cross_attention" | "ca" => Ok(Grounding::CrossAttention),
            other => Err(Error::Config(format!("unknown grounding mode `{other}`"))),
        }
    }
}

impl Grounding {
    pub fn as_str(&self) -> &'static str {
        match self {
            Grounding::None => "none",
            Grounding::Concat => "concat",
            Grounding::CrossAttention => "cross_attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub num_fusion_layers: usize,
    pub num_heads: usize,
    /// Entity classification temperature.
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            num_fusion_layers: 2,
            num_heads: 4,
            temperature: 0.2,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.num_fusion_layers == 0 || self.num_heads == 0 || !hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config("fusion layers/heads must be positive and divide hidden_dim".into()));
        }
        Ok(())
    }
}

/// Region features as graph rows: row `k` belongs to atlas region `k`.
pub struct RegionFeatures {
    /// `29 × N_R`; masked rows are zero.
    pub r: Var,
    pub mask: [bool; NUM_REGIONS],
}

/// Mean-pooling weights over `v` (class token first) for each atlas box,
/// plus which boxes contain at least one patch centre.
pub fn region_pooling(boxes: &[BBox], image_size: usize, patch: usize) -> Result<(Matrix, [bool; NUM_REGIONS])> {
    if boxes.len() != NUM_REGIONS {
        return Err(Error::Validation(format!("expected {NUM_REGIONS} boxes, got {}", boxes.len())));
    }
    let centers = patch_centers(image_size, patch);
    let mut pool = Matrix::zeros(NUM_REGIONS, 1 + centers.len());
    let mut mask = [false; NUM_REGIONS];
    for (k, b) in boxes.iter().enumerate() {
        let inside: Vec<usize> = centers
            .iter()
            .enumerate()
            .filter(|(_, &(x, y))| b.contains_point(x, y))
            .map(|(i, _)| i)
            .collect();
        if inside.is_empty() {
            continue;
        }
        mask[k] = true;
        let w = 1.0 / inside.len() as f64;
        for i in inside {
            pool[(k, 1 + i)] = w;
        }
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyRegions);
    }
    Ok((pool, mask))
}

fn row_mask_matrix(mask: &[bool], cols: usize) -> Matrix {
    let mut m = Matrix::zeros(mask.len(), cols);
    for (r, &keep) in mask.iter().enumerate() {
        if keep {
            m.row_mut(r).fill(1.0);
        }
    }
    m
}

pub struct LocalFusion {
    pub z_local: Var,
    /// `weights[layer][head]`, each `29 × len(p)`.
    pub weights: Vec<Vec<Var>>,
}

#[derive(Debug, Default)]
pub struct CallCounters {
    pub fuse_local: AtomicUsize,
    pub fuse_concat: AtomicUsize,
    pub fuse_global: AtomicUsize,
}

impl Clone for CallCounters {
    fn clone(&self) -> Self {
        Self::default()
    }
}

impl CallCounters {
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.fuse_local.load(Ordering::Relaxed),
            self.fuse_concat.load(Ordering::Relaxed),
            self.fuse_global.load(Ordering::Relaxed),
        )
    }
}

/// Parameters of the grounding module; every name starts with `gk.`.
#[derive(Clone, Debug)]
pub struct GkModule {
    pub region_proj: Linear,
    pub f_r: Linear,
    pub local: Vec<CrossBlock>,
    pub global: CrossBlock,
    pub concat_proj: Linear,
    pub counters: CallCounters,
    image_size: usize,
    patch_size: usize,
}

impl GkModule {
    pub fn init(init: &mut Init, enc: &crate::encoders::EncoderConfig, fusion: &FusionConfig) -> Self {
        let (d, nr, np) = (enc.hidden_dim, enc.region_dim, enc.prompt_dim);
        let ffn = np * enc.ffn_mult;
        Self {
            region_proj: init.linear("gk.region", d, nr),
            f_r: init.linear("gk.f_r", nr, np),
            local: (0..fusion.num_fusion_layers)
                .map(|l| CrossBlock::init(init, &format!("gk.local{l}"), np, np, fusion.num_heads, ffn))
                .collect(),
            global: CrossBlock::init(init, "gk.global", d, np, fusion.num_heads, d * enc.ffn_mult),
            concat_proj: init.linear("gk.concat", 2 * np, np),
            counters: CallCounters::default(),
            image_size: enc.image_size,
            patch_size: enc.patch_size,
        }
    }

    /// Mean of the patch embeddings whose centres fall in each box, mapped
    /// to the region space. Boxes without a patch centre give zero rows.
    pub fn extract_region_features(&self, g: &mut Graph, boxes: &[BBox], v: Var) -> Result<RegionFeatures> {
        let (pool, mask) = region_pooling(boxes, self.image_size, self.patch_size)?;
        let pooled = g.left_mul_const(pool, v);
        let r = self.region_proj.forward(g, pooled);
        let cols = g.value(r).cols();
        let r = g.mul_const(r, row_mask_matrix(&mask, cols));
        Ok(RegionFeatures { r, mask })
    }

    /// `f_R` applied per region; masked rows stay zero.
    pub fn project_regions(&self, g: &mut Graph, regions: &RegionFeatures) -> Var {
        let z = self.f_r.forward(g, regions.r);
        if regions.mask.iter().all(|&m| m) {
            return z;
        }
        let cols = g.value(z).cols();
        g.mul_const(z, row_mask_matrix(&regions.mask, cols))
    }

    /// Region queries attend to prompt tokens through the stacked
    /// cross-attention layers.
    pub fn fuse_local(&self, g: &mut Graph, z_r: Var, p: Var, p_mask: Option<&[bool]>) -> Result<LocalFusion> {
        self.counters.fuse_local.fetch_add(1, Ordering::Relaxed);
        let (n, m) = (g.value(z_r).rows(), g.value(p).rows());
        let mask = attention_mask(n, m, p_mask, false);
        let mut x = z_r;
        let mut weights = Vec::with_capacity(self.local.len());
        for layer in &self.local {
            let out = layer.forward(g, x, p, mask.as_deref())?;
            x = out.out;
            weights.push(out.weights);
        }
        Ok(LocalFusion { z_local: x, weights })
    }

    /// Concatenation ablation: each region row joined with the mean prompt
    /// embedding, then an affine map. No attention.
    pub fn fuse_concat(&self, g: &mut Graph, z_r: Var, p: Var) -> Var {
        self.counters.fuse_concat.fetch_add(1, Ordering::Relaxed);
        let (n, m) = (g.value(z_r).rows(), g.value(p).rows());
        let mean = g.left_mul_const(Matrix::filled(n, m, 1.0 / m as f64), p);
        let cat = g.concat_cols(&[z_r, mean]);
        self.concat_proj.forward(g, cat)
    }

    /// Image tokens attend to the region-level fused features.
    pub fn fuse_global(&self, g: &mut Graph, v: Var, z_local: Var, region_mask: Option<&[bool]>) -> Result<Var> {
        self.counters.fuse_global.fetch_add(1, Ordering::Relaxed);
        let (n, m) = (g.value(v).rows(), g.value(z_local).rows());
        let mask = attention_mask(n, m, region_mask, false);
        Ok(self.global.forward(g, v, z_local, mask.as_deref())?.out)
    }
}

/// Prompt token states from the report encoder behind a gradient barrier.
pub fn encode_prompt(g: &mut Graph, text: &TextEncoder, tokenizer: &Tokenizer, prompt_text: &str) -> Result<Var> {
    let seq = tokenizer.encode(prompt_text, CLS);
    g.frozen(|g| text.forward(g, &seq).map(|e| e.t))
}

/// Unit-norm embeddings of the positive and negative entity phrases, each
/// `14 × N_P`, computed with frozen report-encoder parameters.
pub fn encode_entities(g: &mut Graph, text: &TextEncoder, tokenizer: &Tokenizer, vocab: &AtlasVocab) -> Result<(Var, Var)> {
    g.frozen(|g| {
        let mut encode_all = |phrases: &[String]| -> Result<Var> {
            let rows = phrases
                .iter()
                .map(|ph| text.forward(g, &tokenizer.encode(ph, CLS)).map(|e| e.z))
                .collect::<Result<Vec<_>>>()?;
            Ok(g.concat_rows(&rows))
        };
        let pos = encode_all(&vocab.entities)?;
        let neg = encode_all(&vocab.negative_phrases)?;
        Ok((pos, neg))
    })
}

/// Entity classification loss for one sample. Returns `None` when no entity
/// is present: such samples are skipped.
pub fn ecls_loss(g: &mut Graph, v_proj: Var, z_pos: Var, z_neg: Var, labels: &[bool], temperature: f64) -> Result<Option<Var>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let n = g.value(z_pos).rows();
    if labels.len() != n || g.value(z_neg).rows() != n {
        return Err(Error::Validation(format!(
            "ecls expects {n} labels and {n} negatives, got {} and {}",
            labels.len(),
            g.value(z_neg).rows()
        )));
    }
    if !labels.iter().any(|&y| y) {
        return Ok(None);
    }
    let both = g.concat_rows(&[z_pos, z_neg]);
    let sims = g.matmul_t(v_proj, both);
    let logits = g.scale(sims, 1.0 / temperature);
    let logp = g.log_softmax(logits);
    let mut select = Matrix::zeros(1, 2 * n);
    for (d, &y) in labels.iter().enumerate() {
        select[(0, if y { d } else { n + d })] = -1.0 / n as f64;
    }
    let picked = g.mul_const(logp, select);
    Ok(Some(g.sum(picked)))
}

/// Plain-value form of [`ecls_loss`] for unit vectors.
pub fn ecls_loss_value(v_proj: &Matrix, z_pos: &Matrix, z_neg: &Matrix, labels: &[bool], temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(v_proj.clone());
    let p = g.constant(z_pos.clone());
    let n = g.constant(z_neg.clone());
    Ok(ecls_loss(&mut g, v, p, n, labels, temperature)?.map_or(0.0, |l| g.scalar(l)))
}
