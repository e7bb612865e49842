//! Pre-training losses: contrastive (ITC), matching (ITM), language
//! modelling (LM), and their weighted total with the entity loss.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// ITM class index of a matching pair.
pub const ITM_MATCH: usize = 0;
pub const ITM_MISMATCH: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub itm: f64,
    pub lm: f64,
    pub ecls: f64,
    /// Initial value of the learnable contrastive temperature.
    pub itc_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            itm: 1.0,
            lm: 1.0,
            ecls: 1.0,
            itc_temperature: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.itm, self.lm, self.ecls].iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.itc_temperature <= 0.0 || !self.itc_temperature.is_finite() {
            return Err(Error::Config("itc_temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over rows of `-weight · log softmax(logits)[target]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
    let (n, c) = g.value(logits).shape();
    assert_eq!(targets.len(), n, "one target per row");
    let total: f64 = weights.iter().sum();
    let mut select = Matrix::zeros(n, c);
    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        select[(r, t)] = -w / total;
    }
    let logp = g.log_softmax(logits);
    let picked = g.mul_const(logp, select);
    g.sum(picked)
}

/// Symmetric in-batch InfoNCE over cosine similarities of unit rows.
/// The temperature enters as `log τ` so it can be learned.
pub fn itc_loss(g: &mut Graph, z_image: Var, z_text: Var, log_temperature: Var) -> Result<Var> {
    let b = g.value(z_image).rows();
    if b == 0 {
        return Err(Error::Validation("itc needs a nonempty batch".into()));
    }
    if g.value(z_text).rows() != b {
        return Err(Error::Validation("itc image/text batch sizes differ".into()));
    }
    let neg = g.scale(log_temperature, -1.0);
    let inv_t = g.exp(neg);
    let sims = g.matmul_t(z_image, z_text);
    let logits = g.scale_by(sims, inv_t);
    let diag: Vec<usize> = (0..b).collect();
    let ones = vec![1.0; b];
    let i2t = cross_entropy(g, logits, &diag, &ones);
    let logits_t = g.transpose(logits);
    let t2i = cross_entropy(g, logits_t, &diag, &ones);
    let both = g.add(i2t, t2i);
    Ok(g.scale(both, 0.5))
}

pub fn itc_loss_value(z_image: &Matrix, z_text: &Matrix, temperature: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (i, t) = (g.constant(z_image.clone()), g.constant(z_text.clone()));
    let lt = g.constant(Matrix::scalar(temperature.ln()));
    let l = itc_loss(&mut g, i, t, lt)?;
    Ok(g.scalar(l))
}

/// Mean binary cross-entropy over (match, no-match) logits; `labels[i]` is
/// `true` for a matching pair.
pub fn itm_loss(g: &mut Graph, logits: Var, labels: &[bool]) -> Result<Var> {
    let (b, c) = g.value(logits).shape();
    if b == 0 || c != 2 || labels.len() != b {
        return Err(Error::Validation(format!(
            "itm expects B×2 logits with B labels, got {b}×{c} and {}",
            labels.len()
        )));
    }
    let targets: Vec<usize> = labels.iter().map(|&m| if m { ITM_MATCH } else { ITM_MISMATCH }).collect();
    Ok(cross_entropy(g, logits, &targets, &vec![1.0; b]))
}

pub fn itm_loss_value(logits: &Matrix, labels: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let out = itm_loss(&mut g, l, labels)?;
    Ok(g.scalar(out))
}

/// A uniformly random permutation with no fixed point.
pub fn derangement<R: Rng>(n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Validation(format!("cannot build mismatched pairs from a batch of {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Mean cross-entropy over unmasked positions.
pub fn lm_loss(g: &mut Graph, step_logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let n = g.value(step_logits).rows();
    if targets.len() != n || mask.len() != n {
        return Err(Error::Validation("lm targets/mask length mismatch".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Validation("lm loss with every position masked".into()));
    }
    let weights: Vec<f64> = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    Ok(cross_entropy(g, step_logits, targets, &weights))
}

pub fn lm_loss_value(step_logits: &Matrix, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(step_logits.clone());
    let out = lm_loss(&mut g, l, targets, mask)?;
    Ok(g.scalar(out))
}

/// `itc + λ1·itm + λ2·lm + λ3·ecls`.
pub fn total_loss(itc: f64, itm: f64, lm: f64, ecls: f64, w: &LossWeights) -> f64 {
    itc + w.itm * itm + w.lm * lm + w.ecls * ecls
}

pub fn total_loss_node(g: &mut Graph, itc: Var, itm: Var, lm: Var, ecls: Option<Var>, w: &LossWeights) -> Var {
    let mut terms = vec![(1.0, itc), (w.itm, itm), (w.lm, lm)];
    if let Some(e) = ecls {
        terms.push((w.ecls, e));
    }
    g.weighted_sum(&terms)
}
