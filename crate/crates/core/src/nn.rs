//! Transformer layers expressed over the autodiff [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// Parameter factory. Affine weights are drawn from `U(-1/√fan_in, 1/√fan_in)`,
/// biases start at zero.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt());
        Linear {
            w: self.store.add(format!("{name}.w"), w, true),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, fan_out), false),
        }
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> LayerNorm {
        LayerNorm {
            gain: self
                .store
                .add(format!("{name}.g"), Matrix::filled(1, dim, 1.0), false),
            bias: self.store.add(format!("{name}.b"), Matrix::zeros(1, dim), false),
        }
    }

    pub fn embedding(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let m = self.uniform(rows, dim, 1.0 / (dim as f64).sqrt());
        self.store.add(name, m, false)
    }

    pub fn scalar(&mut self, name: &str, value: f64) -> ParamId {
        self.store.add(name, Matrix::scalar(value), false)
    }

    pub fn attention(&mut self, name: &str, dim: usize, kv_dim: usize, heads: usize) -> MultiHeadAttention {
        MultiHeadAttention {
            q: self.linear(&format!("{name}.q"), dim, dim),
            k: self.linear(&format!("{name}.k"), kv_dim, dim),
            v: self.linear(&format!("{name}.v"), kv_dim, dim),
            o: self.linear(&format!("{name}.o"), dim, dim),
            heads,
        }
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, hidden: usize) -> FeedForward {
        FeedForward {
            fc1: self.linear(&format!("{name}.fc1"), dim, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, dim),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.fc1.forward(g, x);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Builds an `n×m` keep-mask from an optional key mask and a causal flag.
/// Returns `None` when nothing is masked.
pub fn attention_mask(n: usize, m: usize, key_mask: Option<&[bool]>, causal: bool) -> Option<Vec<bool>> {
    if key_mask.is_none_or(|k| k.iter().all(|&b| b)) && !causal {
        return None;
    }
    let mut out = vec![true; n * m];
    for i in 0..n {
        for j in 0..m {
            let key_ok = key_mask.is_none_or(|k| k[j]);
            let causal_ok = !causal || j <= i;
            out[i * m + j] = key_ok && causal_ok;
        }
    }
    Some(out)
}

/// `softmax(QKᵀ/√d_k) V` on graph nodes; returns the output and the weights.
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let dk = g.value(k).cols() as f64;
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, 1.0 / dk.sqrt());
    let weights = g.softmax(scores, mask)?;
    Ok((g.matmul(weights, v), weights))
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head attention weights, each `n×m`.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// `mask` is an `n×m` keep-mask over (query, key) pairs.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, mask: Option<&[bool]>) -> Result<AttentionOutput> {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, kv);
        let v = self.v.forward(g, kv);
        let dim = g.value(q).cols();
        let hd = dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = if self.heads == 1 { q } else { g.slice_cols(q, a, b) };
            let kh = if self.heads == 1 { k } else { g.slice_cols(k, a, b) };
            let vh = if self.heads == 1 { v } else { g.slice_cols(v, a, b) };
            let (o, w) = scaled_dot_attention(g, qh, kh, vh, mask)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) };
        Ok(AttentionOutput {
            out: self.o.forward(g, cat),
            weights,
        })
    }
}

/// Pre-norm self-attention block: `x + SA(LN x)`, then `x + FFN(LN x)`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn init(init: &mut Init, name: &str, dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln_attn: init.layer_norm(&format!("{name}.ln_attn"), dim),
            attn: init.attention(&format!("{name}.attn"), dim, dim, heads),
            ln_ffn: init.layer_norm(&format!("{name}.ln_ffn"), dim),
            ffn: init.feed_forward(&format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, h, mask)?;
        let x = g.add(x, a.out);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, h);
        Ok(g.add(x, f))
    }
}

/// Pre-norm cross-attention block: `x + CA(LN x, kv)`, then `x + FFN(LN x)`.
/// Keys and values enter unnormalized and without positional terms.
#[derive(Clone, Debug)]
pub struct CrossBlock {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

pub struct CrossBlockOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl CrossBlock {
    pub fn init(init: &mut Init, name: &str, dim: usize, kv_dim: usize, heads: usize, ffn_dim: usize) -> Self {
        Self {
            ln_attn: init.layer_norm(&format!("{name}.ln_attn"), dim),
            attn: init.attention(&format!("{name}.attn"), dim, kv_dim, heads),
            ln_ffn: init.layer_norm(&format!("{name}.ln_ffn"), dim),
            ffn: init.feed_forward(&format!("{name}.ffn"), dim, ffn_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, kv: Var, mask: Option<&[bool]>) -> Result<CrossBlockOutput> {
        let h = self.ln_attn.forward(g, x);
        let a = self.attn.forward(g, h, kv, mask)?;
        let x = g.add(x, a.out);
        let h = self.ln_ffn.forward(g, x);
        let f = self.ffn.forward(g, h);
        Ok(CrossBlockOutput {
            out: g.add(x, f),
            weights: a.weights,
        })
    }
}
