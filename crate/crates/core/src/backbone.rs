//! Image-report encoder (matching pathway) and causal report decoder
//! (generation pathway).
//!
//! Both run the same stack of blocks: self-attention, cross-attention to a
//! visual memory, feed-forward. They share token and position embeddings,
//! cross-attention and feed-forward weights and the final norm. Each mode
//! owns its self-attention sublayers; the decoder's are causally masked.

use crate::autograd::{Graph, Var};
use crate::encoders::{EncoderConfig, TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{attention_mask, FeedForward, Init, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamId;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct SelfAttentionLayer {
    pub ln: LayerNorm,
    pub attn: MultiHeadAttention,
}

#[derive(Clone, Debug)]
pub struct SharedLayer {
    pub ln_cross: LayerNorm,
    pub cross: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct MultimodalBackbone {
    pub tok: ParamId,
    pub pos: ParamId,
    pub shared: Vec<SharedLayer>,
    pub encoder_sa: Vec<SelfAttentionLayer>,
    pub decoder_sa: Vec<SelfAttentionLayer>,
    pub ln_final: LayerNorm,
    pub itm_head: Linear,
    pub lm_head: Linear,
    max_len: usize,
}

pub struct CrossModalOutput {
    /// `len × N_T` token states.
    pub z_it: Var,
    /// `1 × 2`: (match, no-match).
    pub itm_logits: Var,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Encoder,
    Decoder,
}

impl MultimodalBackbone {
    pub fn init(init: &mut Init, cfg: &EncoderConfig, vocab_size: usize) -> Self {
        let d = cfg.hidden_dim;
        let sa = |init: &mut Init, prefix: &str, l: usize| SelfAttentionLayer {
            ln: init.layer_norm(&format!("mm.{prefix}{l}.ln"), d),
            attn: init.attention(&format!("mm.{prefix}{l}.attn"), d, d, cfg.num_heads),
        };
        let tok = init.embedding("mm.tok", vocab_size, d);
        let pos = init.embedding("mm.pos", cfg.max_text_len + 1, d);
        let shared = (0..cfg.num_layers)
            .map(|l| SharedLayer {
                ln_cross: init.layer_norm(&format!("mm.shared{l}.ln_cross"), d),
                cross: init.attention(&format!("mm.shared{l}.cross"), d, d, cfg.num_heads),
                ln_ffn: init.layer_norm(&format!("mm.shared{l}.ln_ffn"), d),
                ffn: init.feed_forward(&format!("mm.shared{l}.ffn"), d, cfg.ffn_dim()),
            })
            .collect();
        let encoder_sa = (0..cfg.num_layers).map(|l| sa(init, "enc_sa", l)).collect();
        let decoder_sa = (0..cfg.num_layers).map(|l| sa(init, "dec_sa", l)).collect();
        Self {
            tok,
            pos,
            shared,
            encoder_sa,
            decoder_sa,
            ln_final: init.layer_norm("mm.ln_final", d),
            itm_head: init.linear("mm.enc_itm_head", d, 2),
            lm_head: init.linear("mm.dec_lm_head", d, vocab_size),
            max_len: cfg.max_text_len + 1,
        }
    }

    fn run(&self, g: &mut Graph, seq: &TokenSequence, memory: Var, memory_mask: Option<&[bool]>, mode: Mode) -> Result<Var> {
        let n = seq.len();
        if n == 0 || n > self.max_len {
            return Err(Error::Validation(format!(
                "sequence length {n} outside 1..={}",
                self.max_len
            )));
        }
        let tok = g.param(self.tok);
        let x = g.gather_rows(tok, &seq.ids);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, n);
        let mut x = g.add(x, pos);
        let self_mask = attention_mask(n, n, Some(&seq.mask), mode == Mode::Decoder);
        let m = g.value(memory).rows();
        let cross_mask = attention_mask(n, m, memory_mask, false);
        let sa_layers = match mode {
            Mode::Encoder => &self.encoder_sa,
            Mode::Decoder => &self.decoder_sa,
        };
        for (sa, shared) in sa_layers.iter().zip(&self.shared) {
            let h = sa.ln.forward(g, x);
            let a = sa.attn.forward(g, h, h, self_mask.as_deref())?;
            x = g.add(x, a.out);
            let h = shared.ln_cross.forward(g, x);
            let c = shared.cross.forward(g, h, memory, cross_mask.as_deref())?;
            x = g.add(x, c.out);
            let h = shared.ln_ffn.forward(g, x);
            let f = shared.ffn.forward(g, h);
            x = g.add(x, f);
        }
        Ok(self.ln_final.forward(g, x))
    }

    /// Bidirectional pass over `seq` (starting with `[ENC]`) attending to the
    /// image embeddings `v`.
    pub fn image_report_encode(&self, g: &mut Graph, seq: &TokenSequence, v: Var) -> Result<CrossModalOutput> {
        let z_it = self.run(g, seq, v, None, Mode::Encoder)?;
        let first = g.slice_rows(z_it, 0, 1);
        let itm_logits = self.itm_head.forward(g, first);
        Ok(CrossModalOutput { z_it, itm_logits })
    }

    /// Teacher-forced next-token logits for every position of `prefix`
    /// (which starts with `[BOS]`), attending to `memory`.
    pub fn decode_logits(&self, g: &mut Graph, prefix: &TokenSequence, memory: Var, memory_mask: Option<&[bool]>) -> Result<Var> {
        let h = self.run(g, prefix, memory, memory_mask, Mode::Decoder)?;
        Ok(self.lm_head.forward(g, h))
    }

    /// Logits for the token following `prefix`.
    pub fn decode_step(&self, g: &mut Graph, prefix: &TokenSequence, memory: Var) -> Result<Var> {
        let logits = self.decode_logits(g, prefix, memory, None)?;
        let n = g.value(logits).rows();
        Ok(g.slice_rows(logits, n - 1, n))
    }

    /// Argmax decoding from `[BOS]` until `[EOS]` or `max_len` tokens.
    /// Returns the generated body without `[BOS]`/`[EOS]`.
    pub fn greedy_decode(&self, store: &crate::params::ParamStore, memory: &Matrix, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        let limit = max_len.min(self.max_len - 1);
        while ids.len() <= limit {
            let mut g = Graph::with_params(store);
            let mem = g.constant(memory.clone());
            let logits = self.decode_step(&mut g, &TokenSequence::new(ids.clone()), mem)?;
            let next = g.value(logits).argmax_row(0);
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        Ok(ids[1..].to_vec())
    }

    /// Parameter-name prefixes used by each pathway.
    pub fn encoder_only_prefixes() -> [&'static str; 2] {
        ["mm.enc_sa", "mm.enc_itm_head"]
    }

    pub fn decoder_only_prefixes() -> [&'static str; 2] {
        ["mm.dec_sa", "mm.dec_lm_head"]
    }
}

/// Decoder input (`[BOS]` + body) and targets (body + `[EOS]`) for a
/// report, truncated so the input fits `max_text_len`.
pub fn teacher_forcing_pair(body: &[usize], max_text_len: usize) -> (TokenSequence, Vec<usize>) {
    let body = &body[..body.len().min(max_text_len)];
    let mut input = vec![BOS];
    input.extend_from_slice(body);
    let mut targets = body.to_vec();
    targets.push(EOS);
    (TokenSequence::new(input), targets)
}
