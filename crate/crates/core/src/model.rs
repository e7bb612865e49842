//! The assembled model: encoders, grounding module and multimodal backbone
//! over one parameter store, plus the per-batch pre-training pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{teacher_forcing_pair, MultimodalBackbone};
use crate::data_model::atlas::AtlasVocab;
use crate::data_model::prompt::NO_FINDING_SENTENCE;
use crate::data_model::record::SampleRecord;
use crate::encoders::{split_words, EncoderConfig, ImageEncoder, ImageEncoding, TextEncoder, TokenSequence, Tokenizer, CLS, ENC};
use crate::error::{Error, Result};
use crate::gk_fusion::{ecls_loss, encode_entities, encode_prompt, region_pooling, FusionConfig, GkModule, Grounding};
use crate::nn::Init;
use crate::objectives::{derangement, itc_loss, itm_loss, lm_loss, total_loss_node, LossWeights, ITM_MATCH};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Bounds on the learnable contrastive temperature.
pub const TEMPERATURE_RANGE: (f64, f64) = (0.001, 0.5);

/// Which pre-training pathways are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub grounding: Grounding,
    pub ecls: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            grounding: Grounding::CrossAttention,
            ecls: true,
        }
    }
}

impl Ablation {
    /// The six rows of the ablation grid, baseline first.
    pub const GRID: [Ablation; 6] = [
        Ablation { ecls: false, grounding: Grounding::None },
        Ablation { ecls: true, grounding: Grounding::None },
        Ablation { ecls: false, grounding: Grounding::Concat },
        Ablation { ecls: false, grounding: Grounding::CrossAttention },
        Ablation { ecls: true, grounding: Grounding::Concat },
        Ablation { ecls: true, grounding: Grounding::CrossAttention },
    ];
}

/// Vocabulary over every string the model will read or write.
pub fn build_tokenizer(records: &[SampleRecord]) -> Tokenizer {
    let vocab = AtlasVocab::standard();
    let mut corpus: Vec<String> = Vec::new();
    for r in records {
        corpus.push(r.report.clone());
        corpus.push(r.prompt.text());
        corpus.extend(r.qa_pairs.iter().map(|qa| qa.question.clone()));
    }
    corpus.extend(vocab.entities.iter().cloned());
    corpus.extend(vocab.negative_phrases.iter().cloned());
    corpus.extend(vocab.regions.iter().cloned());
    corpus.push(NO_FINDING_SENTENCE.to_string());
    Tokenizer::build(&corpus)
}

#[derive(Clone, Debug)]
pub struct GkModel {
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub tokenizer: Tokenizer,
    pub vocab: AtlasVocab,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub backbone: MultimodalBackbone,
    pub gk: GkModule,
    pub log_temp: ParamId,
}

/// Per-batch pre-training losses; `total` is the graph node to
/// differentiate, the rest are logged values.
pub struct BatchLosses {
    pub total: Var,
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub ecls: f64,
    pub ecls_samples: usize,
    pub itm_correct: usize,
    pub itm_pairs: usize,
}

impl GkModel {
    pub fn new(encoder: EncoderConfig, fusion: FusionConfig, tokenizer: Tokenizer, itc_temperature: f64, seed: u64) -> Result<Self> {
        encoder.validate()?;
        fusion.validate(encoder.hidden_dim)?;
        if !(TEMPERATURE_RANGE.0..=TEMPERATURE_RANGE.1).contains(&itc_temperature) {
            return Err(Error::Config(format!("itc_temperature {itc_temperature} outside {TEMPERATURE_RANGE:?}")));
        }
        let mut store = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        let image = ImageEncoder::init(&mut init, &encoder);
        let text = TextEncoder::init(&mut init, &encoder, tokenizer.len());
        let backbone = MultimodalBackbone::init(&mut init, &encoder, tokenizer.len());
        let gk = GkModule::init(&mut init, &encoder, &fusion);
        let log_temp = init.scalar("itc.log_temp", itc_temperature.ln());
        Ok(Self {
            encoder,
            fusion,
            tokenizer,
            vocab: AtlasVocab::standard(),
            store,
            image,
            text,
            backbone,
            gk,
            log_temp,
        })
    }

    /// Rebuilds the model layout and fills it from `params`, which must
    /// hold exactly the model's parameters with matching shapes.
    pub fn from_params(encoder: EncoderConfig, fusion: FusionConfig, tokenizer: Tokenizer, params: Vec<crate::params::Param>) -> Result<Self> {
        let mut model = Self::new(encoder, fusion, tokenizer, 0.07, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                params.len()
            )));
        }
        for p in params {
            let id = model
                .store
                .id(&p.name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown parameter `{}`", p.name)))?;
            let slot = model.store.value_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    slot.shape()
                )));
            }
            *slot = p.value;
        }
        Ok(model)
    }

    pub fn temperature(&self) -> f64 {
        self.store.value(self.log_temp)[(0, 0)].exp()
    }

    pub fn clamp_temperature(&mut self) {
        let (lo, hi) = (TEMPERATURE_RANGE.0.ln(), TEMPERATURE_RANGE.1.ln());
        let t = &mut self.store.value_mut(self.log_temp)[(0, 0)];
        *t = t.clamp(lo, hi);
    }

    /// Report word ids without specials, cut to the decoder budget.
    pub fn report_body(&self, report: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.word_ids(report);
        ids.truncate(self.encoder.max_text_len);
        ids
    }

    /// `start` + words, cut to `max_text_len`.
    pub fn sequence(&self, text: &str, start: usize) -> TokenSequence {
        let mut seq = self.tokenizer.encode(text, start);
        seq.truncate(self.encoder.max_text_len);
        seq
    }

    /// Visual memory consumed by the decoder: `v` itself without grounding,
    /// otherwise the globally fused features for `prompt_text`.
    pub fn memory(&self, g: &mut Graph, record: &SampleRecord, v: Var, grounding: Grounding, prompt_text: &str) -> Result<Var> {
        if grounding == Grounding::None {
            return Ok(v);
        }
        let regions = self.gk.extract_region_features(g, &record.region_boxes, v)?;
        let z_r = self.gk.project_regions(g, &regions);
        let p = encode_prompt(g, &self.text, &self.tokenizer, prompt_text)?;
        let z_local = match grounding {
            Grounding::CrossAttention => self.gk.fuse_local(g, z_r, p, None)?.z_local,
            _ => self.gk.fuse_concat(g, z_r, p),
        };
        self.gk.fuse_global(g, v, z_local, Some(&regions.mask))
    }

    /// Memory used after pre-training: the grounding module runs frozen on
    /// the no-finding prompt so labels never leak into the input.
    pub fn downstream_memory(&self, g: &mut Graph, record: &SampleRecord, v: Var, grounding: Grounding) -> Result<Var> {
        if grounding == Grounding::None {
            return Ok(v);
        }
        let was = g.set_frozen(true);
        let out = self.memory(g, record, v, grounding, NO_FINDING_SENTENCE);
        g.set_frozen(was);
        out
    }

    /// Builds every pre-training loss for one batch. `perm` pairs image `i`
    /// with report `perm[i]` for the mismatched ITM examples.
    pub fn pretrain_batch(&self, g: &mut Graph, batch: &[&SampleRecord], ablation: Ablation, weights: &LossWeights, perm: &[usize]) -> Result<BatchLosses> {
        let b = batch.len();
        if b < 2 || perm.len() != b {
            return Err(Error::Validation(format!("pre-training batch needs at least 2 samples, got {b}")));
        }
        let entities = if ablation.ecls {
            Some(encode_entities(g, &self.text, &self.tokenizer, &self.vocab)?)
        } else {
            None
        };
        let mut z_images = Vec::with_capacity(b);
        let mut z_texts = Vec::with_capacity(b);
        let mut itm_logits = Vec::with_capacity(2 * b);
        let mut step_logits = Vec::with_capacity(b);
        let mut targets = Vec::new();
        let mut ecls_terms = Vec::new();
        let encodings: Vec<ImageEncoding> = batch.iter().map(|r| self.image.forward(g, &r.image)).collect::<Result<_>>()?;
        for (r, enc) in batch.iter().zip(&encodings) {
            let report = self.text.forward(g, &self.sequence(&r.report, CLS))?;
            z_images.push(enc.z);
            z_texts.push(report.z);
            itm_logits.push(self.backbone.image_report_encode(g, &self.sequence(&r.report, ENC), enc.v)?.itm_logits);

            let memory = self.memory(g, r, enc.v, ablation.grounding, &r.prompt.text())?;
            let (input, tgt) = teacher_forcing_pair(&self.report_body(&r.report), self.encoder.max_text_len);
            step_logits.push(self.backbone.decode_logits(g, &input, memory, None)?);
            targets.extend(tgt);

            if let Some((pos, neg)) = entities {
                if let Some(l) = ecls_loss(g, enc.z, pos, neg, &r.label_vector, self.fusion.temperature)? {
                    ecls_terms.push(l);
                }
            }
        }
        for (i, enc) in encodings.iter().enumerate() {
            let other = &batch[perm[i]].report;
            itm_logits.push(self.backbone.image_report_encode(g, &self.sequence(other, ENC), enc.v)?.itm_logits);
        }

        let zi = g.concat_rows(&z_images);
        let zt = g.concat_rows(&z_texts);
        let log_t = g.param(self.log_temp);
        let itc = itc_loss(g, zi, zt, log_t)?;

        let logits = g.concat_rows(&itm_logits);
        let labels: Vec<bool> = (0..2 * b).map(|i| i < b).collect();
        let itm = itm_loss(g, logits, &labels)?;
        let itm_correct = labels
            .iter()
            .enumerate()
            .filter(|&(i, &m)| (g.value(logits).argmax_row(i) == ITM_MATCH) == m)
            .count();

        let steps = g.concat_rows(&step_logits);
        let mask = vec![true; targets.len()];
        let lm = lm_loss(g, steps, &targets, &mask)?;

        let ecls = if ecls_terms.is_empty() {
            None
        } else {
            let n = ecls_terms.len() as f64;
            let terms: Vec<(f64, Var)> = ecls_terms.iter().map(|&t| (1.0 / n, t)).collect();
            Some(g.weighted_sum(&terms))
        };
        let total = total_loss_node(g, itc, itm, lm, ecls, weights);
        Ok(BatchLosses {
            total,
            itc: g.scalar(itc),
            itm: g.scalar(itm),
            lm: g.scalar(lm),
            ecls: ecls.map_or(0.0, |e| g.scalar(e)),
            ecls_samples: ecls_terms.len(),
            itm_correct,
            itm_pairs: 2 * b,
        })
    }

    /// Derangement drawn from `rng` for [`Self::pretrain_batch`].
    pub fn mismatch_permutation(batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        derangement(batch_size, rng)
    }

    /// Region-pooled downstream memory, `29 × N_I`, with no gradient.
    pub fn region_features(&self, record: &SampleRecord, grounding: Grounding) -> Result<Matrix> {
        let mut g = Graph::with_params(&self.store);
        g.set_frozen(true);
        let enc = self.image.forward(&mut g, &record.image)?;
        let mem = self.downstream_memory(&mut g, record, enc.v, grounding)?;
        let (pool, _) = region_pooling(&record.region_boxes, self.encoder.image_size, self.encoder.patch_size)?;
        Ok(pool.matmul(g.value(mem)))
    }

    /// Attention of region queries onto the prompt sentences that name
    /// them, against a uniform spread over prompt tokens.
    pub fn grounding_mass(&self, records: &[SampleRecord]) -> Result<GroundingReport> {
        let (mut mass, mut baseline, mut pairs) = (0.0, 0.0, 0usize);
        for r in records.iter().filter(|r| r.prompt.has_positive()) {
            let mut g = Graph::with_params(&self.store);
            g.set_frozen(true);
            let enc = self.image.forward(&mut g, &r.image)?;
            let regions = self.gk.extract_region_features(&mut g, &r.region_boxes, enc.v)?;
            let z_r = self.gk.project_regions(&mut g, &regions);
            let text = r.prompt.text();
            let p = encode_prompt(&mut g, &self.text, &self.tokenizer, &text)?;
            let len = g.value(p).rows();
            let local = self.gk.fuse_local(&mut g, z_r, p, None)?;
            let maps: Vec<&Matrix> = local.weights.iter().flatten().map(|&w| g.value(w)).collect();
            for (span, triple) in self.sentence_spans(r).into_iter().zip(r.prompt.positives()) {
                let span = span.start.min(len)..span.end.min(len);
                if span.is_empty() {
                    continue;
                }
                for &k in &triple.regions {
                    let m: f64 = maps.iter().map(|w| span.clone().map(|j| w[(k, j)]).sum::<f64>()).sum::<f64>() / maps.len() as f64;
                    mass += m;
                    baseline += span.len() as f64 / len as f64;
                    pairs += 1;
                }
            }
        }
        if pairs == 0 {
            return Err(Error::UndefinedMetric("no positive findings to measure grounding".into()));
        }
        let (mass, baseline) = (mass / pairs as f64, baseline / pairs as f64);
        Ok(GroundingReport {
            mass,
            baseline,
            ratio: mass / baseline,
            pairs,
        })
    }

    /// Token ranges of each rendered sentence inside the encoded prompt
    /// (`[CLS]` at 0, sentences separated by a period token).
    pub fn sentence_spans(&self, record: &SampleRecord) -> Vec<std::ops::Range<usize>> {
        let mut start = 1;
        let mut spans = Vec::new();
        for s in record.prompt.rendered() {
            let n = split_words(s).len();
            spans.push(start..start + n);
            start += n + 1;
        }
        spans
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingReport {
    pub mass: f64,
    pub baseline: f64,
    pub ratio: f64,
    pub pairs: usize,
}
