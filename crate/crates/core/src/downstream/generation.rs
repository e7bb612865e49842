use serde::{Deserialize, Serialize};

use super::metrics::text_metrics;
use super::{train_loop, trainable, FinetuneConfig};
use crate::autograd::Graph;
use crate::backbone::teacher_forcing_pair;
use crate::data_model::record::SampleRecord;
use crate::encoders::split_words;
use crate::error::Result;
use crate::gk_fusion::Grounding;
use crate::model::GkModel;
use crate::objectives::lm_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub samples: usize,
    /// A few `(generated, reference)` pairs for inspection.
    pub examples: Vec<(String, String)>,
}

/// Greedy-decodes every record and scores against its report.
pub fn evaluate_generation(model: &GkModel, test: &[SampleRecord], grounding: Grounding, max_len: usize) -> Result<GenerationReport> {
    let mut candidates = Vec::with_capacity(test.len());
    let mut references = Vec::with_capacity(test.len());
    for r in test {
        let memory = {
            let mut g = Graph::with_params(&model.store);
            g.set_frozen(true);
            let enc = model.image.forward(&mut g, &r.image)?;
            let mem = model.downstream_memory(&mut g, r, enc.v, grounding)?;
            g.value(mem).clone()
        };
        let ids = model.backbone.greedy_decode(&model.store, &memory, max_len)?;
        candidates.push(model.tokenizer.decode(&ids));
        references.push(split_words(&r.report).join(" "));
    }
    let m = text_metrics(&candidates, &references)?;
    Ok(GenerationReport {
        bleu4: m.bleu4,
        rouge_l: m.rouge_l,
        samples: test.len(),
        examples: candidates.into_iter().zip(references).take(3).collect(),
    })
}

/// Teacher-forced fine-tuning of the image encoder and decoder pathway.
pub fn finetune_generation(
    model: &GkModel,
    train: &[SampleRecord],
    test: &[SampleRecord],
    grounding: Grounding,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(GkModel, GenerationReport)> {
    cfg.validate()?;
    let mut tuned = model.clone();
    let params = trainable(&tuned, &["img.", "mm."]);
    let samples: Vec<&SampleRecord> = train.iter().collect();
    train_loop(&mut tuned, &samples, cfg, &params, seed, |m, g, batch| {
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::new();
        for r in batch {
            let enc = m.image.forward(g, &r.image)?;
            let memory = m.downstream_memory(g, r, enc.v, grounding)?;
            let (input, tgt) = teacher_forcing_pair(&m.report_body(&r.report), m.encoder.max_text_len);
            rows.push(m.backbone.decode_logits(g, &input, memory, None)?);
            targets.extend(tgt);
        }
        let logits = g.concat_rows(&rows);
        lm_loss(g, logits, &targets, &vec![true; targets.len()])
    })?;
    let report = evaluate_generation(&tuned, test, grounding, cfg.max_decode_len)?;
    Ok((tuned, report))
}
