use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{train_loop, trainable, FinetuneConfig};
use crate::autograd::{Graph, Var};
use crate::data_model::atlas::{ANSWER_NO, NUM_ANSWERS};
use crate::data_model::record::SampleRecord;
use crate::encoders::ENC;
use crate::error::Result;
use crate::model::GkModel;
use crate::nn::{Init, Linear};
use crate::objectives::cross_entropy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaReport {
    /// Region ("where") questions.
    pub open_acc: f64,
    /// Yes/no questions.
    pub closed_acc: f64,
    pub overall_acc: f64,
    pub open_count: usize,
    pub closed_count: usize,
}

/// Accuracies from `(predicted, true)` answer classes; yes/no answers are
/// the closed questions.
pub fn vqa_accuracy(pairs: &[(usize, usize)]) -> VqaReport {
    let (mut open, mut open_ok, mut closed, mut closed_ok) = (0, 0, 0, 0);
    for &(pred, truth) in pairs {
        if truth <= ANSWER_NO {
            closed += 1;
            closed_ok += (pred == truth) as usize;
        } else {
            open += 1;
            open_ok += (pred == truth) as usize;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    VqaReport {
        open_acc: ratio(open_ok, open),
        closed_acc: ratio(closed_ok, closed),
        overall_acc: ratio(open_ok + closed_ok, open + closed),
        open_count: open,
        closed_count: closed,
    }
}

/// Answer logits for every question of `record`, `Q × NUM_ANSWERS`.
fn answer_logits(model: &GkModel, head: &Linear, g: &mut Graph, record: &SampleRecord) -> Result<Var> {
    let enc = model.image.forward(g, &record.image)?;
    let rows = record
        .qa_pairs
        .iter()
        .map(|qa| {
            let out = model.backbone.image_report_encode(g, &model.sequence(&qa.question, ENC), enc.v)?;
            Ok(g.slice_rows(out.z_it, 0, 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let states = g.concat_rows(&rows);
    Ok(head.forward(g, states))
}

/// Fine-tunes the image encoder, the image-report encoder pathway and an
/// answer head, then scores `test`.
pub fn finetune_vqa(model: &GkModel, train: &[SampleRecord], test: &[SampleRecord], cfg: &FinetuneConfig, seed: u64) -> Result<(GkModel, VqaReport)> {
    cfg.validate()?;
    let mut tuned = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Init {
        store: &mut tuned.store,
        rng: &mut rng,
    }
    .linear("head.vqa", model.encoder.hidden_dim, NUM_ANSWERS);
    let params = trainable(&tuned, &["img.", "mm.", "head.vqa"]);
    let samples: Vec<&SampleRecord> = train.iter().filter(|r| !r.qa_pairs.is_empty()).collect();
    train_loop(&mut tuned, &samples, cfg, &params, seed, |m, g, batch| {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for r in batch {
            rows.push(answer_logits(m, &head, g, r)?);
            targets.extend(r.qa_pairs.iter().map(|qa| qa.answer));
        }
        let logits = g.concat_rows(&rows);
        Ok(cross_entropy(g, logits, &targets, &vec![1.0; targets.len()]))
    })?;

    let mut pairs = Vec::new();
    for r in test.iter().filter(|r| !r.qa_pairs.is_empty()) {
        let mut g = Graph::with_params(&tuned.store);
        g.set_frozen(true);
        let l = answer_logits(&tuned, &head, &mut g, r)?;
        for (i, qa) in r.qa_pairs.iter().enumerate() {
            pairs.push((g.value(l).argmax_row(i), qa.answer));
        }
    }
    Ok((tuned, vqa_accuracy(&pairs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overall_is_the_pooled_accuracy() {
        let pairs = [(0, 0), (1, 0), (1, 1), (5, 5), (6, 7)];
        let r = vqa_accuracy(&pairs);
        assert_eq!(r.closed_count, 3);
        assert_eq!(r.open_count, 2);
        let pooled = (r.open_count as f64 * r.open_acc + r.closed_count as f64 * r.closed_acc) / 5.0;
        assert_eq!(r.overall_acc, pooled);
        assert_eq!(r.overall_acc, 0.6);
    }

    #[test]
    fn oracle_and_majority_baselines() {
        let oracle: Vec<(usize, usize)> = [0, 1, 3, 9].iter().map(|&a| (a, a)).collect();
        let r = vqa_accuracy(&oracle);
        assert_eq!((r.open_acc, r.closed_acc, r.overall_acc), (1.0, 1.0, 1.0));
        let majority = vqa_accuracy(&[(0, 0), (0, 1), (0, 0), (0, 1)]);
        assert_eq!(majority.closed_acc, 0.5);
    }
}
