use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auroc;
use super::{subsample, train_loop, trainable, FinetuneConfig};
use crate::autograd::{Graph, Var};
use crate::data_model::atlas::NUM_ENTITIES;
use crate::data_model::record::SampleRecord;
use crate::error::{Error, Result};
use crate::model::GkModel;
use crate::nn::{Init, Linear};
use crate::objectives::cross_entropy;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub fraction: f64,
    pub train_samples: usize,
    /// `None` where the test split lacks one of the classes.
    pub per_entity: Vec<Option<f64>>,
    pub mean_auroc: f64,
}

/// Mean binary cross-entropy of `1 × C` logits against `labels`.
pub fn binary_cross_entropy(g: &mut Graph, logits: Var, labels: &[bool]) -> Var {
    let c = labels.len();
    let column = g.transpose(logits);
    let zeros = g.constant(Matrix::zeros(c, 1));
    let pairs = g.concat_cols(&[zeros, column]);
    let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    cross_entropy(g, pairs, &targets, &vec![1.0; c])
}

fn logits(model: &GkModel, head: &Linear, g: &mut Graph, record: &SampleRecord) -> Result<Var> {
    let enc = model.image.forward(g, &record.image)?;
    Ok(head.forward(g, enc.z_raw))
}

/// Trains a linear head on the image class-token projection (and the image
/// encoder) using `fraction` of `train`, then reports per-entity AUROC on
/// `test`.
pub fn finetune_classification(
    model: &GkModel,
    train: &[SampleRecord],
    test: &[SampleRecord],
    fraction: f64,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<(GkModel, ClassificationReport)> {
    cfg.validate()?;
    let picked = subsample(train.len(), fraction, seed)?;
    let samples: Vec<&SampleRecord> = picked.iter().map(|&i| &train[i]).collect();
    let mut tuned = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = Init {
        store: &mut tuned.store,
        rng: &mut rng,
    }
    .linear("head.cls", model.encoder.projection_dim, NUM_ENTITIES);
    let params = trainable(&tuned, &["img.", "head.cls"]);
    train_loop(&mut tuned, &samples, cfg, &params, seed, |m, g, batch| {
        let terms = batch
            .iter()
            .map(|r| {
                let l = logits(m, &head, g, r)?;
                Ok((1.0 / batch.len() as f64, binary_cross_entropy(g, l, &r.label_vector)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(g.weighted_sum(&terms))
    })?;

    let mut scores: Vec<Vec<f64>> = (0..NUM_ENTITIES).map(|_| Vec::with_capacity(test.len())).collect();
    for r in test {
        let mut g = Graph::with_params(&tuned.store);
        g.set_frozen(true);
        let l = logits(&tuned, &head, &mut g, r)?;
        for (d, s) in scores.iter_mut().enumerate() {
            s.push(g.value(l)[(0, d)]);
        }
    }
    let per_entity: Vec<Option<f64>> = (0..NUM_ENTITIES)
        .map(|d| {
            let labels: Vec<bool> = test.iter().map(|r| r.label_vector[d]).collect();
            match auroc(&scores[d], &labels) {
                Ok(a) => Ok(Some(a)),
                Err(Error::UndefinedMetric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let defined: Vec<f64> = per_entity.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedMetric("no entity has both classes in the test split".into()));
    }
    let report = ClassificationReport {
        fraction,
        train_samples: samples.len(),
        mean_auroc: defined.iter().sum::<f64>() / defined.len() as f64,
        per_entity,
    };
    Ok((tuned, report))
}
