use serde::{Deserialize, Serialize};

use super::metrics::average_precision;
use super::FinetuneConfig;
use crate::autograd::Graph;
use crate::data_model::atlas::NUM_REGIONS;
use crate::data_model::record::{BBox, SampleRecord};
use crate::error::{Error, Result};
use crate::gk_fusion::Grounding;
use crate::model::GkModel;
use crate::objectives::cross_entropy;
use crate::optim::{AdamW, OptimizerConfig};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const IOU_THRESHOLD: f64 = 0.5;

/// Shared linear scorer over standardized region features plus a bias per
/// region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub accuracy: f64,
    pub map: f64,
    pub samples: usize,
}

fn standardize(features: &Matrix, mean: &[f64], scale: &[f64]) -> Matrix {
    let mut out = features.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[c]) / scale[c];
        }
    }
    out
}

impl RegionProbe {
    /// Softmax probabilities over the 29 regions for `29 × d` features.
    pub fn probabilities(&self, features: &Matrix) -> Vec<f64> {
        let x = standardize(features, &self.mean, &self.scale);
        let scores: Vec<f64> = (0..x.rows())
            .map(|k| x.row(k).iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>() + self.bias[k])
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Most probable region, lowest index on ties, and its probability.
    pub fn predict(&self, features: &Matrix) -> (usize, f64) {
        let p = self.probabilities(features);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        (best, p[best])
    }
}

/// Full-batch softmax regression of the planted region on `29 × d`
/// features.
pub fn train_region_probe(samples: &[(Matrix, usize)], epochs: usize, lr: f64) -> Result<RegionProbe> {
    let Some((first, _)) = samples.first() else {
        return Err(Error::Validation("probe needs training samples".into()));
    };
    let d = first.cols();
    let rows = (samples.len() * NUM_REGIONS) as f64;
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    for (f, _) in samples {
        for r in 0..f.rows() {
            for (c, &v) in f.row(r).iter().enumerate() {
                mean[c] += v / rows;
                sq[c] += v * v / rows;
            }
        }
    }
    let scale: Vec<f64> = mean.iter().zip(&sq).map(|(m, s)| (s - m * m).max(0.0).sqrt().max(1e-8)).collect();
    let inputs: Vec<Matrix> = samples.iter().map(|(f, _)| standardize(f, &mean, &scale)).collect();

    let mut store = ParamStore::default();
    let w = store.add("probe.w", Matrix::zeros(d, 1), true);
    let b = store.add("probe.b", Matrix::zeros(NUM_REGIONS, 1), false);
    let mut opt = AdamW::new(OptimizerConfig {
        lr,
        weight_decay: 1e-3,
        warmup_steps: 0,
        decay_rate: 1.0,
        ..OptimizerConfig::default()
    });
    let targets: Vec<usize> = samples.iter().map(|s| s.1).collect();
    for _ in 0..epochs {
        let grads = {
            let mut g = Graph::with_params(&store);
            let (wv, bv) = (g.param(w), g.param(b));
            let rows = inputs
                .iter()
                .map(|x| {
                    let x = g.constant(x.clone());
                    let s = g.matmul(x, wv);
                    let s = g.add(s, bv);
                    g.transpose(s)
                })
                .collect::<Vec<_>>();
            let logits = g.concat_rows(&rows);
            let loss = cross_entropy(&mut g, logits, &targets, &vec![1.0; targets.len()]);
            g.backward(loss)
        };
        opt.step(&mut store, &grads, &[w, b], lr);
    }
    Ok(RegionProbe {
        mean,
        scale,
        weights: store.value(w).data().to_vec(),
        bias: store.value(b).data().to_vec(),
    })
}

/// Accuracy of the argmax region and one-class AP@0.5 of the emitted atlas
/// boxes scored by probe confidence.
pub fn evaluate_probe(probe: &RegionProbe, samples: &[(Matrix, usize)], boxes: &[Vec<BBox>]) -> LocalizationReport {
    let mut correct = 0;
    let mut detections = Vec::with_capacity(samples.len());
    for ((features, truth), b) in samples.iter().zip(boxes) {
        let (k, conf) = probe.predict(features);
        correct += (k == *truth) as usize;
        detections.push((conf, b[k].iou(&b[*truth]) >= IOU_THRESHOLD));
    }
    let n = samples.len();
    LocalizationReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        map: average_precision(&detections, n),
        samples: n,
    }
}

fn single_finding(records: &[SampleRecord]) -> Vec<(&SampleRecord, usize)> {
    records
        .iter()
        .filter_map(|r| {
            let mut pos = r.prompt.positives();
            match (pos.next(), pos.next()) {
                (Some(t), None) if t.regions.len() == 1 => Some((r, t.regions[0])),
                _ => None,
            }
        })
        .collect()
}

type ProbeData = (Vec<(Matrix, usize)>, Vec<Vec<BBox>>);

/// Trains the region probe on frozen fused features of single-finding
/// samples in `train` and evaluates it on those of `test`.
pub fn localization_probe(model: &GkModel, train: &[SampleRecord], test: &[SampleRecord], grounding: Grounding, cfg: &FinetuneConfig) -> Result<(RegionProbe, LocalizationReport)> {
    let featurize = |records: &[SampleRecord]| -> Result<ProbeData> {
        let picked = single_finding(records);
        let feats = picked
            .iter()
            .map(|(r, k)| Ok((model.region_features(r, grounding)?, *k)))
            .collect::<Result<Vec<_>>>()?;
        Ok((feats, picked.iter().map(|(r, _)| r.region_boxes.clone()).collect()))
    };
    let (train_feats, _) = featurize(train)?;
    let (test_feats, test_boxes) = featurize(test)?;
    if test_feats.is_empty() {
        return Err(Error::UndefinedMetric("no single-finding test samples".into()));
    }
    let probe = train_region_probe(&train_feats, cfg.probe_epochs, cfg.probe_lr)?;
    let report = evaluate_probe(&probe, &test_feats, &test_boxes);
    Ok((probe, report))
}
