//! Fine-tuning heads and evaluation for classification, localization,
//! report generation and visual question answering.
//!
//! Fine-tuning updates backbone parameters and task heads only; the
//! grounding module runs frozen.

pub mod classification;
pub mod generation;
pub mod localization;
pub mod metrics;
pub mod vqa;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data_model::record::SampleRecord;
use crate::error::{Error, Result};
use crate::model::GkModel;
use crate::optim::{AdamW, OptimizerConfig};
use crate::params::ParamId;

pub use classification::{finetune_classification, ClassificationReport};
pub use generation::{evaluate_generation, finetune_generation, GenerationReport};
pub use localization::{evaluate_probe, localization_probe, train_region_probe, LocalizationReport, RegionProbe};
pub use metrics::{auroc, average_precision, text_metrics, TextMetrics};
pub use vqa::{finetune_vqa, vqa_accuracy, VqaReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Cls,
    Loc,
    Gen,
    Vqa,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" => Ok(Task::Cls),
            "loc" => Ok(Task::Loc),
            "gen" => Ok(Task::Gen),
            "vqa" => Ok(Task::Vqa),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Loc => "loc",
            Task::Gen => "gen",
            Task::Vqa => "vqa",
        }
    }
}

/// Label fractions evaluated for classification.
pub const FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub max_decode_len: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerConfig {
                warmup_steps: 10,
                ..OptimizerConfig::default()
            },
            max_decode_len: 64,
            probe_epochs: 300,
            probe_lr: 0.05,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("fine-tune batch size and decode length must be positive".into()));
        }
        self.optimizer.validate()
    }
}

/// Seed-deterministic subset of `n` indices covering `fraction` of them
/// (at least one).
pub fn subsample(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Parameters updated during fine-tuning: everything under `prefixes`,
/// never the grounding module.
pub fn trainable(model: &GkModel, prefixes: &[&str]) -> Vec<ParamId> {
    model
        .store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("gk.") && prefixes.iter().any(|pre| p.name.starts_with(pre)))
        .map(|(id, _)| id)
        .collect()
}

/// Mini-batch AdamW over `samples` with a task loss built per batch.
pub(crate) fn train_loop<F>(model: &mut GkModel, samples: &[&SampleRecord], cfg: &FinetuneConfig, params: &[ParamId], seed: u64, mut loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&GkModel, &mut Graph, &[&SampleRecord]) -> Result<Var>,
{
    if samples.is_empty() {
        return Err(Error::Validation("no fine-tuning samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let bs = cfg.batch_size.min(samples.len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(bs) {
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| samples[i]).collect();
            let grads = {
                let mut g = Graph::with_params(&model.store);
                let l = loss(model, &mut g, &batch)?;
                let value = g.scalar(l);
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        tensor: "fine-tune loss".into(),
                        step,
                    });
                }
                history.push(value);
                g.backward(l)
            };
            let lr = cfg.optimizer.lr_at(step, epoch);
            opt.step(&mut model.store, &grads, params, lr);
            step += 1;
        }
    }
    Ok(history)
}
