use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::report::MetricReport;
use crate::autograd::Graph;
use crate::data_model::manifest::{load_manifest, MANIFEST_FILE};
use crate::data_model::record::{SampleRecord, Split};
use crate::downstream::{finetune_classification, finetune_generation, finetune_vqa, localization_probe, Task, FRACTIONS};
use crate::error::{Error, Result};
use crate::gk_fusion::Grounding;
use crate::model::{build_tokenizer, Ablation, GkModel};
use crate::objectives::derangement;
use crate::optim::AdamW;
use crate::params::{ParamId, ParamStore};

pub const CHECKPOINT_FILE: &str = "pretrain.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub itc: f64,
    pub itm: f64,
    pub lm: f64,
    pub ecls: f64,
    pub total: f64,
    pub itm_accuracy: f64,
}

pub struct PretrainOutcome {
    pub model: GkModel,
    pub log: Vec<StepLog>,
    pub rng: ChaCha8Rng,
    pub steps: usize,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint::from_model(cfg, &self.model, &self.rng, self.steps)
    }
}

fn first_non_finite_param(store: &ParamStore) -> Option<String> {
    store.iter().find(|(_, p)| !p.value.is_finite()).map(|(_, p)| p.name.clone())
}

/// Pre-trains a fresh model on `records` (all of them, regardless of split).
pub fn pretrain(cfg: &RunConfig, records: &[SampleRecord]) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if records.len() < cfg.batch_size {
        return Err(Error::Validation(format!(
            "{} pre-training samples cannot fill a batch of {}",
            records.len(),
            cfg.batch_size
        )));
    }
    let tokenizer = build_tokenizer(records);
    let mut model = GkModel::new(cfg.encoder.clone(), cfg.fusion.clone(), tokenizer, cfg.loss.itc_temperature, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let params: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(cfg.batch_size) {
            if step >= limit {
                break 'epochs;
            }
            let batch: Vec<&SampleRecord> = chunk.iter().map(|&i| &records[i]).collect();
            let perm = derangement(batch.len(), &mut rng)?;
            let lr = cfg.optimizer.lr_at(step, epoch);
            let (entry, grads) = {
                let mut g = Graph::with_params(&model.store);
                let losses = model.pretrain_batch(&mut g, &batch, cfg.ablation, &cfg.loss, &perm)?;
                let total = g.scalar(losses.total);
                let components = [("itc", losses.itc), ("itm", losses.itm), ("lm", losses.lm), ("ecls", losses.ecls)];
                if let Some((name, _)) = components.iter().find(|(_, v)| !v.is_finite()) {
                    let tensor = first_non_finite_param(&model.store).unwrap_or_else(|| format!("{name} loss"));
                    return Err(Error::NonFinite { tensor, step });
                }
                let entry = StepLog {
                    step,
                    epoch,
                    lr,
                    itc: losses.itc,
                    itm: losses.itm,
                    lm: losses.lm,
                    ecls: losses.ecls,
                    total,
                    itm_accuracy: losses.itm_correct as f64 / losses.itm_pairs as f64,
                };
                (entry, g.backward(losses.total))
            };
            opt.step(&mut model.store, &grads, &params, lr);
            model.clamp_temperature();
            if let Some(tensor) = first_non_finite_param(&model.store) {
                return Err(Error::NonFinite { tensor, step });
            }
            log::debug!(
                "step {step} total {:.4} itc {:.4} itm {:.4} lm {:.4} ecls {:.4}",
                entry.total,
                entry.itc,
                entry.itm,
                entry.lm,
                entry.ecls
            );
            log.push(entry);
            step += 1;
        }
    }
    Ok(PretrainOutcome { model, log, rng, steps: step })
}

pub fn load_records(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    load_manifest(&cfg.data_dir.join(MANIFEST_FILE))
}

pub fn split_of(records: &[SampleRecord], split: Split) -> Vec<SampleRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub fn loss_curve_csv(log: &[StepLog]) -> String {
    let mut out = String::from("step,epoch,lr,itc,itm,lm,ecls,total,itm_accuracy\n");
    for s in log {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            s.step, s.epoch, s.lr, s.itc, s.itm, s.lm, s.ecls, s.total, s.itm_accuracy
        ));
    }
    out
}

/// Pre-trains on the manifest's pretrain split and writes the checkpoint,
/// loss curve and final metrics under the output directory.
pub fn run_pretrain(cfg: &RunConfig) -> Result<(PretrainOutcome, PathBuf)> {
    let records = split_of(&load_records(cfg)?, Split::Pretrain);
    let outcome = pretrain(cfg, &records)?;
    let ckpt = cfg.out_dir.join(CHECKPOINT_FILE);
    outcome.checkpoint(cfg).save(&ckpt)?;
    let mut report = MetricReport::new("pretrain");
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        report.push("steps", outcome.steps as f64);
        report.push("total_first", first.total);
        report.push("total_last", last.total);
        for (k, v) in [("itc", last.itc), ("itm", last.itm), ("lm", last.lm), ("ecls", last.ecls), ("itm_accuracy", last.itm_accuracy)] {
            report.push(k, v);
        }
    }
    let dir = report.write(&cfg.out_dir)?;
    let curve = dir.join("loss_curve.csv");
    std::fs::write(&curve, loss_curve_csv(&outcome.log)).map_err(|e| Error::io(&curve, e))?;
    Ok((outcome, ckpt))
}

fn gk_hash(model: &GkModel) -> String {
    model.store.hash_prefix("gk.")
}

fn ensure_gk_untouched(before: &str, tuned: &GkModel) -> Result<()> {
    if gk_hash(tuned) != before {
        return Err(Error::Validation("fine-tuning modified grounding-module parameters".into()));
    }
    Ok(())
}

fn fraction_key(fraction: f64) -> String {
    format!("{}", (fraction * 100.0).round() as usize)
}

/// Fine-tunes and evaluates one downstream task from a pre-trained model.
/// `fraction` applies to classification only; without it all three label
/// fractions are run.
pub fn finetune_task(
    cfg: &RunConfig,
    model: &GkModel,
    grounding: Grounding,
    task: Task,
    fraction: Option<f64>,
    train: &[SampleRecord],
    test: &[SampleRecord],
) -> Result<MetricReport> {
    if fraction.is_some() && task != Task::Cls {
        return Err(Error::Config(format!("--fraction only applies to cls, not {}", task.as_str())));
    }
    let before = gk_hash(model);
    let ft = &cfg.finetune;
    let mut report = MetricReport::new(format!("finetune_{}", task.as_str()));
    match task {
        Task::Cls => {
            let fractions: Vec<f64> = fraction.map_or(FRACTIONS.to_vec(), |f| vec![f]);
            for f in fractions {
                let (tuned, r) = finetune_classification(model, train, test, f, ft, cfg.seed)?;
                ensure_gk_untouched(&before, &tuned)?;
                report.push(format!("auroc_{}", fraction_key(f)), r.mean_auroc);
                report.attach(format!("per_entity_{}", fraction_key(f)), json!(r.per_entity));
            }
        }
        Task::Loc => {
            let (_, r) = localization_probe(model, train, test, grounding, ft)?;
            report.push("accuracy", r.accuracy);
            report.push("map50", r.map);
            report.push("samples", r.samples as f64);
        }
        Task::Gen => {
            let (tuned, r) = finetune_generation(model, train, test, grounding, ft, cfg.seed)?;
            ensure_gk_untouched(&before, &tuned)?;
            report.push("bleu4", r.bleu4);
            report.push("rouge_l", r.rouge_l);
            report.attach("examples", json!(r.examples));
        }
        Task::Vqa => {
            let (tuned, r) = finetune_vqa(model, train, test, ft, cfg.seed)?;
            ensure_gk_untouched(&before, &tuned)?;
            report.push("open_acc", r.open_acc);
            report.push("closed_acc", r.closed_acc);
            report.push("overall_acc", r.overall_acc);
        }
    }
    report.push("gk_hash_unchanged", 1.0);
    Ok(report)
}

/// CLI entry: loads the checkpoint and manifest, fine-tunes on the train
/// split, evaluates on the test split and writes the metric report.
pub fn run_finetune(cfg: &RunConfig, task: Task, fraction: Option<f64>, checkpoint: &Path) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let records = load_records(cfg)?;
    let train = split_of(&records, Split::Train);
    let test = split_of(&records, Split::Test);
    let report = finetune_task(cfg, &model, ckpt.config.ablation.grounding, task, fraction, &train, &test)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

/// Pre-training losses, matching accuracy and grounding mass of a
/// checkpoint on the test split.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<MetricReport> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let test = split_of(&load_records(cfg)?, Split::Test);
    let report = evaluate_pretrained(&model, &ckpt.config, &test)?;
    report.write(&cfg.out_dir)?;
    Ok(report)
}

pub fn evaluate_pretrained(model: &GkModel, cfg: &RunConfig, records: &[SampleRecord]) -> Result<MetricReport> {
    let bs = cfg.batch_size.min(records.len());
    if bs < 2 {
        return Err(Error::Validation("evaluation needs at least 2 samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sums = [0.0; 4];
    let (mut correct, mut pairs, mut batches) = (0, 0, 0);
    for chunk in records.chunks_exact(bs) {
        let batch: Vec<&SampleRecord> = chunk.iter().collect();
        let perm = derangement(bs, &mut rng)?;
        let mut g = Graph::with_params(&model.store);
        g.set_frozen(true);
        let l = model.pretrain_batch(&mut g, &batch, cfg.ablation, &cfg.loss, &perm)?;
        for (s, v) in sums.iter_mut().zip([l.itc, l.itm, l.lm, l.ecls]) {
            *s += v;
        }
        correct += l.itm_correct;
        pairs += l.itm_pairs;
        batches += 1;
    }
    let mut report = MetricReport::new("eval");
    for (k, s) in ["itc", "itm", "lm", "ecls"].iter().zip(sums) {
        report.push(*k, s / batches as f64);
    }
    report.push("itm_accuracy", correct as f64 / pairs as f64);
    if cfg.ablation.grounding == Grounding::CrossAttention {
        let g = model.grounding_mass(records)?;
        report.push("grounding_mass", g.mass);
        report.push("grounding_baseline", g.baseline);
        report.push("grounding_ratio", g.ratio);
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Mean AUROC at 1%, 10% and 100% of the labels.
    pub auroc: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "ECLS,Concat,CA,BLEU4,ROUGE_L,AUROC_1%,AUROC_10%,AUROC_100%";

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mark = |b: bool| if b { "x" } else { "-" };
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
                mark(r.ablation.ecls),
                mark(r.ablation.grounding == Grounding::Concat),
                mark(r.ablation.grounding == Grounding::CrossAttention),
                r.bleu4,
                r.rouge_l,
                r.auroc[0],
                r.auroc[1],
                r.auroc[2]
            ));
        }
        out
    }

    /// Writes `ablation.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("ablation.csv");
        std::fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// One ablation row: pre-train with the row's toggles, then fine-tune
/// generation and classification at the three label fractions.
pub fn ablation_row(cfg: &RunConfig, ablation: Ablation, records: &[SampleRecord]) -> Result<AblationRow> {
    let mut row_cfg = cfg.clone();
    row_cfg.ablation = ablation;
    let pre = pretrain(&row_cfg, &split_of(records, Split::Pretrain))?;
    let train = split_of(records, Split::Train);
    let test = split_of(records, Split::Test);
    let gen = finetune_task(&row_cfg, &pre.model, ablation.grounding, Task::Gen, None, &train, &test)?;
    let cls = finetune_task(&row_cfg, &pre.model, ablation.grounding, Task::Cls, None, &train, &test)?;
    let auroc = |f: f64| cls.get(&format!("auroc_{}", fraction_key(f))).unwrap_or(f64::NAN);
    Ok(AblationRow {
        ablation,
        bleu4: gen.get("bleu4").unwrap_or(f64::NAN),
        rouge_l: gen.get("rouge_l").unwrap_or(f64::NAN),
        auroc: [auroc(FRACTIONS[0]), auroc(FRACTIONS[1]), auroc(FRACTIONS[2])],
    })
}

pub fn run_ablation(cfg: &RunConfig, records: &[SampleRecord]) -> Result<AblationTable> {
    let rows = Ablation::GRID
        .iter()
        .map(|&a| {
            log::info!("ablation row ecls={} grounding={}", a.ecls, a.grounding.as_str());
            ablation_row(cfg, a, records)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable { rows })
}
