//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --release --test acceptance -- 4 6`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::{grad, oracles, structure};
use gkvlp::data_model::{SampleRecord, Split};
use gkvlp::downstream::{finetune_classification, Task, FRACTIONS};
use gkvlp::harness::{finetune_task, pretrain, run_ablation, split_of, AblationTable, PretrainOutcome, RunConfig};
use gkvlp::gk_fusion::Grounding;
use gkvlp::model::Ablation;
use gkvlp::synthgen::generate_dataset;

type Outcome = Result<String, String>;
type Criterion = (usize, &'static str, fn() -> Outcome);

const MODEL: [(&str, &str); 6] = [
    ("encoder.hidden_dim", "32"),
    ("encoder.projection_dim", "32"),
    ("encoder.region_dim", "32"),
    ("encoder.prompt_dim", "32"),
    ("encoder.max_text_len", "96"),
    ("train.batch_size", "8"),
];

const OVERFIT: [(&str, &str); 9] = [
    ("synth.num_samples", "8"),
    ("synth.split_fractions", "1,0,0,0"),
    ("train.epochs", "1000"),
    ("train.max_steps", "200"),
    ("optimizer.lr", "1e-3"),
    ("optimizer.warmup_steps", "10"),
    ("optimizer.decay_rate", "1.0"),
    ("ablation.ecls", "off"),
    ("seed", "0"),
];

/// 256 pre-training, 704 fine-tuning and 64 held-out samples.
const SHARED: [(&str, &str); 6] = [
    ("synth.num_samples", "1024"),
    ("synth.split_fractions", "0.25,0.6875,0,0.0625"),
    ("train.epochs", "20"),
    ("optimizer.lr", "3e-3"),
    ("optimizer.warmup_steps", "100"),
    ("optimizer.decay_rate", "0.9"),
];

const CLS: [(&str, &str); 2] = [("finetune.epochs", "40"), ("finetune.lr", "3e-3")];
const GEN: [(&str, &str); 2] = [("finetune.epochs", "10"), ("finetune.lr", "3e-3")];
const VQA: [(&str, &str); 3] = [("finetune.epochs", "60"), ("finetune.lr", "3e-3"), ("finetune.decay_rate", "0.97")];

/// Small grid for the row layout and determinism checks: 64 pre-training,
/// 64 fine-tuning and 32 held-out samples per row.
const ABLATION: [(&str, &str); 7] = [
    ("synth.num_samples", "160"),
    ("synth.split_fractions", "0.4,0.4,0,0.2"),
    ("train.epochs", "10"),
    ("optimizer.lr", "3e-3"),
    ("optimizer.warmup_steps", "20"),
    ("finetune.epochs", "10"),
    ("finetune.lr", "3e-3"),
];

fn config(layers: &[&[(&str, &str)]]) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in layers.iter().flat_map(|l| l.iter()) {
        if *k == "seed" {
            cfg.seed = v.parse().unwrap();
        } else {
            cfg.set(k, v).unwrap();
        }
    }
    cfg.validate().unwrap();
    cfg
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    if elapsed < limit {
        Ok(())
    } else {
        Err(format!("took {elapsed:.1?}, limit {limit:?}"))
    }
}

fn loss_oracles() -> Outcome {
    let t = Instant::now();
    let all = oracles::loss_oracles();
    oracles::check(&all)?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("{} closed-form values", all.len()))
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let checks: [fn(); 11] = [
        grad::itc_gradients,
        grad::itm_gradients,
        grad::lm_gradients,
        grad::weighted_cross_entropy_gradients,
        grad::ecls_gradients,
        grad::binary_cross_entropy_gradients,
        grad::total_loss_gradients,
        grad::pretraining_gradients_cross_attention_with_ecls,
        grad::pretraining_gradients_concat_grounding,
        grad::pretraining_gradients_without_grounding,
        grad::each_loss_alone_drives_its_parameters,
    ];
    for check in checks {
        check();
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!("{} suites", checks.len()))
}

fn invariants() -> Outcome {
    let checks: [fn(); 8] = [
        structure::fusion_attention_rows_are_stochastic,
        structure::fuse_local_ignores_prompt_token_order,
        structure::fuse_global_ignores_region_order,
        structure::decoder_is_causal,
        structure::frozen_prompt_and_entity_branches_pass_no_gradient,
        structure::checkpoint_round_trip_is_exact,
        structure::damaged_checkpoints_are_rejected,
        structure::ungrounded_pretraining_never_touches_fusion,
    ];
    for check in checks {
        check();
    }
    Ok(format!("{} invariants", checks.len()))
}

fn overfit() -> Outcome {
    let cfg = config(&[&MODEL, &OVERFIT]);
    let data = generate_dataset(&cfg.synth).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let out = pretrain(&cfg, &data).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let (first, last) = (out.log.first().unwrap(), out.log.last().unwrap());
    let drop = 1.0 - last.total / first.total;
    let full = out.log.iter().find(|s| s.itm_accuracy == 1.0).map(|s| s.step);
    let detail = format!("{} steps, total {:.4} -> {:.4} ({:.1}% drop), itm 100% first at step {full:?}, final itm {:.3}", out.steps, first.total, last.total, 100.0 * drop, last.itm_accuracy);
    within(elapsed, Duration::from_secs(300))?;
    if out.steps == 200 && drop >= 0.9 && full.is_some() {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct Shared {
    cfg: RunConfig,
    pre: PretrainOutcome,
    pre_records: Vec<SampleRecord>,
    train: Vec<SampleRecord>,
    test: Vec<SampleRecord>,
}

fn shared() -> Result<&'static Shared, String> {
    static CELL: OnceLock<Result<Shared, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = config(&[&MODEL, &SHARED]);
        let data = generate_dataset(&cfg.synth).map_err(|e| e.to_string())?;
        let t = Instant::now();
        let pre_records = split_of(&data, Split::Pretrain);
        let pre = pretrain(&cfg, &pre_records).map_err(|e| e.to_string())?;
        println!("  pre-trained on 256 samples in {:.1?}", t.elapsed());
        Ok(Shared {
            train: split_of(&data, Split::Train),
            test: split_of(&data, Split::Test),
            cfg,
            pre,
            pre_records,
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn with(base: &RunConfig, layer: &[(&str, &str)]) -> RunConfig {
    let mut cfg = base.clone();
    for (k, v) in layer {
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn grounding() -> Outcome {
    let s = shared()?;
    let g = s.pre.model.grounding_mass(&s.test).map_err(|e| e.to_string())?;
    let detail = format!("mass {:.4} vs uniform {:.4}, ratio {:.3} over {} region-sentence pairs", g.mass, g.baseline, g.ratio, g.pairs);
    if g.ratio >= 2.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn classification() -> Outcome {
    let s = shared()?;
    let cfg = with(&s.cfg, &CLS);
    let mut medians = Vec::new();
    for f in FRACTIONS {
        let runs = (0..3)
            .map(|seed| finetune_classification(&s.pre.model, &s.train, &s.test, f, &cfg.finetune, seed).map(|(_, r)| r.mean_auroc))
            .collect::<gkvlp::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        medians.push(median(runs));
    }
    let detail = format!("median AUROC 1%/10%/100% = {:.4}/{:.4}/{:.4}", medians[0], medians[1], medians[2]);
    let trend = medians.windows(2).all(|w| w[1] >= w[0] - 0.02);
    if medians[2] >= 0.95 && trend {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn localization() -> Outcome {
    let s = shared()?;
    let r = finetune_task(&s.cfg, &s.pre.model, s.cfg.ablation.grounding, Task::Loc, None, &s.train, &s.test).map_err(|e| e.to_string())?;
    let (acc, map) = (r.get("accuracy").unwrap(), r.get("map50").unwrap());
    let detail = format!("accuracy {acc:.4}, mAP@0.5 {map:.4}");
    if acc >= 0.8 && map >= 0.8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn generation() -> Outcome {
    oracles::check(&oracles::text_oracles())?;
    let s = shared()?;
    let cfg = with(&s.cfg, &GEN);
    let r = finetune_task(&cfg, &s.pre.model, cfg.ablation.grounding, Task::Gen, None, &s.train, &s.test).map_err(|e| e.to_string())?;
    let (bleu, rouge) = (r.get("bleu4").unwrap(), r.get("rouge_l").unwrap());
    let detail = format!("bleu4 {bleu:.4}, rouge_l {rouge:.4}, text-metric oracles ok");
    if bleu >= 0.5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn vqa() -> Outcome {
    let s = shared()?;
    let cfg = with(&s.cfg, &VQA);
    let r = finetune_task(&cfg, &s.pre.model, cfg.ablation.grounding, Task::Vqa, None, &s.train, &s.test).map_err(|e| e.to_string())?;
    let (closed, open) = (r.get("closed_acc").unwrap(), r.get("open_acc").unwrap());
    let detail = format!("closed {closed:.4}, open {open:.4}");
    if closed >= 0.9 && open >= 0.7 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gen_bleu(s: &Shared, ablation: Ablation, seed: u64) -> Result<f64, String> {
    let mut cfg = with(&s.cfg, &GEN);
    cfg.seed = seed;
    cfg.ablation = ablation;
    let fresh;
    let model = if seed == s.cfg.seed && ablation == s.cfg.ablation {
        &s.pre.model
    } else {
        fresh = pretrain(&cfg, &s.pre_records).map_err(|e| e.to_string())?;
        &fresh.model
    };
    let r = finetune_task(&cfg, model, ablation.grounding, Task::Gen, None, &s.train, &s.test).map_err(|e| e.to_string())?;
    Ok(r.get("bleu4").unwrap())
}

fn ablation() -> Outcome {
    let base = config(&[&MODEL, &ABLATION]);
    let data = generate_dataset(&base.synth).map_err(|e| e.to_string())?;
    let table = run_ablation(&base, &data).map_err(|e| e.to_string())?;
    let rows: Vec<Ablation> = table.rows.iter().map(|r| r.ablation).collect();
    if rows != Ablation::GRID || table.to_csv().lines().count() != 7 {
        return Err(format!("unexpected rows {rows:?}"));
    }
    let again: AblationTable = run_ablation(&base, &data).map_err(|e| e.to_string())?;
    if again != table {
        return Err("ablation table differs between identical runs".into());
    }

    let s = shared()?;
    let best = Ablation { ecls: true, grounding: Grounding::CrossAttention };
    let baseline = Ablation { ecls: false, grounding: Grounding::None };
    let mut pairs = Vec::new();
    for seed in 0..3 {
        pairs.push((gen_bleu(s, best, seed)?, gen_bleu(s, baseline, seed)?));
    }
    let detail = pairs.iter().enumerate().map(|(s, (b, n))| format!("seed {s}: {b:.4} vs {n:.4}")).collect::<Vec<_>>().join(", ");
    if pairs.iter().all(|(b, n)| b >= n) {
        Ok(format!("6 rows, deterministic; ECLS+CA vs baseline bleu4 {detail}"))
    } else {
        Err(format!("6 rows, deterministic; ECLS+CA vs baseline bleu4 {detail}"))
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "loss oracles", loss_oracles),
        (2, "finite-difference gradients", gradients),
        (3, "structural invariants", invariants),
        (4, "overfit", overfit),
        (5, "grounding", grounding),
        (6, "classification", classification),
        (7, "localization", localization),
        (8, "generation", generation),
        (9, "vqa", vqa),
        (10, "ablation", ablation),
    ];
    let chosen: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !chosen.is_empty() && !chosen.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = t.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail} [{elapsed:.1?}]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
