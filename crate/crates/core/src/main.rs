use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gkvlp::data_model::save_manifest;
use gkvlp::downstream::Task;
use gkvlp::harness::{load_records, run_ablation, run_eval, run_finetune, run_pretrain, RunConfig};
use gkvlp::synthgen::generate_dataset;

#[derive(Parser)]
#[command(name = "gkvlp", version, about = "Grounded knowledge-enhanced vision-language pre-training on synthetic chest X-rays")]
struct Cli {
    /// `key = value` config file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Extra overrides, e.g. `--set train.epochs=3`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the data directory.
    GenSynthetic,
    /// Pre-train on the pretrain split and write a checkpoint.
    Pretrain,
    /// Fine-tune and evaluate one downstream task.
    Finetune {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Label percentage for classification; all three when omitted.
        #[arg(long, value_parser = ["1", "10", "100"])]
        fraction: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-training losses and grounding mass of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the six-row ablation grid and write `ablation.csv`.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Cls,
    Loc,
    Gen,
    Vqa,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Cls => Task::Cls,
            TaskArg::Loc => Task::Loc,
            TaskArg::Gen => Task::Gen,
            TaskArg::Vqa => Task::Vqa,
        }
    }
}

fn build_config(cli: &Cli) -> gkvlp::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| gkvlp::Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> gkvlp::Result<()> {
    let cfg = build_config(&cli)?;
    let default_ckpt = || cfg.out_dir.join(gkvlp::harness::CHECKPOINT_FILE);
    match cli.command {
        Command::GenSynthetic => {
            let dir = cli.out.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let records = generate_dataset(&cfg.synth)?;
            let path = save_manifest(&dir, &records)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }
        Command::Pretrain => {
            let (outcome, ckpt) = run_pretrain(&cfg)?;
            if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
                println!("steps {} total {:.4} -> {:.4}", outcome.steps, first.total, last.total);
            }
            println!("checkpoint {}", ckpt.display());
        }
        Command::Finetune { task, fraction, checkpoint } => {
            let fraction = fraction.map(|f| f.parse::<f64>().expect("validated by clap") / 100.0);
            let report = run_finetune(&cfg, task.into(), fraction, &checkpoint.unwrap_or_else(default_ckpt))?;
            print!("{}", report.to_text());
        }
        Command::Eval { checkpoint } => {
            let report = run_eval(&cfg, &checkpoint.unwrap_or_else(default_ckpt))?;
            print!("{}", report.to_text());
        }
        Command::Ablate => {
            let table = run_ablation(&cfg, &load_records(&cfg)?)?;
            table.write(&cfg.out_dir)?;
            print!("{}", table.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
