//! Configuration, training loops, checkpoints, reports and the ablation
//! runner behind the command-line tool.

pub mod checkpoint;
pub mod config;
pub mod report;
pub mod train;

pub use checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
pub use config::RunConfig;
pub use report::MetricReport;
pub use train::{
    ablation_row, evaluate_pretrained, finetune_task, load_records, pretrain, split_of, run_ablation, run_eval, run_finetune, run_pretrain, AblationRow, AblationTable,
    PretrainOutcome, StepLog, ABLATION_HEADER, CHECKPOINT_FILE,
};
