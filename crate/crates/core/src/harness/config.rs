//! Run configuration and its flat `key = value` file format.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::downstream::FinetuneConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::gk_fusion::{FusionConfig, Grounding};
use crate::model::Ablation;
use crate::objectives::LossWeights;
use crate::optim::OptimizerConfig;
use crate::synthgen::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub synth: SynthConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops pre-training after this many updates when set.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub ablation: Ablation,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            synth: SynthConfig::default(),
            encoder: EncoderConfig::default(),
            fusion: FusionConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 8,
            epochs: 10,
            max_steps: None,
            seed: 0,
            ablation: Ablation::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` must be on or off, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.hidden_dim)?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.finetune.validate()?;
        self.synth.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.synth.image_size != self.encoder.image_size || self.synth.patch_size != self.encoder.patch_size {
            return Err(Error::Config("synthetic image and patch size must match the encoder".into()));
        }
        Ok(())
    }

    /// Assigns one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "paths.data" => self.data_dir = PathBuf::from(v),
            "paths.out" => self.out_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "synth.num_samples" => self.synth.num_samples = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "synth.max_entities_per_sample" => self.synth.max_entities_per_sample = parse(key, v)?,
            "synth.prob_normal" => self.synth.prob_normal = parse(key, v)?,
            "synth.split_fractions" => {
                let parts = v.split(',').map(|p| parse::<f64>(key, p.trim())).collect::<Result<Vec<_>>>()?;
                self.synth.split_fractions = parts
                    .try_into()
                    .map_err(|_| Error::Config("synth.split_fractions needs four values".into()))?;
            }
            "encoder.image_size" => {
                self.encoder.image_size = parse(key, v)?;
                self.synth.image_size = self.encoder.image_size;
            }
            "encoder.patch_size" => {
                self.encoder.patch_size = parse(key, v)?;
                self.synth.patch_size = self.encoder.patch_size;
            }
            "encoder.hidden_dim" => self.encoder.hidden_dim = parse(key, v)?,
            "encoder.projection_dim" => self.encoder.projection_dim = parse(key, v)?,
            "encoder.region_dim" => self.encoder.region_dim = parse(key, v)?,
            "encoder.prompt_dim" => self.encoder.prompt_dim = parse(key, v)?,
            "encoder.num_layers" => self.encoder.num_layers = parse(key, v)?,
            "encoder.num_heads" => self.encoder.num_heads = parse(key, v)?,
            "encoder.ffn_mult" => self.encoder.ffn_mult = parse(key, v)?,
            "encoder.max_text_len" => self.encoder.max_text_len = parse(key, v)?,
            "fusion.num_layers" => self.fusion.num_fusion_layers = parse(key, v)?,
            "fusion.num_heads" => self.fusion.num_heads = parse(key, v)?,
            "fusion.temperature" => self.fusion.temperature = parse(key, v)?,
            "loss.itm" => self.loss.itm = parse(key, v)?,
            "loss.lm" => self.loss.lm = parse(key, v)?,
            "loss.ecls" => self.loss.ecls = parse(key, v)?,
            "loss.itc_temperature" => self.loss.itc_temperature = parse(key, v)?,
            "optimizer.lr" => self.optimizer.lr = parse(key, v)?,
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse(key, v)?,
            "optimizer.warmup_steps" => self.optimizer.warmup_steps = parse(key, v)?,
            "optimizer.decay_rate" => self.optimizer.decay_rate = parse(key, v)?,
            "optimizer.max_grad_norm" => self.optimizer.max_grad_norm = parse(key, v)?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.max_steps" => {
                self.max_steps = match v {
                    "none" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "ablation.grounding" => self.ablation.grounding = v.parse::<Grounding>()?,
            "ablation.ecls" => self.ablation.ecls = parse_switch(key, v)?,
            "finetune.epochs" => self.finetune.epochs = parse(key, v)?,
            "finetune.batch_size" => self.finetune.batch_size = parse(key, v)?,
            "finetune.lr" => self.finetune.optimizer.lr = parse(key, v)?,
            "finetune.weight_decay" => self.finetune.optimizer.weight_decay = parse(key, v)?,
            "finetune.warmup_steps" => self.finetune.optimizer.warmup_steps = parse(key, v)?,
            "finetune.decay_rate" => self.finetune.optimizer.decay_rate = parse(key, v)?,
            "finetune.max_decode_len" => self.finetune.max_decode_len = parse(key, v)?,
            "finetune.probe_epochs" => self.finetune.probe_epochs = parse(key, v)?,
            "finetune.probe_lr" => self.finetune.probe_lr = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let f = &self.synth.split_fractions;
        vec![
            ("paths.data", self.data_dir.display().to_string()),
            ("paths.out", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("synth.num_samples", self.synth.num_samples.to_string()),
            ("synth.seed", self.synth.seed.to_string()),
            ("synth.max_entities_per_sample", self.synth.max_entities_per_sample.to_string()),
            ("synth.prob_normal", self.synth.prob_normal.to_string()),
            ("synth.split_fractions", format!("{},{},{},{}", f[0], f[1], f[2], f[3])),
            ("encoder.image_size", self.encoder.image_size.to_string()),
            ("encoder.patch_size", self.encoder.patch_size.to_string()),
            ("encoder.hidden_dim", self.encoder.hidden_dim.to_string()),
            ("encoder.projection_dim", self.encoder.projection_dim.to_string()),
            ("encoder.region_dim", self.encoder.region_dim.to_string()),
            ("encoder.prompt_dim", self.encoder.prompt_dim.to_string()),
            ("encoder.num_layers", self.encoder.num_layers.to_string()),
            ("encoder.num_heads", self.encoder.num_heads.to_string()),
            ("encoder.ffn_mult", self.encoder.ffn_mult.to_string()),
            ("encoder.max_text_len", self.encoder.max_text_len.to_string()),
            ("fusion.num_layers", self.fusion.num_fusion_layers.to_string()),
            ("fusion.num_heads", self.fusion.num_heads.to_string()),
            ("fusion.temperature", self.fusion.temperature.to_string()),
            ("loss.itm", self.loss.itm.to_string()),
            ("loss.lm", self.loss.lm.to_string()),
            ("loss.ecls", self.loss.ecls.to_string()),
            ("loss.itc_temperature", self.loss.itc_temperature.to_string()),
            ("optimizer.lr", self.optimizer.lr.to_string()),
            ("optimizer.weight_decay", self.optimizer.weight_decay.to_string()),
            ("optimizer.warmup_steps", self.optimizer.warmup_steps.to_string()),
            ("optimizer.decay_rate", self.optimizer.decay_rate.to_string()),
            ("optimizer.max_grad_norm", self.optimizer.max_grad_norm.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.max_steps", self.max_steps.map_or("none".into(), |s| s.to_string())),
            ("ablation.grounding", self.ablation.grounding.as_str().into()),
            ("ablation.ecls", if self.ablation.ecls { "on" } else { "off" }.into()),
            ("finetune.epochs", self.finetune.epochs.to_string()),
            ("finetune.batch_size", self.finetune.batch_size.to_string()),
            ("finetune.lr", self.finetune.optimizer.lr.to_string()),
            ("finetune.weight_decay", self.finetune.optimizer.weight_decay.to_string()),
            ("finetune.warmup_steps", self.finetune.optimizer.warmup_steps.to_string()),
            ("finetune.decay_rate", self.finetune.optimizer.decay_rate.to_string()),
            ("finetune.max_decode_len", self.finetune.max_decode_len.to_string()),
            ("finetune.probe_epochs", self.finetune.probe_epochs.to_string()),
            ("finetune.probe_lr", self.finetune.probe_lr.to_string()),
        ]
    }

    /// Applies `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("optimizer.lr", "1e-3").unwrap();
        cfg.set("ablation.grounding", "concat").unwrap();
        cfg.set("ablation.ecls", "off").unwrap();
        cfg.set("train.max_steps", "200").unwrap();
        cfg.set("synth.split_fractions", "0.25, 0.25, 0.25, 0.25").unwrap();
        assert_eq!(RunConfig::parse_str(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse_str("# desk run\noptimizer.lr = 3e-4 # paper value\n\nseed = 7\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.optimizer.lr, 3e-4);
        assert!(RunConfig::parse_str("seed 7").is_err());
        assert!(RunConfig::parse_str("nope = 1").is_err());
        assert!(RunConfig::parse_str("ablation.grounding = sideways").is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.optimizer.lr = 0.0;
        assert!(cfg.validate().is_err());
    }
}
