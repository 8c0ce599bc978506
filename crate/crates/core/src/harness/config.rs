use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::records::DEFAULT_REGION_CAP;
use crate::data::SynthConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::schedule::Decay;
use crate::model::{HeadInit, ModelConfig};
use crate::numerics::AdamConfig;
use crate::pretraining::MaskingConfig;
use crate::retrieval::RetrievalConfig;
use crate::vcr::DEFAULT_BUDGET;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Pretrain,
    FinetuneRetrieval,
    FinetuneVcr,
}

/// Multipliers of the pretraining terms; all 1 gives the plain gated sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mlm: f64,
    pub moc: f64,
    pub vlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mlm: 1.0, moc: 1.0, vlm: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VcrTrainConfig {
    /// Regions kept after aligning ground-truth boxes.
    pub region_budget: usize,
}

impl Default for VcrTrainConfig {
    fn default() -> Self {
        VcrTrainConfig { region_budget: DEFAULT_BUDGET }
    }
}

/// Everything a run needs besides data paths. Loaded from TOML; every field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub seed: u64,
    pub epochs: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches per optimizer update.
    pub accumulation_steps: usize,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub decay: Decay,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub region_cap: usize,
    pub init_std: f64,
    pub head_init: HeadInit,
    /// Evaluate on the training set every this many epochs (0 = never).
    pub eval_every: usize,
    /// Stop once a training-set evaluation is perfect.
    pub early_stop: bool,
    pub init_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub loss_weights: LossWeights,
    pub masking: MaskingConfig,
    pub retrieval: RetrievalConfig,
    pub vcr: VcrTrainConfig,
    /// Corpus used when data is `synthetic`.
    pub synthetic: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Pretrain,
            seed: 0,
            epochs: 10,
            batch_size: 8,
            accumulation_steps: 1,
            base_lr: 1e-4,
            warmup_fraction: 0.1,
            decay: Decay::Linear,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            region_cap: DEFAULT_REGION_CAP,
            init_std: 0.02,
            head_init: HeadInit::Normal,
            eval_every: 0,
            early_stop: false,
            init_checkpoint: None,
            out_dir: None,
            encoder: EncoderConfig::default(),
            loss_weights: LossWeights::default(),
            masking: MaskingConfig::default(),
            retrieval: RetrievalConfig::default(),
            vcr: VcrTrainConfig::default(),
            synthetic: SynthConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.accumulation_steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("batch_size and accumulation_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(self.base_lr >= 0.0) || self.region_cap == 0 {
            return Err(Error::Config("base_lr must be non-negative and region_cap positive".into()));
        }
        self.encoder.validate()?;
        self.masking.validate()?;
        self.retrieval.validate()
    }

    pub fn model_config(&self, vocab_size: usize, d_vis: usize, num_classes: usize) -> ModelConfig {
        ModelConfig { init_std: self.init_std, ..ModelConfig::new(self.encoder.clone(), vocab_size, d_vis, num_classes) }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.adam_eps }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = TrainConfig::parse("task = \"finetune_retrieval\"\nepochs = 3\n[encoder]\nnum_layers = 1\nhidden_size = 16\nnum_heads = 2\nffn_size = 32\nmax_seq_len = 40\ndropout_rate = 0.0\n").unwrap();
        assert_eq!(cfg.task, Task::FinetuneRetrieval);
        assert_eq!(cfg.encoder.hidden_size, 16);
        assert_eq!(cfg.warmup_fraction, 0.1);
        assert_eq!(TrainConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(TrainConfig::parse("accumulation_steps = 0").is_err());
        assert!(TrainConfig::parse("warmup_fraction = 1.0").is_err());
        assert!(TrainConfig::parse("unknown_key = 1").is_err());
    }
}
