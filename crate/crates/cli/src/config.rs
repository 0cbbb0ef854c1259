//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cpriv_core::data::DatasetSpec;
use cpriv_core::evaluation::{validate_alphas, AttackBudget, EvalOptions};
use cpriv_core::models::SanitizerKind;
use cpriv_core::training::{LearningRates, PretrainConfig, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 0.05, 0.2, 0.5, 0.8];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Deterministic,
    Stochastic,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Deterministic => "deterministic",
            Architecture::Stochastic => "stochastic",
        }
    }

    pub fn kind(self) -> SanitizerKind {
        match self {
            Architecture::Deterministic => SanitizerKind::Deterministic,
            Architecture::Stochastic => SanitizerKind::Stochastic,
        }
    }
}

/// Shared sanitizer-training settings; mode, α and seed vary per sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rates: LearningRates,
    pub alternation_period: usize,
    pub utility_full_finetune: bool,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rates: t.learning_rates,
            alternation_period: t.alternation_period,
            utility_full_finetune: t.utility_full_finetune,
            epsilon: t.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; every sweep cell derives its training seed from it.
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub architectures: Vec<Architecture>,
    pub modes: Vec<TrainMode>,
    pub dataset: DatasetSpec,
    pub pretrain: PretrainConfig,
    pub train: TrainSection,
    pub evaluation: EvalOptions,
    pub attack: AttackBudget,
}

impl Default for RunConfig {
    fn default() -> Self {
        let pretrain = PretrainConfig::default();
        Self {
            seed: 1,
            alphas: DEFAULT_ALPHAS.to_vec(),
            architectures: vec![Architecture::Deterministic, Architecture::Stochastic],
            modes: vec![TrainMode::PlugAndPlay, TrainMode::Adversarial],
            dataset: DatasetSpec::default(),
            attack: AttackBudget {
                epochs: pretrain.epochs,
                batch_size: pretrain.batch_size,
                lr: pretrain.lr,
                ..AttackBudget::default()
            },
            pretrain,
            train: TrainSection::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

/// Flag-level overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alphas: Option<Vec<f64>>,
    pub epochs: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(a) = &overrides.alphas {
            cfg.alphas = a.clone();
        }
        if let Some(e) = overrides.epochs {
            cfg.train.epochs = e;
        }
        if let Some(e) = overrides.pretrain_epochs {
            cfg.pretrain.epochs = e;
        }
        if let Some(n) = overrides.train_size {
            cfg.dataset.train_size = n;
        }
        if let Some(n) = overrides.test_size {
            cfg.dataset.test_size = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        validate_alphas(&self.alphas)?;
        self.dataset.validate()?;
        if self.architectures.is_empty() || self.modes.is_empty() {
            bail!("configuration error: at least one architecture and one mode are required");
        }
        for k in &self.evaluation.topk {
            if *k == 0 || *k > self.dataset.num_subjects {
                bail!("configuration error: top-k value {k} outside [1, {}]", self.dataset.num_subjects);
            }
        }
        self.train_config(TrainMode::PlugAndPlay, 0.0, 0).validate()?;
        Ok(())
    }

    pub fn train_config(&self, mode: TrainMode, alpha: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            alpha,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rates: self.train.learning_rates,
            alternation_period: self.train.alternation_period,
            seed,
            utility_full_finetune: self.train.utility_full_finetune,
            epsilon: self.train.epsilon,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Content hash of the configuration, used to name run directories.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, out_root: &Path) -> PathBuf {
        out_root.join(format!("run-{}", self.hash()))
    }
}
