//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use multiattn::combination::{CombinationConfig, Strategy};
use multiattn::model::{ModelConfig, SourceKind};
use multiattn::recurrent::DecoderKind;
use multiattn::tasks::{CorruptionRates, MaskedCopyParams, ToyApeParams};
use multiattn::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MaskedCopy,
    ToyApe,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::MaskedCopy => "masked-copy",
            Task::ToyApe => "toy-ape",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "masked-copy" => Some(Task::MaskedCopy),
            "toy-ape" => Some(Task::ToyApe),
            _ => None,
        }
    }
}

/// Where the data comes from: generated from the experiment seed, or read
/// from dataset files when `train` and `valid` are given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub task: Task,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub mask_rate: f64,
    pub substitution: f64,
    pub deletion: f64,
    pub insertion: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let mc = MaskedCopyParams::default();
        let rates = CorruptionRates::default();
        Self {
            task: Task::MaskedCopy,
            train: None,
            valid: None,
            train_size: 2000,
            valid_size: 200,
            test_size: 200,
            min_len: mc.min_len,
            max_len: mc.max_len,
            vocab_size: mc.vocab_size,
            mask_rate: mc.mask_rate,
            substitution: rates.substitution,
            deletion: rates.deletion,
            insertion: rates.insertion,
        }
    }
}

impl DataConfig {
    pub fn masked_copy(&self, n: usize) -> MaskedCopyParams {
        MaskedCopyParams {
            n,
            min_len: self.min_len,
            max_len: self.max_len,
            vocab_size: self.vocab_size,
            mask_rate: self.mask_rate,
        }
    }

    pub fn toy_ape(&self, n: usize) -> ToyApeParams {
        ToyApeParams {
            n,
            min_len: self.min_len,
            max_len: self.max_len,
            vocab_size: self.vocab_size,
            rates: CorruptionRates {
                substitution: self.substitution,
                deletion: self.deletion,
                insertion: self.insertion,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub strategy: Strategy,
    pub share: bool,
    pub sentinel: bool,
    pub ctx_dim: Option<usize>,
    pub decoder: DecoderKind,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub tie_embeddings: bool,
    pub tie_encoders: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let base = ModelConfig::new(
            vec![SourceKind::Text],
            CombinationConfig::new(Strategy::Hierarchical, false, false),
            DecoderKind::Cgru,
        );
        Self {
            strategy: Strategy::Hierarchical,
            share: false,
            sentinel: false,
            ctx_dim: None,
            decoder: base.decoder,
            embed_dim: base.embed_dim,
            hidden_dim: base.hidden_dim,
            attn_dim: base.attn_dim,
            tie_embeddings: base.tie_embeddings,
            tie_encoders: base.tie_encoders,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, sources: Vec<SourceKind>) -> ModelConfig {
        let mut combination = CombinationConfig::new(self.strategy, self.share, self.sentinel);
        combination.ctx_dim = self.ctx_dim;
        ModelConfig {
            sources,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            attn_dim: self.attn_dim,
            combination,
            decoder: self.decoder,
            tie_embeddings: self.tie_embeddings,
            tie_encoders: self.tie_encoders,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds data generation, parameter initialization and batch order.
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out: None,
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        self.model.model_config(vec![SourceKind::Text, SourceKind::Text]).validate()?;
        let d = &self.data;
        match (&d.train, &d.valid) {
            (Some(_), Some(_)) | (None, None) => {}
            _ => bail!("data.train and data.valid must be given together"),
        }
        if d.train.is_none() {
            if d.train_size == 0 || d.valid_size == 0 {
                bail!("data.train_size and data.valid_size must be positive");
            }
            match d.task {
                Task::MaskedCopy => d.masked_copy(1).validate()?,
                Task::ToyApe => d.toy_ape(1).rates.validate()?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = c.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<ExperimentConfig>("seed = 3\nbogus = 1\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[model]\nstrategy = \"flat\"\nwidth = 3\n").is_err());
        assert!(toml::from_str::<ExperimentConfig>("[train]\nlearning_rate = 0.1\n").is_err());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: ExperimentConfig = toml::from_str("[model]\nstrategy = \"flat\"\nsentinel = true\n").unwrap();
        assert_eq!(c.model.strategy, Strategy::Flat);
        assert!(c.model.sentinel);
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn invalid_combinations_fail_validation() {
        let mut c = ExperimentConfig::default();
        c.model.strategy = Strategy::Concat;
        c.model.sentinel = true;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.data.train = Some("x".into());
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.data.mask_rate = 1.5;
        assert!(c.validate().is_err());
    }
}
