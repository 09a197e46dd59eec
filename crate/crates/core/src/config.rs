//! TOML experiment and synthesis configuration files.
//!
//! Unknown keys are rejected with an error naming the key. Every table is
//! optional and falls back to its defaults.
//!
//! ```toml
//! seed = 3
//!
//! [model]
//! modalities = "rgb+d+t"
//! layers = 2
//!
//! [ablation]
//! disable_orthogonal_projection = true
//!
//! [train]
//! epochs = 2
//! samples_per_epoch = 64
//! lr_drop_epoch = 1
//!
//! [data.synthetic]
//! train_sequences = 4
//! test_sequences = 2
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data_model::{DegradationProfile, SceneConfig};
use crate::error::{Error, Result};
use crate::experiment::{SyntheticBenchmark, Variant};
use crate::tracker::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub disable_orthogonal_projection: bool,
    /// Keep `alpha = beta = 1` and out of the trainable set.
    pub freeze_alpha_beta: bool,
}

/// Where sequences come from: a dataset root with named splits, or a
/// generated benchmark.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    /// Training sequence names under `root`; empty means every sequence.
    pub train: Vec<String>,
    /// Evaluation sequence names under `root`; empty means every sequence.
    pub test: Vec<String>,
    pub synthetic: Option<SyntheticBenchmark>,
}

/// Variants and seeds for `train --matrix`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixConfig {
    pub variants: Vec<Variant>,
    /// Empty means the top-level seed only.
    pub seeds: Vec<u64>,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            variants: Variant::matrix(),
            seeds: Vec::new(),
        }
    }
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        epochs: 8,
        samples_per_epoch: 512,
        lr_drop_epoch: 7,
        ..TrainConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub ablation: AblationSwitches,
    /// Prompt and fusion fine-tuning.
    pub train: TrainConfig,
    /// RGB backbone pretraining, skipped when `backbone` is set.
    pub pretrain: TrainConfig,
    /// Existing backbone checkpoint.
    pub backbone: Option<PathBuf>,
    pub data: DataConfig,
    pub matrix: MatrixConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            ablation: AblationSwitches::default(),
            train: TrainConfig::default(),
            pretrain: default_pretrain(),
            backbone: None,
            data: DataConfig::default(),
            matrix: MatrixConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate()?;
        if self.data.root.is_some() && self.data.synthetic.is_some() {
            return Err(Error::Config("data.root and data.synthetic are mutually exclusive".into()));
        }
        if let Some(s) = &self.data.synthetic {
            if s.train_sequences == 0 || s.length < 2 {
                return Err(Error::Config(
                    "data.synthetic needs at least one training sequence of two frames".into(),
                ));
            }
        }
        Ok(())
    }

    /// The model configuration with the ablation switches applied.
    pub fn effective_model(&self) -> ModelConfig {
        Variant {
            modalities: self.model.modalities,
            disable_orthogonal_projection: self.ablation.disable_orthogonal_projection,
            freeze_alpha_beta: self.ablation.freeze_alpha_beta,
        }
        .apply(&self.model)
    }

    /// `seed` replaces the top-level seed and the training seeds derived
    /// from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn finetune_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.pretrain.clone()
        }
    }

    pub fn matrix_seeds(&self) -> Vec<u64> {
        if self.matrix.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.matrix.seeds.clone()
        }
    }
}

/// Settings for generating a synthetic dataset on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub length: usize,
    /// Seed of the first sequence; sequence `i` uses `seed + i`.
    pub seed: u64,
    /// Replace `profile` by the rotating two-window degradations.
    pub rotating: bool,
    pub profile: DegradationProfile,
    pub scene: SceneConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 1,
            length: 60,
            seed: 0,
            rotating: false,
            profile: DegradationProfile::none(),
            scene: SceneConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.length == 0 {
            return Err(Error::Config("count and length must be positive".into()));
        }
        self.profile.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses TOML into `T`, mapping schema violations to [`Error::Config`].
pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = parse_toml(&read(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth(path: &Path) -> Result<SynthConfig> {
    let cfg: SynthConfig = parse_toml(&read(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tracker::ModalitySet;

    #[test]
    fn module_example_parses() {
        let text = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let cfg: ExperimentConfig = parse_toml(&text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.layers, 2);
        assert!(!cfg.effective_model().projection);
        assert_eq!(cfg.data.synthetic.unwrap().test_sequences, 2);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_toml::<ExperimentConfig>("[train]\nepochz = 3\n").unwrap_err();
        assert_eq!(err.code(), "config");
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = parse_toml::<SynthConfig>("[profile]\nrgb_dark = []\n").unwrap_err();
        assert!(err.to_string().contains("rgb_dark"), "{err}");
    }

    #[test]
    fn matrix_variants_parse() {
        let cfg: ExperimentConfig = parse_toml(
            "[matrix]\nseeds = [1, 2]\nvariants = [{ modalities = \"rgb+d\" }, { modalities = \"rgb+d+t\", disable_orthogonal_projection = true }]\n",
        )
        .unwrap();
        assert_eq!(cfg.matrix.variants[0].modalities, ModalitySet::RgbDepth);
        assert_eq!(cfg.matrix_seeds(), vec![1, 2]);
    }
}
