//! Experiment configuration, read from a TOML file.
//!
//! Every field is required; nothing falls back to a default inside the
//! pipeline. `ExperimentConfig::reference(kind)` produces the full-scale
//! setup and is what `configs/*.toml` were written from.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qfit_core::simulate::{DEFAULT_N_BACKGROUND, DEFAULT_N_TEST, DEFAULT_N_TRAIN, DEFAULT_N_VAL};
use qfit_core::{LossKind, ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaSource {
    /// The noise level used to simulate the data.
    True,
    /// The Rayleigh background estimate stored with the training data.
    Estimated,
}

/// Optimiser and stopping settings shared by every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
}

impl TrainSettings {
    pub fn to_train_config(&self, seed: u64, loss_kind: LossKind) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            patience_epochs: self.patience_epochs,
            max_epochs: self.max_epochs,
            seed,
            loss_kind,
        }
    }
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            patience_epochs: t.patience_epochs,
            max_epochs: t.max_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_kind: ModelKind,
    pub snr_list: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_background: usize,
    pub n_init_repetitions: usize,
    pub n_fitref_voxels: usize,
    pub sigma_source: SigmaSource,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub train: TrainSettings,
}

impl ExperimentConfig {
    /// Full-scale setup: five SNRs, 200k/1k/200k voxels, 16 initialisations.
    pub fn reference(model_kind: ModelKind) -> Self {
        ExperimentConfig {
            model_kind,
            snr_list: vec![30.0, 20.0, 10.0, 7.5, 5.0],
            n_train: DEFAULT_N_TRAIN,
            n_val: DEFAULT_N_VAL,
            n_test: DEFAULT_N_TEST,
            n_background: DEFAULT_N_BACKGROUND,
            n_init_repetitions: 16,
            n_fitref_voxels: 1000,
            sigma_source: SigmaSource::Estimated,
            master_seed: 42,
            output_dir: PathBuf::from("out"),
            train: TrainSettings::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let config: ExperimentConfig = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr_list.is_empty() {
            bail!("snr_list is empty");
        }
        if let Some(s) = self.snr_list.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            bail!("SNR values must be positive, got {s}");
        }
        for (name, n) in [
            ("n_train", self.n_train),
            ("n_val", self.n_val),
            ("n_test", self.n_test),
            ("n_background", self.n_background),
            ("n_init_repetitions", self.n_init_repetitions),
        ] {
            if n == 0 {
                bail!("{name} must be positive");
            }
        }
        if self.n_background < 2 {
            bail!("n_background must be at least 2");
        }
        self.train.to_train_config(0, LossKind::Nlr).validate()?;
        Ok(())
    }

    /// Applies command-line overrides. `scale` divides the training and
    /// test set sizes.
    pub fn with_overrides(mut self, scale: Option<usize>, snr: Option<f64>, model: Option<ModelKind>) -> Result<Self> {
        if let Some(k) = scale {
            if k == 0 {
                bail!("--scale must be positive");
            }
            self.n_train = (self.n_train / k).max(1);
            self.n_test = (self.n_test / k).max(1);
        }
        if let Some(v) = snr {
            self.snr_list = vec![v];
        }
        if let Some(m) = model {
            self.model_kind = m;
        }
        self.validate()?;
        Ok(self)
    }

    /// SHA-256 of the canonical TOML form of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn model_dir(&self) -> PathBuf {
        self.output_dir.join(self.model_kind.to_string())
    }
}
