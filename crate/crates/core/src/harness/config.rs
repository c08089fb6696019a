//! Run configuration, read from TOML.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/opm"
//! probe_every = 5            # epochs between encoder probes, 0 = off
//!
//! [data]                     # a synthetic spec ...
//! classes = 4
//! dims = [16, 16]
//! separation = [3.0, 1.0]
//! noise_std = [1.0, 1.0]
//! n_train = 1000
//! n_test = 1000
//! seed = 0
//! # ... or an exported dataset: path = "data/imbalanced"
//!
//! [model]
//! encoder_layers = [[32, 8], [32, 8]]
//! fusion = "concatenation"   # or "summation"
//! head = "single_linear"     # or "multi_layer" with head_hidden = [..]
//!
//! [optimizer]
//! lr = 1e-3
//! momentum = 0.9
//! batch_size = 32
//! epochs = 50
//!
//! [modulation]
//! strategy = "opm"           # none | opm | ogm | ogm_star | opm_plus_ogm
//!
//! [probe]                    # linear probe settings
//! epochs = 30
//! ```
//!
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{self, Dataset, SyntheticSpec};
use crate::fusion::{ModelConfig, ProbeConfig};
use crate::modulation::{ModulationConfig, Strategy};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSource {
    Path(DatasetPath),
    Synthetic(SyntheticSpec),
}

/// A dataset previously written by [`datagen::export`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPath {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    1e-3
}
fn default_momentum() -> f64 {
    0.9
}
fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    50
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: default_lr(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
        }
    }
}

/// Linear probe settings; the probe's shuffling seed is derived from the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    #[serde(default = "default_probe_epochs")]
    pub epochs: usize,
    #[serde(default = "default_probe_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_probe_epochs() -> usize {
    30
}
fn default_probe_lr() -> f64 {
    1e-2
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            epochs: default_probe_epochs(),
            lr: default_probe_lr(),
            momentum: default_momentum(),
            batch_size: default_batch_size(),
        }
    }
}

impl ProbeSettings {
    pub fn with_seed(&self, seed: u64) -> ProbeConfig {
        ProbeConfig {
            epochs: self.epochs,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub modulation: ModulationConfig,
    #[serde(default)]
    pub probe: ProbeSettings,
    #[serde(default)]
    pub probe_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl RunConfig {
    /// Two modalities with signal-to-noise ratios 3:1, four classes.
    pub fn imbalanced_default() -> Self {
        Self {
            data: DataSource::Synthetic(SyntheticSpec {
                classes: 4,
                dims: vec![16, 16],
                separation: vec![3.0, 1.0],
                noise_std: vec![1.0, 1.0],
                n_train: 1000,
                n_test: 1000,
                seed: 0,
            }),
            model: ModelConfig::two_layer(2, 8),
            optimizer: OptimizerConfig::default(),
            modulation: ModulationConfig::default(),
            probe: ProbeSettings::default(),
            probe_every: 0,
            seed: 0,
            output_dir: default_output_dir(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Sets the run seed, and the data seed when the data is synthetic.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.modulation.strategy = strategy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::config(format!("lr must be > 0, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", o.momentum)));
        }
        if o.batch_size == 0 {
            return Err(Error::config("batch_size must be > 0"));
        }
        let p = &self.probe;
        if p.batch_size == 0 || !(p.lr > 0.0 && p.lr.is_finite()) {
            return Err(Error::config("probe needs batch_size > 0 and lr > 0"));
        }
        self.modulation.validate()?;
        if self.model.encoder_layers.iter().any(|l| l.is_empty() || l.contains(&0)) {
            return Err(Error::config("every encoder needs at least one non-empty layer"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.modalities() != self.model.encoder_layers.len() {
                return Err(Error::config(format!(
                    "data has {} modalities but the model has {} encoders",
                    spec.modalities(),
                    self.model.encoder_layers.len()
                )));
            }
        }
        Ok(())
    }

    /// Generates or imports the dataset and checks it against the model.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Synthetic(spec) => datagen::generate(spec)?,
            DataSource::Path(p) => datagen::import(&p.path)?,
        };
        if ds.train.modalities() != self.model.encoder_layers.len() {
            return Err(Error::config(format!(
                "data has {} modalities but the model has {} encoders",
                ds.train.modalities(),
                self.model.encoder_layers.len()
            )));
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::imbalanced_default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn minimal_file_takes_defaults() {
        let text = r#"
            [data]
            classes = 2
            dims = [3]
            separation = [1.0]
            noise_std = [1.0]
            n_train = 10
            n_test = 10
            seed = 1

            [model]
            encoder_layers = [[4]]
        "#;
        let cfg = RunConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.optimizer, OptimizerConfig::default());
        assert_eq!(cfg.modulation.strategy, Strategy::None);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = RunConfig::imbalanced_default().to_toml_string().unwrap();
        text.insert_str(0, "bogus = 1\n");
        assert!(RunConfig::from_toml_str(&text).is_err());
        let text = RunConfig::imbalanced_default()
            .to_toml_string()
            .unwrap()
            .replace("[optimizer]", "[optimizer]\nnesterov = true");
        assert!(RunConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn modality_count_must_match() {
        let mut cfg = RunConfig::imbalanced_default();
        cfg.model.encoder_layers.pop();
        assert!(cfg.validate().is_err());
    }
}
