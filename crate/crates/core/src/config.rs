//! Run configuration: a TOML file whose sections and keys mirror the rows of
//! a training-setup table (`widths = [384, 768]`, `learning_rate = 5e-4`, ...).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{DiffusionConfig, OptimizerConfig};
use crate::model::ModelConfig;
use crate::sampler::SamplerConfig;

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated circles and squares.
    Shapes { count: usize },
    /// A folder of PPM images (one subfolder per class, or flat).
    Folder { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmaConfig {
    /// Upper bound of the averaging decay.
    pub decay: f64,
    /// Ramp the decay up from zero as `1 − (1 + step)^(−2/3)`.
    #[serde(default = "yes")]
    pub warmup: bool,
}

fn yes() -> bool {
    true
}

impl Default for EmaConfig {
    fn default() -> Self {
        EmaConfig {
            decay: 0.9999,
            warmup: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub training_steps: u64,
    pub batch_size: usize,
    pub output_dir: PathBuf,
    /// Steps between metric lines on stdout (CSV rows are written every step).
    #[serde(default = "default_log_interval")]
    pub log_interval: u64,
    /// Steps between checkpoints; the final step always checkpoints.
    #[serde(default = "default_checkpoint_interval")]
    pub checkpoint_interval: u64,
    /// Steps between sample grids (0 = only after the final step).
    #[serde(default)]
    pub sample_interval: u64,
    /// Rows of the 8-column sample grid.
    #[serde(default = "default_grid_rows")]
    pub sample_grid_rows: usize,
}

fn default_log_interval() -> u64 {
    100
}
fn default_checkpoint_interval() -> u64 {
    1000
}
fn default_grid_rows() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub ema: EmaConfig,
    #[serde(default)]
    pub sampler: SamplerConfig,
    pub training: TrainingConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigFileError> {
        let bad = ConfigFileError::Invalid;
        self.model.validate().map_err(|e| bad(e.to_string()))?;
        self.diffusion.validate().map_err(bad)?;
        self.sampler.validate().map_err(bad)?;
        if self.training.batch_size == 0 {
            return Err(bad("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema.decay) {
            return Err(bad("EMA decay must lie in [0, 1]".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || o.betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(o.eps > 0.0) {
            return Err(bad("optimizer needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        if let DatasetSource::Shapes { count: 0 } = self.dataset {
            return Err(bad("shape dataset needs at least one image".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigFileError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are representable in TOML")
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The end-to-end smoke configuration: two-level model on 32² shapes.
    pub fn smoke(output_dir: PathBuf) -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetSource::Shapes { count: 4096 },
            model: crate::model::presets::toy_32(),
            diffusion: DiffusionConfig::default(),
            optimizer: OptimizerConfig::default(),
            ema: EmaConfig::default(),
            sampler: SamplerConfig::default(),
            training: TrainingConfig {
                training_steps: 2000,
                batch_size: 32,
                output_dir,
                log_interval: 100,
                checkpoint_interval: 1000,
                sample_interval: 0,
                sample_grid_rows: 2,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
seed = 7

[dataset]
kind = "shapes"
count = 256

[model]
input_resolution = 32
patch_size = 4
depths = [1, 2]
widths = [64, 128]
attention_heads = [1, 2]
attention = ["neighborhood(7)", "global"]
mapping_depth = 1
mapping_width = 128
num_classes = 2
allow_any_core_resolution = true

[diffusion]
data_sigma = 0.5
sigma_range = [1e-3, 1e3]
weighting = "soft_min_snr"
gamma = 4.0
conditioning_dropout_rate = 0.1

[optimizer]
learning_rate = 5e-4
betas = [0.9, 0.95]
eps = 1e-8
weight_decay = 1e-2

[ema]
decay = 0.9999

[training]
training_steps = 10
batch_size = 4
output_dir = "run"
"#;

    #[test]
    fn parses_and_round_trips() {
        let cfg = RunConfig::from_toml(EXAMPLE).unwrap();
        assert_eq!(cfg.model.attention[0], crate::nn::AttentionKind::Neighborhood { kernel: 7 });
        assert_eq!(cfg.sampler, SamplerConfig::default());
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        let smoke = RunConfig::smoke("out".into());
        assert_eq!(RunConfig::from_toml(&smoke.to_toml()).unwrap(), smoke);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            RunConfig::from_toml(&EXAMPLE.replace("seed = 7", "seed = 7\nbogus = 1")),
            Err(ConfigFileError::Parse(_))
        ));
        assert!(matches!(
            RunConfig::from_toml(&EXAMPLE.replace("batch_size = 4", "batch_size = 0")),
            Err(ConfigFileError::Invalid(_))
        ));
        assert!(RunConfig::from_toml(&EXAMPLE.replace("\"global\"", "\"local\"")).is_err());
    }
}
