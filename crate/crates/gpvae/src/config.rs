//! JSON run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use gpvae_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: field `{field}`: {message}")]
    Field { path: PathBuf, field: String, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Idx,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// IDX image file (`source = "idx"`).
    #[serde(default)]
    pub images: Option<PathBuf>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    /// Generator name (`source = "synthetic"`).
    #[serde(default)]
    pub kind: Option<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Seed for generation and splitting, independent of the training seed.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iwae_samples: Vec<usize>,
    /// Rows per reported test batch.
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iwae_samples: vec![1, 10, 100], batch_size: 128 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapSettings {
    pub instances: usize,
    pub steps: usize,
    pub step_size: f64,
    pub decay: f64,
    pub eval_samples: usize,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self { instances: 100, steps: 500, step_size: 1e-2, decay: 100.0, eval_samples: 200 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintySettings {
    pub instances: usize,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub resolution: usize,
    pub export_grids: bool,
}

impl Default for UncertaintySettings {
    fn default() -> Self {
        Self { instances: 100, grid_lo: -6.0, grid_hi: 6.0, resolution: 200, export_grids: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub batch_size: usize,
    pub repetitions: usize,
    pub sa_steps: Vec<usize>,
    /// Upper bound on timed batches per repetition; 0 means the whole test set.
    pub max_batches: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { batch_size: 128, repetitions: 5, sa_steps: vec![1, 2, 4, 8], max_batches: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Artifact root; relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub gap: GapSettings,
    #[serde(default)]
    pub uncertainty: UncertaintySettings,
    #[serde(default)]
    pub bench: BenchSettings,
}

impl RunConfig {
    /// Parses JSON; errors name the offending field.
    pub fn from_json(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: path.to_owned(),
            field: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate(path)?;
        Ok(cfg)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        let mut cfg = Self::from_json(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.output_dir);
        for p in [cfg.data.images.as_mut(), cfg.data.labels.as_mut()].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }

    fn validate(&self, path: &Path) -> Result<(), ConfigError> {
        let invalid = |message: String| ConfigError::Invalid { path: path.to_owned(), message };
        self.train.validate().map_err(|e| invalid(format!("train: {e}")))?;
        match self.data.source {
            DataSource::Idx if self.data.images.is_none() => {
                return Err(invalid("data.images is required for source \"idx\"".into()))
            }
            DataSource::Synthetic if self.data.kind.is_none() => {
                return Err(invalid("data.kind is required for source \"synthetic\"".into()))
            }
            _ => {}
        }
        if self.data.n_train == 0 {
            return Err(invalid("data.n_train must be positive".into()));
        }
        if self.eval.iwae_samples.contains(&0) || self.eval.batch_size == 0 {
            return Err(invalid("eval sample counts and batch size must be positive".into()));
        }
        if self.bench.batch_size == 0 || self.bench.repetitions == 0 {
            return Err(invalid("bench batch size and repetitions must be positive".into()));
        }
        Ok(())
    }
}
