use std::path::{Path, PathBuf};

use evoforecast::eval::{ModelRecipe, SweepGrid};
use evoforecast::{CsvSchema, ForecasterSpec, Mode, SplitSpec, TrainConfig};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Identifier written to reports; defaults to the file stem.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub timestamp_column: Option<String>,
    #[serde(default)]
    pub channels: Option<Vec<String>>,
    /// Keep only the first `max_rows` rows.
    #[serde(default)]
    pub max_rows: Option<usize>,
}

/// `kind`, `T`, `L` and the kind's hyperparameters. Any `seed` here is
/// replaced by the one derived from the top-level seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "T")]
    pub input_len: usize,
    #[serde(rename = "L")]
    pub output_len: usize,
    #[serde(flatten)]
    pub recipe: ModelRecipe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "both_modes")]
    pub modes: Vec<Mode>,
    /// Defaults to the model's `T`.
    #[serde(default, rename = "T")]
    pub input_lens: Option<Vec<usize>>,
    /// Defaults to the model's `L`.
    #[serde(default, rename = "L")]
    pub output_lens: Option<Vec<usize>>,
    #[serde(rename = "H")]
    pub horizons: Vec<usize>,
    #[serde(default = "one")]
    pub stride: usize,
}

fn both_modes() -> Vec<Mode> {
    vec![Mode::Df, Mode::Ef]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Segment boundaries from 0 to `L`; defaults to four near-equal quarters.
    #[serde(default)]
    pub boundaries: Option<Vec<usize>>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub grad: Option<GradSection>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Parsed config plus the raw bytes it came from.
pub struct Loaded {
    pub config: RunConfig,
    pub raw: Vec<u8>,
}

impl RunConfig {
    /// Reads, parses and validates a config. Relative paths resolve against
    /// the config file's directory.
    pub fn load(path: &Path) -> Result<Loaded, CliError> {
        let raw = std::fs::read(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut config: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if config.dataset.path.is_relative() {
            config.dataset.path = base.join(&config.dataset.path);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(Loaded { config, raw })
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !self.dataset.path.is_file() {
            return bad(format!("dataset not found: {}", self.dataset.path.display()));
        }
        if self.dataset.max_rows == Some(0) {
            return bad("dataset.max_rows must be positive".into());
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        // channel count is unknown until the data is read; 1 suffices here
        self.spec(1).validate().map_err(|e| CliError::Config(format!("model: {e}")))?;
        if let Some(eval) = &self.eval {
            if eval.horizons.is_empty() || eval.horizons.contains(&0) {
                return bad("eval.H must be a non-empty list of positive horizons".into());
            }
            if eval.modes.is_empty() {
                return bad("eval.modes must not be empty".into());
            }
            if eval.stride == 0 {
                return bad("eval.stride must be positive".into());
            }
        }
        Ok(())
    }

    pub fn dataset_id(&self) -> String {
        self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset
                .path
                .file_stem()
                .map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
        })
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            timestamp_column: self.dataset.timestamp_column.clone(),
            channels: self.dataset.channels.clone(),
        }
    }

    pub fn seeds(&self) -> SubSeeds {
        SubSeeds::from_seed(self.seed)
    }

    /// Model recipe with the init seed derived from the top-level seed.
    pub fn recipe(&self) -> ModelRecipe {
        ModelRecipe {
            seed: self.seeds().init,
            ..self.model.recipe.clone()
        }
    }

    pub fn spec(&self, channels: usize) -> ForecasterSpec {
        self.recipe().spec(self.model.input_len, self.model.output_len, channels)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shuffle_seed: self.seeds().shuffle,
            ..self.train.clone()
        }
    }

    pub fn grid(&self) -> Result<SweepGrid, CliError> {
        let eval = self
            .eval
            .as_ref()
            .ok_or_else(|| CliError::Config("an `eval` section is required".into()))?;
        Ok(SweepGrid {
            input_lens: eval.input_lens.clone().unwrap_or_else(|| vec![self.model.input_len]),
            output_lens: eval.output_lens.clone().unwrap_or_else(|| vec![self.model.output_len]),
            horizons: eval.horizons.clone(),
            modes: eval.modes.clone(),
            stride: eval.stride,
        })
    }
}

/// Independent streams for parameter init and minibatch shuffling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubSeeds {
    pub init: u64,
    pub shuffle: u64,
}

impl SubSeeds {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            init: rng.next_u64(),
            shuffle: rng.next_u64(),
        }
    }
}
