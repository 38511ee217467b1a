//! Run configurations, one TOML document per subcommand.
//!
//! Unknown keys are errors. Relative paths are resolved against the
//! directory holding the configuration file. Every key except the input
//! paths has a default, so a minimal file names only its inputs.

use std::path::{Path, PathBuf};

use cardcount::datagen::SceneSpec;
use cardcount::harness::{AblationConfig, GuideSuiteConfig, TrainConfig, DEFAULT_RATIOS};
use cardcount::model::ModelConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// `gen-data`: a scene spec and the number of scenes per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub scene: SceneSpec,
    pub sizes: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 2000,
            val: 200,
            test: 200,
        }
    }
}

/// `train`: one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    /// Checkpoint to start from. Without it a fresh model is built from
    /// `[model]`.
    #[serde(default)]
    pub init: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: TrainPaths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPaths {
    /// Corpus of the stage being trained.
    pub train: PathBuf,
    #[serde(default)]
    pub val: Option<PathBuf>,
    /// Mask-bearing corpus mixed into weak-stage batches.
    #[serde(default)]
    pub strong: Option<PathBuf>,
}

/// `eval`: metrics of one checkpoint on one corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFileConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    #[serde(default)]
    pub kappa: f64,
    #[serde(default)]
    pub tiled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedCheckpoint {
    pub name: String,
    pub checkpoint: PathBuf,
}

/// `size-bias`: downscale sweep over one or more checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeBiasFileConfig {
    pub corpus: PathBuf,
    #[serde(default = "default_ratios")]
    pub ratios: Vec<f64>,
    #[serde(default = "default_size_classes")]
    pub size_classes: usize,
    pub models: Vec<NamedCheckpoint>,
}

fn default_ratios() -> Vec<f64> {
    DEFAULT_RATIOS.to_vec()
}

fn default_size_classes() -> usize {
    3
}

/// `threshold-sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdFileConfig {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    #[serde(default = "default_kappas")]
    pub kappas: Vec<f64>,
}

/// 0.0, 0.1, ..., 0.9.
pub fn default_kappas() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}

/// `guide`: a guidance suite against a frozen checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideFileConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub suite: GuideSuiteConfig,
}

/// `ablate` reads an [`AblationConfig`] directly.
pub type AblateFileConfig = AblationConfig;

/// Parses a configuration document.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<T, toml::de::Error> {
    toml::from_str(text)
}

/// Joins `path` onto `base` unless it is absolute.
pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}
