use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::AttackConfig;
use crate::data::{self, Dataset, SynthImageParams};
use crate::genesis::SGLDConfig;
use crate::nets::ModelSpec;
use crate::train::TrainConfig;

use super::CliError;

/// Where the data comes from. Test sets are drawn from the same source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Cifar10 {
        /// Batch file or directory of `*.bin` training batches.
        train_path: PathBuf,
        test_path: Option<PathBuf>,
        #[serde(default)]
        train_subset: Option<usize>,
        #[serde(default)]
        test_subset: Option<usize>,
    },
    SynthMixture {
        k_classes: usize,
        n_per_class: usize,
        dim: usize,
        separation: f64,
        #[serde(default = "default_test_per_class")]
        test_per_class: usize,
    },
    SynthImages {
        k_classes: usize,
        n_train: usize,
        n_test: usize,
        #[serde(default = "default_shape")]
        shape: [usize; 3],
        #[serde(default)]
        params: SynthImageParams,
    },
}

fn default_test_per_class() -> usize {
    250
}

fn default_shape() -> [usize; 3] {
    data::CIFAR_SHAPE
}

impl DataConfig {
    /// Train and test sets; both are deterministic in `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset), CliError> {
        let cfg = |e: data::DataError| CliError::Config(e.to_string());
        match self {
            DataConfig::Cifar10 {
                train_path,
                test_path,
                train_subset,
                test_subset,
            } => {
                let train = data::load_cifar10_binary(train_path, *train_subset).map_err(cfg)?;
                let test = match test_path {
                    Some(p) => data::load_cifar10_binary(p, *test_subset).map_err(cfg)?,
                    None => {
                        return Err(CliError::Config("cifar10 data needs a test_path".into()));
                    }
                };
                Ok((train, test))
            }
            DataConfig::SynthMixture {
                k_classes,
                n_per_class,
                dim,
                separation,
                test_per_class,
            } => {
                let train = data::synth_mixture(*k_classes, *n_per_class, *dim, *separation, seed).map_err(cfg)?;
                let mut test =
                    data::synth_mixture(*k_classes, *test_per_class, *dim, *separation, seed ^ 0x7e57).map_err(cfg)?;
                test.split = data::Split::Test;
                Ok((train, test))
            }
            DataConfig::SynthImages {
                k_classes,
                n_train,
                n_test,
                shape,
                params,
            } => {
                // one draw so both splits share the class templates
                let all = data::synth_images(*k_classes, n_train + n_test, *shape, *params, seed).map_err(cfg)?;
                let train = all.subset(&(0..*n_train).collect::<Vec<_>>());
                let mut test = all.subset(&(*n_train..n_train + n_test).collect::<Vec<_>>());
                test.split = data::Split::Test;
                if test.is_empty() {
                    return Err(CliError::Config("synth_images needs n_test > 0".into()));
                }
                Ok((train, test))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub bins: usize,
    /// Test samples attacked by `attack` and `analyze-energy` (0 = all).
    pub samples: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig { bins: 50, samples: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub per_class: usize,
    pub retained_variance: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            per_class: 10,
            retained_variance: 0.99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub fraction: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { fraction: 0.05 }
    }
}

/// Full experiment description. Every section except `data` and `model` has
/// defaults; unknown keys anywhere are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelSpec,
    /// Trained parameters for commands that consume a model.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub sgld: SGLDConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub generate: GenerateConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Semantic checks beyond the schema.
    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        if self.train.seed != 0 && self.train.seed != self.seed {
            return Err(cfg("train.seed is taken from the top-level `seed`; leave it unset".into()));
        }
        self.model.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.attack.validate().map_err(|e| cfg(e.to_string()))?;
        self.sgld.validate().map_err(|e| cfg(e.to_string()))?;
        if self.analysis.bins == 0 {
            return Err(cfg("analysis.bins must be at least 1".into()));
        }
        if !(self.generate.retained_variance > 0.0 && self.generate.retained_variance <= 1.0) {
            return Err(cfg("generate.retained_variance must lie in (0, 1]".into()));
        }
        if !(self.ablation.fraction > 0.0 && self.ablation.fraction < 0.5) {
            return Err(cfg("ablation.fraction must lie in (0, 0.5)".into()));
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::canonical_json`] with `output_dir` blanked, hex
    /// encoded: the same experiment hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let located = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(located.canonical_json().as_bytes()))
    }

    /// Training config with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }
}
