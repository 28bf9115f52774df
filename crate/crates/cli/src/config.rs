//! The TOML run configuration.
//!
//! Every section is optional; each subcommand reads the sections it needs.
//! Relative paths are resolved against the directory of the config file.
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! n_classes = 2
//! dim = 2
//! separation = 3.0
//! sigma = 1.0
//! counts = [1000, 1000]
//!
//! [scenario]
//! kind = "class_bernoulli"
//! phi = [0.9, 0.1]
//!
//! [train]
//! epochs = 20
//! mechanism = { kind = "moment_buffered", momentum = 0.99 }
//!
//! [paths]
//! dataset = "out/dataset.csv"
//! ```

use std::path::{Path, PathBuf};

use mnar_ssl::mcartest::LrTestConfig;
use mnar_ssl::mechanism::MleConfig;
use mnar_ssl::scenario::{GaussianMixtureSpec, ScenarioSpec};
use mnar_ssl::train::TrainConfig;
use mnar_ssl::Architecture;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Used when `--seed` is not given.
    pub seed: Option<u64>,
    pub data: Option<DataConfig>,
    pub scenario: Option<ScenarioSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub mle: MleConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub test: LrTestConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

/// Gaussian-mixture data. Means are either given or placed at pairwise
/// distance `separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_classes: usize,
    pub dim: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Pool size per class before masking.
    pub counts: Vec<usize>,
    /// Held-out test size per class; defaults to `counts`.
    pub test_counts: Option<Vec<usize>>,
    pub means: Option<Vec<Vec<f64>>>,
}

fn default_separation() -> f64 {
    3.0
}

fn default_sigma() -> f64 {
    1.0
}

impl DataConfig {
    pub fn mixture(&self) -> Result<GaussianMixtureSpec, CliError> {
        let spec = match &self.means {
            Some(means) => GaussianMixtureSpec {
                means: means.clone(),
                sigma: self.sigma,
                counts: self.counts.clone(),
            },
            None => GaussianMixtureSpec::separated(
                self.n_classes,
                self.dim,
                self.separation,
                self.sigma,
                self.counts.clone(),
            ),
        };
        if spec.n_classes() != self.n_classes || spec.dim() != self.dim {
            return Err(CliError::Config("data.means does not match n_classes and dim".into()));
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn test_mixture(&self) -> Result<GaussianMixtureSpec, CliError> {
        let mut spec = self.mixture()?;
        if let Some(c) = &self.test_counts {
            spec.counts = c.clone();
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Class proportions of the pool, the true prior of the generated data.
    pub fn prior(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    #[default]
    Zeros,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub init: Init,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::LinearSoftmax,
            init: Init::Zeros,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EstimateMethod {
    /// Moment estimator under `estimate.prior` (or the data prior).
    #[default]
    MomentKnownPrior,
    /// Moment estimator under the mean prediction of `paths.model`.
    MomentModel,
    /// Maximum likelihood with the `[mle]` settings.
    Mle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default)]
    pub method: EstimateMethod,
    pub prior: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Estimate,
    #[default]
    Train,
    TestMcar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub replicates: usize,
    pub pipeline: Pipeline,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            replicates: 10,
            pipeline: Pipeline::Train,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: Option<PathBuf>,
    /// Fully labeled held-out split used for evaluation.
    pub test: Option<PathBuf>,
    /// Sealed truth of the dataset; only read for scoring.
    pub truth: Option<PathBuf>,
    /// Model checkpoint: the frozen theta of `test-mcar`, the model of
    /// `moment_model`, or the starting point of `train` and `mle`.
    pub model: Option<PathBuf>,
    /// Mechanism file (as written by `estimate`) used as a fixed mechanism
    /// by `train`.
    pub phi: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.resolve(base);
        Ok(config)
    }

    pub fn data(&self) -> Result<&DataConfig, CliError> {
        self.data
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [data] section".into()))
    }

    pub fn scenario(&self) -> Result<&ScenarioSpec, CliError> {
        self.scenario
            .as_ref()
            .ok_or_else(|| CliError::Config("missing [scenario] section".into()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.mle.validate()?;
        self.train.validate()?;
        self.test.validate()?;
        if let Some(data) = &self.data {
            data.mixture()?;
            data.test_mixture()?;
            if let Some(s) = &self.scenario {
                s.validate(data.n_classes)?;
            }
        }
        Ok(())
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.dataset,
            &mut self.test,
            &mut self.truth,
            &mut self.model,
            &mut self.phi,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn require(path: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
        path.clone()
            .ok_or_else(|| CliError::Config(format!("missing paths.{name}")))
    }
}
