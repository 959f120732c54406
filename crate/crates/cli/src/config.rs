//! Experiment configuration file (TOML). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use scalla::experiment::{DeskDataConfig, EvalConfig, Method};
use scalla::lla::default_prior_grid;
use scalla::models::MapConfig;
use scalla::network::{Layer, NetworkSpec, Shape};
use scalla::optim::AdamConfig;
use scalla::params::Distribution;
use scalla::surrogate::SurrogateConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Overrides `dataset.idx.root` when set.
pub const DATA_ROOT_ENV: &str = "SCALLA_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Required, either here or via `--seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub map: MapSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub surrogate: SurrogateSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    TwoMoons,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub synthetic: DeskDataConfig,
    pub idx: IdxConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::TwoMoons,
            synthetic: DeskDataConfig::default(),
            idx: IdxConfig::default(),
        }
    }
}

/// IDX file locations, relative to `root`. Train/test play the
/// in-distribution role, the context and OOD sets come from other corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdxConfig {
    pub root: String,
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
    pub context_images: String,
    pub context_labels: String,
    pub ood_images: String,
    pub ood_labels: String,
    /// 0 keeps every example.
    pub max_train: usize,
    pub max_eval: usize,
}

impl Default for IdxConfig {
    fn default() -> Self {
        Self {
            root: "data".into(),
            train_images: "fashion/train-images-idx3-ubyte".into(),
            train_labels: "fashion/train-labels-idx1-ubyte".into(),
            test_images: "fashion/t10k-images-idx3-ubyte".into(),
            test_labels: "fashion/t10k-labels-idx1-ubyte".into(),
            context_images: "mnist/t10k-images-idx3-ubyte".into(),
            context_labels: "mnist/t10k-labels-idx1-ubyte".into(),
            ood_images: "kmnist/t10k-images-idx3-ubyte".into(),
            ood_labels: "kmnist/t10k-labels-idx1-ubyte".into(),
            max_train: 0,
            max_eval: 0,
        }
    }
}

impl IdxConfig {
    pub fn path(&self, rel: &str) -> PathBuf {
        Path::new(&self.root).join(rel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    /// Layer descriptors such as `dense 2 16`, `conv2d 1 4 3`, `tanh`.
    pub layers: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let spec = scalla::experiment::desk_network();
        Self {
            input_shape: spec.input_shape().dims(),
            layers: spec.layers().iter().map(Layer::to_string).collect(),
        }
    }
}

impl ModelConfig {
    pub fn network(&self) -> Result<NetworkSpec, CliError> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.parse::<Layer>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(CliError::from)?;
        let shape = Shape::from_dims(&self.input_shape)?;
        Ok(NetworkSpec::new(shape, layers)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Prior scale during MAP training.
    pub sigma0: f64,
}

impl Default for MapSection {
    fn default() -> Self {
        let d = MapConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.adam.learning_rate,
            sigma0: 1.0,
        }
    }
}

impl MapSection {
    pub fn to_core(&self, seed: u64) -> MapConfig {
        MapConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..Default::default()
            },
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub grid: Vec<f64>,
}

impl Default for PriorSection {
    fn default() -> Self {
        Self {
            grid: default_prior_grid(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateSection {
    pub m: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub context_batch_size: usize,
    pub sketches_per_step: usize,
    pub distribution: Distribution,
    pub learning_rate: f64,
    /// Cosine-decay target; omit for a constant step size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_learning_rate: Option<f64>,
    pub biased: bool,
    /// Test inputs used for the held-out kernel error.
    pub kernel_grid: usize,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let d = SurrogateConfig::default();
        Self {
            m: d.m,
            steps: d.steps,
            batch_size: d.batch_size,
            context_batch_size: d.context_batch_size,
            sketches_per_step: d.sketches_per_step,
            distribution: d.distribution,
            learning_rate: d.adam.learning_rate,
            final_learning_rate: d.final_learning_rate,
            biased: d.biased,
            kernel_grid: 50,
        }
    }
}

impl SurrogateSection {
    pub fn to_core(&self, seed: u64) -> SurrogateConfig {
        SurrogateConfig {
            m: self.m,
            steps: self.steps,
            batch_size: self.batch_size,
            context_batch_size: self.context_batch_size,
            sketches_per_step: self.sketches_per_step,
            distribution: self.distribution,
            adam: AdamConfig {
                learning_rate: self.learning_rate,
                ..Default::default()
            },
            final_learning_rate: self.final_learning_rate,
            biased: self.biased,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub methods: Vec<Method>,
    pub mc_samples: usize,
    pub ece_bins: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let d = EvalConfig::default();
        Self {
            methods: Method::ALL.to_vec(),
            mc_samples: d.mc_samples,
            ece_bins: d.ece_bins,
        }
    }
}

impl EvaluationSection {
    pub fn to_core(&self, seed: u64) -> EvalConfig {
        EvalConfig {
            mc_samples: self.mc_samples,
            ece_bins: self.ece_bins,
            seed,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies the seed override and the dataset-root environment variable,
    /// and checks that a seed is present.
    pub fn resolve(mut self, seed: Option<u64>, data_root: Option<String>) -> Result<Self, CliError> {
        if seed.is_some() {
            self.seed = seed;
        }
        if self.seed.is_none() {
            return Err(CliError::config("a seed is required (config `seed` or --seed)"));
        }
        if let Some(root) = data_root {
            self.dataset.idx.root = root;
        }
        self.model.network()?;
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.expect("resolved config has a seed")
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::runtime(format!("cannot serialize config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_needs_seed() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg.resolve(None, None).unwrap_err().code, 2);
        let cfg = ExperimentConfig::parse("seed = 3").unwrap().resolve(None, None).unwrap();
        assert_eq!(cfg.seed(), 3);
        let over = ExperimentConfig::parse("seed = 3").unwrap().resolve(Some(9), None).unwrap();
        assert_eq!(over.seed(), 9);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for text in ["sed = 1", "[map]\nepoch = 3", "[surrogate]\nbias = true", "[dataset.synthetic]\nn = 3"] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.code, 2, "{text}");
        }
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::parse("seed = 1\n[surrogate]\nfinal_learning_rate = 1e-4")
            .unwrap()
            .resolve(None, Some("/x".into()))
            .unwrap();
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("epochs = 200"));
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
        assert_eq!(cfg.dataset.idx.root, "/x");
    }

    #[test]
    fn bad_layers_are_config_errors() {
        let cfg = ExperimentConfig::parse("seed = 1\n[model]\nlayers = [\"dense 2 4\", \"wobble\"]").unwrap();
        assert_eq!(cfg.resolve(None, None).unwrap_err().code, 2);
        let cfg = ExperimentConfig::parse("seed = 1\n[evaluation]\nmethods = [\"bogus\"]");
        assert_eq!(cfg.unwrap_err().code, 2);
    }

    #[test]
    fn book_config_is_the_default() {
        let chapter = include_str!("../../../book/src/cli.md");
        let block = chapter.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
        let book = ExperimentConfig::parse(block).unwrap().resolve(None, None).unwrap();
        let default = ExperimentConfig::parse("seed = 0").unwrap().resolve(None, None).unwrap();
        assert_eq!(book, default);
    }
}
