//! Desk-scale experiment pipeline shared by the CLI and the acceptance suite.
//!
//! Two-moons is the in-distribution task, a ring of radius 2.5 around the
//! moons provides context points and a ring of radius 3.5 serves as OOD data.
//! All sets are normalized with the training statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_ring_ood, make_two_moons, Dataset, NormStats, Role};
use crate::diff;
use crate::error::{Error, Result};
use crate::lla::{map_curvatures, tune_prior, DirectPosterior, Likelihood, Posterior, Target};
use crate::metrics::{
    accuracy, auc_roc, ece, gaussian_entropy, nll, softmax_entropy, softmax_probs_mc, MethodMetrics, Origin,
    ScoredExample, DEFAULT_ECE_BINS, DEFAULT_MC_SAMPLES,
};
use crate::models::{train_map, MapConfig, MapFit};
use crate::network::{Layer, NetworkSpec};
use crate::params::ParamVector;
use crate::surrogate::{train_surrogate, FeaturePosterior, SurrogateConfig, SurrogateFit, SurrogateSpec};

/// Sizes and geometry of the synthetic datasets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeskDataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub noise: f64,
    pub n_context: usize,
    pub context_radius: f64,
    pub n_ood: usize,
    pub ood_radius: f64,
    pub ring_jitter: f64,
}

impl Default for DeskDataConfig {
    fn default() -> Self {
        Self {
            n_train: 200,
            n_test: 500,
            noise: 0.1,
            n_context: 200,
            context_radius: 2.5,
            n_ood: 500,
            ood_radius: 3.5,
            ring_jitter: 0.0,
        }
    }
}

/// The four normalized datasets of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub train: Dataset,
    pub test: Dataset,
    pub context: Dataset,
    pub ood: Dataset,
    pub stats: NormStats,
}

impl ExperimentData {
    /// Normalizes every set with statistics fitted on `train`.
    pub fn new(train: Dataset, test: Dataset, context: Dataset, ood: Dataset) -> Result<Self> {
        let stats = NormStats::fit(&train)?;
        Ok(Self {
            train: train.normalize(&stats)?,
            test: test.normalize(&stats)?,
            context: context.normalize(&stats)?,
            ood: ood.normalize(&stats)?,
            stats,
        })
    }
}

pub fn desk_data(config: &DeskDataConfig, seed: u64) -> Result<ExperimentData> {
    let s = seed.wrapping_mul(4);
    ExperimentData::new(
        make_two_moons(config.n_train, config.noise, s),
        make_two_moons(config.n_test, config.noise, s + 1).with_role(Role::Test),
        make_ring_ood(config.n_context, config.context_radius, config.ring_jitter, s + 2).with_role(Role::Context),
        make_ring_ood(config.n_ood, config.ood_radius, config.ring_jitter, s + 3),
    )
}

/// The 2-16-16-2 tanh MLP used at desk scale.
pub fn desk_network() -> NetworkSpec {
    NetworkSpec::mlp(&[2, 16, 16, 2], Layer::Tanh).expect("valid widths")
}

pub fn class_targets(data: &Dataset) -> Vec<Target> {
    data.labels.iter().map(|&y| Target::Class(y)).collect()
}

/// Evaluation methods, named as in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Map,
    LlaExact,
    Scalla,
    ScallaBiased,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Map, Method::LlaExact, Method::Scalla, Method::ScallaBiased];

    pub fn name(self) -> &'static str {
        match self {
            Method::Map => "map",
            Method::LlaExact => "lla-exact",
            Method::Scalla => "scalla",
            Method::ScallaBiased => "scalla-biased",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected map, lla-exact, scalla or scalla-biased)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mc_samples: usize,
    pub ece_bins: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mc_samples: DEFAULT_MC_SAMPLES,
            ece_bins: DEFAULT_ECE_BINS,
            seed: 0,
        }
    }
}

fn example_seed(seed: u64, index: usize, origin: Origin) -> u64 {
    // splitmix64 finalizer over (seed, index, origin)
    let tag = (index as u64) << 1 | u64::from(origin == Origin::Ood);
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Scores the test set (in-distribution) and the OOD set. Without a
/// posterior, probabilities are the MAP softmax and no Gaussian AUC is
/// reported.
pub fn evaluate(
    method: &str,
    posterior: Option<&dyn Posterior>,
    spec: &NetworkSpec,
    theta: &ParamVector,
    test: &Dataset,
    ood: &Dataset,
    config: &EvalConfig,
) -> Result<MethodMetrics> {
    let mut scored_in = Vec::with_capacity(test.len());
    let mut scored_ood = Vec::with_capacity(ood.len());
    let mut gauss_in = Vec::new();
    let mut gauss_ood = Vec::new();
    for (data, origin) in [(test, Origin::InDistribution), (ood, Origin::Ood)] {
        for (i, (x, &y)) in data.inputs.iter().zip(&data.labels).enumerate() {
            let probs = match posterior {
                None => crate::lla::softmax(&diff::forward(spec, theta, x)?),
                Some(post) => {
                    let pred = post.predictive(x)?;
                    let g = gaussian_entropy(&pred)?;
                    match origin {
                        Origin::InDistribution => gauss_in.push(g),
                        Origin::Ood => gauss_ood.push(g),
                    }
                    softmax_probs_mc(&pred, config.mc_samples, example_seed(config.seed, i, origin))?
                }
            };
            let score = softmax_entropy(&probs);
            let ex = ScoredExample::new(probs, y, score, origin)?;
            match origin {
                Origin::InDistribution => scored_in.push(ex),
                Origin::Ood => scored_ood.push(ex),
            }
        }
    }
    let s_in: Vec<f64> = scored_in.iter().map(|s| s.score).collect();
    let s_ood: Vec<f64> = scored_ood.iter().map(|s| s.score).collect();
    Ok(MethodMetrics {
        method: method.to_string(),
        acc: accuracy(&scored_in),
        nll: nll(&scored_in),
        ece: ece(&scored_in, config.ece_bins)?,
        auc: auc_roc(&s_in, &s_ood)?,
        gaussian_auc: if posterior.is_some() {
            Some(auc_roc(&gauss_in, &gauss_ood)?)
        } else {
            None
        },
    })
}

/// Every setting of the end-to-end desk run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub data: DeskDataConfig,
    pub map: MapConfig,
    /// Prior scale used during MAP training.
    pub map_sigma0: f64,
    /// Grid searched by evidence maximization after MAP training.
    pub prior_grid: Vec<f64>,
    pub surrogate: SurrogateConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DeskDataConfig::default(),
            map: MapConfig::default(),
            map_sigma0: 1.0,
            prior_grid: crate::lla::default_prior_grid(),
            surrogate: SurrogateConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Applies one seed to every stochastic stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.map.seed = seed;
        self.surrogate.seed = seed;
        self.eval.seed = seed;
        self
    }
}

/// MAP training followed by evidence-based prior tuning.
pub fn fit_map_and_prior(
    spec: &NetworkSpec,
    data: &ExperimentData,
    config: &PipelineConfig,
) -> Result<(MapFit, f64)> {
    let fit = train_map(spec, &data.train, config.map_sigma0, &config.map)?;
    let search = tune_prior(
        spec,
        &fit.theta,
        Likelihood::Softmax,
        &data.train.inputs,
        &class_targets(&data.train),
        &config.prior_grid,
    )?;
    Ok((fit, search.sigma0))
}

pub fn fit_surrogate(
    spec: &NetworkSpec,
    theta: &ParamVector,
    data: &ExperimentData,
    config: &SurrogateConfig,
    biased: bool,
) -> Result<SurrogateFit> {
    let cfg = SurrogateConfig { biased, ..*config };
    train_surrogate(spec, theta, &data.train.inputs, &data.context.inputs, &cfg)
}

/// Evaluates one method given an already fitted MAP network and, for the
/// surrogate methods, a trained surrogate.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_method(
    method: Method,
    spec: &NetworkSpec,
    theta: &ParamVector,
    sigma0: f64,
    surrogate: Option<&SurrogateSpec>,
    data: &ExperimentData,
    config: &EvalConfig,
) -> Result<MethodMetrics> {
    let name = method.name();
    match method {
        Method::Map => evaluate(name, None, spec, theta, &data.test, &data.ood, config),
        Method::LlaExact => {
            let post = DirectPosterior::fit(
                spec,
                theta,
                Likelihood::Softmax,
                &data.train.inputs,
                &class_targets(&data.train),
                sigma0,
            )?;
            evaluate(name, Some(&post), spec, theta, &data.test, &data.ood, config)
        }
        Method::Scalla | Method::ScallaBiased => {
            let sur = surrogate.ok_or_else(|| Error::Config(format!("method {name} needs a trained surrogate")))?;
            let lams = map_curvatures(spec, theta, Likelihood::Softmax, &data.train.inputs, &class_targets(&data.train))?;
            let post = FeaturePosterior::fit(spec, theta, sur, &data.train.inputs, &lams, sigma0)?;
            evaluate(name, Some(&post), spec, theta, &data.test, &data.ood, config)
        }
    }
}

/// Results of [`run_desk_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub sigma0: f64,
    pub rows: Vec<MethodMetrics>,
}

/// Data generation, MAP, prior tuning, surrogate fitting and evaluation for
/// the requested methods, all from one seed.
pub fn run_desk_pipeline(config: &PipelineConfig, seed: u64, methods: &[Method]) -> Result<PipelineResult> {
    let config = config.clone().with_seed(seed);
    let data = desk_data(&config.data, seed)?;
    let spec = desk_network();
    let (map, sigma0) = fit_map_and_prior(&spec, &data, &config)?;
    let mut rows = Vec::with_capacity(methods.len());
    for &method in methods {
        let surrogate = match method {
            Method::Scalla => Some(fit_surrogate(&spec, &map.theta, &data, &config.surrogate, false)?.surrogate),
            Method::ScallaBiased => Some(fit_surrogate(&spec, &map.theta, &data, &config.surrogate, true)?.surrogate),
            _ => None,
        };
        rows.push(evaluate_method(method, &spec, &map.theta, sigma0, surrogate.as_ref(), &data, &config.eval)?);
    }
    Ok(PipelineResult { sigma0, rows })
}
