//! Exact linearized Laplace machinery.
//!
//! The network is linearized around the MAP weights `θ*`; with a Gaussian
//! prior `N(0, σ0² I)` the weight posterior is Gaussian with precision
//!
//! ```text
//! Σ⁻¹ = Σₙ Jₙᵀ Λₙ Jₙ + σ0⁻² I
//! ```
//!
//! where `Jₙ` is the Jacobian at `xₙ` and `Λₙ` the curvature of the negative
//! log-likelihood in output space. The predictive at `x*` is
//! `N(f_θ*(x*), J(x*) Σ J(x*)ᵀ)`. Everything here materializes Jacobians and
//! is meant for networks small enough to do so; see [`crate::surrogate`] for
//! the scalable path.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::models::{oracle_guard, JacobianMatrix};

mod evidence;
mod kernel;
mod posterior;

pub use evidence::{default_prior_grid, log_marginal_likelihood, tune_prior, PriorSearch};
pub use kernel::{lla_kernel_direct, lla_kernel_woodbury, ntk, BlockKernel, ExactNtk, KernelFn, WOODBURY_LIMIT};
pub use posterior::{map_curvatures, DirectPosterior, Posterior, PredictiveGaussian, WoodburyPosterior};

/// Observation model `p(y | f)` on network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Likelihood {
    /// Categorical over `softmax(f)`.
    Softmax,
    /// `N(y; f, noise_variance · I)`.
    Gaussian { noise_variance: f64 },
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Likelihood::Softmax),
            "gaussian" => Ok(Likelihood::Gaussian { noise_variance: 1.0 }),
            other => Err(Error::UnknownLikelihood(other.to_string())),
        }
    }
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Likelihood::Softmax => f.write_str("softmax"),
            Likelihood::Gaussian { noise_variance } => write!(f, "gaussian({noise_variance})"),
        }
    }
}

/// A label or a real-valued target.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Real(Vec<f64>),
}

pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = f.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + f.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    f.iter().map(|v| v - lse).collect()
}

/// `log p(y | f)`.
pub fn log_likelihood(likelihood: Likelihood, target: &Target, f: &[f64]) -> Result<f64> {
    match (likelihood, target) {
        (Likelihood::Softmax, &Target::Class(y)) => {
            check_class(y, f.len())?;
            Ok(log_softmax(f)[y])
        }
        (Likelihood::Gaussian { noise_variance }, Target::Real(y)) => {
            if y.len() != f.len() {
                return Err(shape_err("target", "target length differs from output dimension"));
            }
            let sq: f64 = y.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
            let c = f.len() as f64;
            Ok(-0.5 * sq / noise_variance
                - 0.5 * c * (2.0 * std::f64::consts::PI * noise_variance).ln())
        }
        (l, t) => Err(Error::InvalidArgument(format!(
            "target {t:?} does not match likelihood {l}"
        ))),
    }
}

fn check_class(y: usize, c: usize) -> Result<()> {
    if y >= c {
        return Err(Error::InvalidArgument(format!("class {y} outside [0, {c})")));
    }
    Ok(())
}

/// `Λ = -∇²_f log p(y | f)`, a `C × C` PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureMatrix {
    pub entries: DMatrix<f64>,
    pub example_id: Option<usize>,
}

/// Output-space curvature of the negative log-likelihood.
///
/// Softmax gives `diag(p) − p pᵀ` with `p = softmax(f)`, independent of the
/// label; the label is still validated. Gaussian gives `I / noise_variance`.
pub fn curvature(likelihood: Likelihood, target: &Target, f: &[f64]) -> Result<CurvatureMatrix> {
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("outputs"));
    }
    let c = f.len();
    let entries = match (likelihood, target) {
        (Likelihood::Softmax, &Target::Class(y)) => {
            check_class(y, c)?;
            let p = softmax(f);
            DMatrix::from_fn(c, c, |a, b| if a == b { p[a] - p[a] * p[a] } else { -p[a] * p[b] })
        }
        (Likelihood::Gaussian { noise_variance }, Target::Real(_)) => {
            if !(noise_variance > 0.0) {
                return Err(Error::InvalidArgument("noise variance must be positive".into()));
            }
            DMatrix::identity(c, c) / noise_variance
        }
        (l, t) => {
            return Err(Error::InvalidArgument(format!(
                "target {t:?} does not match likelihood {l}"
            )))
        }
    };
    Ok(CurvatureMatrix {
        entries,
        example_id: None,
    })
}

/// Posterior precision `Σ⁻¹` in parameter space.
#[derive(Debug, Clone, PartialEq)]
pub struct GgnPrecision {
    pub entries: DMatrix<f64>,
    pub sigma0: f64,
}

impl GgnPrecision {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Data term `Σₙ Jₙᵀ Λₙ Jₙ` of the generalized Gauss–Newton matrix.
pub fn ggn_data_term(jacobians: &[JacobianMatrix], curvatures: &[CurvatureMatrix]) -> Result<DMatrix<f64>> {
    if jacobians.is_empty() {
        return Err(Error::InvalidArgument("GGN needs at least one example".into()));
    }
    if jacobians.len() != curvatures.len() {
        return Err(Error::InvalidArgument(format!(
            "{} Jacobians but {} curvatures",
            jacobians.len(),
            curvatures.len()
        )));
    }
    let p = jacobians[0].params();
    oracle_guard("GGN precision", p * p)?;
    let mut acc = DMatrix::zeros(p, p);
    for (j, lam) in jacobians.iter().zip(curvatures) {
        if j.params() != p || lam.entries.nrows() != j.outputs() {
            return Err(shape_err("ggn", "Jacobian/curvature shapes disagree"));
        }
        let lj = &lam.entries * &j.entries;
        acc.gemm_tr(1.0, &j.entries, &lj, 1.0);
    }
    Ok(crate::linalg::symmetrize(&acc))
}

/// `Σₙ Jₙᵀ Λₙ Jₙ + σ0⁻² I`, accumulated in one pass.
pub fn ggn_precision(
    jacobians: &[JacobianMatrix],
    curvatures: &[CurvatureMatrix],
    sigma0: f64,
) -> Result<GgnPrecision> {
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
    }
    let mut entries = ggn_data_term(jacobians, curvatures)?;
    let prior = 1.0 / (sigma0 * sigma0);
    for i in 0..entries.nrows() {
        entries[(i, i)] += prior;
    }
    Ok(GgnPrecision { entries, sigma0 })
}

/// Prior-only precision `σ0⁻² I` (no data).
pub fn prior_precision(params: usize, sigma0: f64) -> GgnPrecision {
    GgnPrecision {
        entries: DMatrix::identity(params, params) / (sigma0 * sigma0),
        sigma0,
    }
}
