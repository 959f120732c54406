//! Laplace evidence with the GGN Hessian and grid search over the prior scale.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::log_det_spd;
use crate::models::exact_jacobian;
use crate::network::NetworkSpec;
use crate::params::ParamVector;

use super::kernel::map_mean;
use super::posterior::map_curvatures;
use super::{ggn_data_term, log_likelihood, GgnPrecision, Likelihood, Target};

/// Laplace approximation to `log p(D | σ0)`:
///
/// ```text
/// Σₙ log p(yₙ | fₙ) − ‖θ*‖² / (2σ0²) − (P/2) log(2πσ0²) − ½ log det Σ⁻¹ + (P/2) log 2π
/// ```
pub fn log_marginal_likelihood(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    likelihood: Likelihood,
    inputs: &[Vec<f64>],
    targets: &[Target],
    sigma0: f64,
    precision: &GgnPrecision,
) -> Result<f64> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidArgument("inputs and targets differ in length".into()));
    }
    let mut fit = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let f = map_mean(spec, theta_star, x)?;
        fit += log_likelihood(likelihood, t, &f)?;
    }
    evidence_from_parts(fit, theta_star.norm_squared(), theta_star.len(), sigma0, &precision.entries)
}

fn evidence_from_parts(fit: f64, norm_sq: f64, p: usize, sigma0: f64, precision: &DMatrix<f64>) -> Result<f64> {
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
    }
    let p = p as f64;
    let s2 = sigma0 * sigma0;
    let log_det_precision = log_det_spd(precision, "GGN precision")?;
    Ok(fit - norm_sq / (2.0 * s2) - 0.5 * p * (2.0 * PI * s2).ln() - 0.5 * log_det_precision
        + 0.5 * p * (2.0 * PI).ln())
}

/// Default grid: 25 log-spaced values on `[1e-2, 1e2]`.
pub fn default_prior_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / 24.0)).collect()
}

/// Outcome of [`tune_prior`].
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSearch {
    pub sigma0: f64,
    /// `(σ0, evidence)` for every grid point, in grid order.
    pub evidence: Vec<(f64, f64)>,
}

/// Grid argmax of the Laplace evidence; ties (equal to 1e-12 relative) go
/// to the smaller `σ0`.
/// Jacobians and the GGN data term are computed once and reused.
pub fn tune_prior(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    likelihood: Likelihood,
    inputs: &[Vec<f64>],
    targets: &[Target],
    grid: &[f64],
) -> Result<PriorSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("prior grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("prior grid value {bad} is not positive")));
    }
    let p = spec.param_count();
    let data_term = if inputs.is_empty() {
        DMatrix::zeros(p, p)
    } else {
        let lams = map_curvatures(spec, theta_star, likelihood, inputs, targets)?;
        let js = inputs
            .iter()
            .map(|x| exact_jacobian(spec, theta_star, x))
            .collect::<Result<Vec<_>>>()?;
        ggn_data_term(&js, &lams)?
    };
    let mut fit = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        fit += log_likelihood(likelihood, t, &map_mean(spec, theta_star, x)?)?;
    }
    let norm_sq = theta_star.norm_squared();

    let mut evidence = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &s in grid {
        let mut prec = data_term.clone();
        for i in 0..p {
            prec[(i, i)] += 1.0 / (s * s);
        }
        let e = evidence_from_parts(fit, norm_sq, p, s, &prec)?;
        evidence.push((s, e));
        best = match best {
            Some((bs, be)) => {
                let tie = (be - e).abs() <= 1e-12 * (1.0 + be.abs().max(e.abs()));
                if (tie && bs <= s) || (!tie && be > e) {
                    Some((bs, be))
                } else {
                    Some((s, e))
                }
            }
            None => Some((s, e)),
        };
    }
    Ok(PriorSearch {
        sigma0: best.expect("grid nonempty").0,
        evidence,
    })
}
