//! Parameter initialization, MAP training and the exact-Jacobian oracle.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff;
use crate::error::{Error, Result};
use crate::lla::softmax;
use crate::network::NetworkSpec;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamRole, ParamVector};

/// Largest `C × P` Jacobian the oracle will materialize.
pub const ORACLE_LIMIT: usize = 10_000_000;

/// Draws weights from `N(0, 1 / fan_in)` and sets biases to zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; spec.param_count()];
    for block in spec.layout().blocks() {
        if block.role != ParamRole::Weight {
            continue;
        }
        let fan_in = spec.layers()[block.layer].fan_in().unwrap_or(1).max(1);
        let scale = 1.0 / (fan_in as f64).sqrt();
        for w in &mut values[block.range()] {
            *w = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    ParamVector::new(values, spec.layout().clone()).expect("layout from spec")
}

/// `J_θ(x)`, a `C × P` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    pub entries: DMatrix<f64>,
    pub input_id: Option<usize>,
}

impl JacobianMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self {
            entries,
            input_id: None,
        }
    }

    pub fn outputs(&self) -> usize {
        self.entries.nrows()
    }

    pub fn params(&self) -> usize {
        self.entries.ncols()
    }
}

pub(crate) fn oracle_guard(what: &'static str, entries: usize) -> Result<()> {
    if entries > ORACLE_LIMIT {
        return Err(Error::OracleScale {
            what,
            entries,
            limit: ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// Assembles `J_θ(x)` row by row from `C` reverse passes.
pub fn exact_jacobian(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<JacobianMatrix> {
    let c = spec.output_dim();
    let p = spec.param_count();
    oracle_guard("exact Jacobian", c * p)?;
    let onehots: Vec<Vec<f64>> = (0..c)
        .map(|a| {
            let mut u = vec![0.0; c];
            u[a] = 1.0;
            u
        })
        .collect();
    let rows = diff::vjp_rows(spec, theta, x, &onehots)?;
    let mut entries = DMatrix::zeros(c, p);
    for (a, row) in rows.iter().enumerate() {
        for (k, &v) in row.iter().enumerate() {
            entries[(a, k)] = v;
        }
    }
    Ok(JacobianMatrix::new(entries))
}

/// MAP training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Result of [`train_map`].
#[derive(Debug, Clone)]
pub struct MapFit {
    pub theta: ParamVector,
    /// Full-data regularized loss after each epoch; entry 0 is the loss at
    /// initialization.
    pub trace: Vec<f64>,
}

/// Mean softmax negative log-likelihood plus `‖θ‖² / (2 σ0² N)`, where `N`
/// is `n_total` (the full dataset size, also for mini-batches).
pub fn regularized_loss(
    spec: &NetworkSpec,
    theta: &ParamVector,
    inputs: &[Vec<f64>],
    labels: &[usize],
    sigma0: f64,
    n_total: usize,
) -> Result<f64> {
    let mut nll = 0.0;
    for (x, &y) in inputs.iter().zip(labels) {
        let f = diff::forward(spec, theta, x)?;
        nll -= crate::lla::log_softmax(&f)[y];
    }
    Ok(nll / inputs.len() as f64 + theta.norm_squared() / (2.0 * sigma0 * sigma0 * n_total as f64))
}

/// Gradient of [`regularized_loss`].
pub fn regularized_grad(
    spec: &NetworkSpec,
    theta: &ParamVector,
    inputs: &[Vec<f64>],
    labels: &[usize],
    sigma0: f64,
    n_total: usize,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; theta.len()];
    let inv_b = 1.0 / inputs.len() as f64;
    for (x, &y) in inputs.iter().zip(labels) {
        let f = diff::forward(spec, theta, x)?;
        let mut u = softmax(&f);
        u[y] -= 1.0;
        u.iter_mut().for_each(|v| *v *= inv_b);
        diff::vjp_accumulate(spec, theta, x, &u, &mut grad)?;
    }
    let prior = 1.0 / (sigma0 * sigma0 * n_total as f64);
    for (g, t) in grad.iter_mut().zip(theta.values()) {
        *g += prior * t;
    }
    Ok(grad)
}

/// Mini-batch Adam on the softmax NLL with a Gaussian prior `N(0, σ0² I)`.
pub fn train_map(spec: &NetworkSpec, data: &Dataset, sigma0: f64, config: &MapConfig) -> Result<MapFit> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if !(sigma0 > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    if data.classes > spec.output_dim() {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes but the network has {} outputs",
            data.classes,
            spec.output_dim()
        )));
    }
    let n = data.len();
    let mut theta = init_params(spec, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9));
    let mut opt = Adam::new(config.adam, theta.len());
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs + 1);
    trace.push(regularized_loss(spec, &theta, &data.inputs, &data.labels, sigma0, n)?);

    let mut step = 0;
    let mut xb = Vec::with_capacity(config.batch_size);
    let mut yb = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.push(data.inputs[i].clone());
                yb.push(data.labels[i]);
            }
            let grad = regularized_grad(spec, &theta, &xb, &yb, sigma0, n)?;
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            opt.step(theta.values_mut(), &grad);
            step += 1;
        }
        let loss = regularized_loss(spec, &theta, &data.inputs, &data.labels, sigma0, n)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(loss);
    }
    Ok(MapFit { theta, trace })
}

/// Fraction of examples whose MAP argmax equals the label.
pub fn accuracy(spec: &NetworkSpec, theta: &ParamVector, data: &Dataset) -> Result<f64> {
    let mut correct = 0;
    for (x, &y) in data.inputs.iter().zip(&data.labels) {
        let f = diff::forward(spec, theta, x)?;
        if crate::metrics::argmax(&f) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
