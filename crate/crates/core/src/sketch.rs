//! Randomized NTK estimation from Jacobian–vector products.
//!
//! For any random `v` with `E[v] = 0` and `E[v vᵀ] = I`,
//! `E[(J(x) v)(J(x') v)ᵀ] = J(x) J(x')ᵀ`, so averaging outer products of
//! sketches `z_v(x) = J(x) v` estimates the NTK without forming `J`.
//!
//! For a scalar output the single-sketch variance of `z_v(x)²` is
//! `2 tr(JᵀJ)²` under Gaussian projections and
//! `2 tr(JᵀJ)² − 2 ‖diag(JᵀJ)‖²` under Rademacher projections, which is why
//! Rademacher is the default.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff;
use crate::error::{Error, Result};
use crate::lla::BlockKernel;
use crate::models::JacobianMatrix;
use crate::network::NetworkSpec;
use crate::params::{Distribution, ParamVector, TangentVector};

/// Counter-based projection source: the vector for `(seed, step)` does not
/// depend on how many other vectors were drawn before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionStream {
    pub seed: u64,
    pub distribution: Distribution,
}

impl ProjectionStream {
    pub fn new(seed: u64, distribution: Distribution) -> Self {
        Self { seed, distribution }
    }

    pub fn sample(&self, step: u64, p: usize) -> TangentVector {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step);
        draw(&mut rng, p, self.distribution)
    }
}

fn draw(rng: &mut ChaCha8Rng, p: usize, distribution: Distribution) -> TangentVector {
    let values = match distribution {
        Distribution::Gaussian => (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        Distribution::Rademacher | Distribution::Deterministic => (0..p)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect(),
    };
    let distribution = match distribution {
        Distribution::Deterministic => Distribution::Rademacher,
        d => d,
    };
    TangentVector::new(values, distribution)
}

/// Draws `v ∈ R^P` with i.i.d. standard normal or uniform ±1 entries.
/// `Deterministic` is treated as Rademacher.
pub fn sample_projection(p: usize, distribution: Distribution, seed: u64) -> TangentVector {
    ProjectionStream::new(seed, distribution).sample(0, p)
}

/// `z_v(x) = J(x) v` for one input under one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchSample {
    pub z: Vec<f64>,
    pub projection_id: usize,
    pub input_id: usize,
}

/// Sketches of every input under every projection, `samples[s][i]`.
pub fn sketch_all(
    spec: &NetworkSpec,
    theta: &ParamVector,
    inputs: &[Vec<f64>],
    projections: &[TangentVector],
) -> Result<Vec<Vec<SketchSample>>> {
    projections
        .iter()
        .enumerate()
        .map(|(s, v)| {
            inputs
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    Ok(SketchSample {
                        z: diff::jvp(spec, theta, x, v)?,
                        projection_id: s,
                        input_id: i,
                    })
                })
                .collect()
        })
        .collect()
}

/// `(1/S) Σ_s z_{v_s}(x1) z_{v_s}(x2)ᵀ`, a `C × C` block.
pub fn kernel_estimate(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x1: &[f64],
    x2: &[f64],
    projections: &[TangentVector],
) -> Result<BlockKernel> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("kernel estimate needs at least one projection".into()));
    }
    let c = spec.output_dim();
    let same = x1 == x2;
    let mut acc = DMatrix::zeros(c, c);
    for v in projections {
        let z1 = diff::jvp(spec, theta, x1, v)?;
        let z2 = if same { z1.clone() } else { diff::jvp(spec, theta, x2, v)? };
        for a in 0..c {
            for b in 0..c {
                acc[(a, b)] += z1[a] * z2[b];
            }
        }
    }
    BlockKernel::new(c, acc / projections.len() as f64)
}

/// Closed-form variance of the single-sketch estimate `z_v(x)²` for a
/// scalar-output Jacobian.
pub fn estimator_variance_closed_form(j: &JacobianMatrix, distribution: Distribution) -> Result<f64> {
    if j.outputs() != 1 {
        return Err(Error::ScalarOutputOnly(j.outputs()));
    }
    let trace: f64 = j.entries.iter().map(|v| v * v).sum();
    let gaussian = 2.0 * trace * trace;
    match distribution {
        Distribution::Gaussian => Ok(gaussian),
        Distribution::Rademacher => {
            let diag_sq: f64 = j.entries.iter().map(|v| v.powi(4)).sum();
            Ok(gaussian - 2.0 * diag_sq)
        }
        Distribution::Deterministic => Err(Error::InvalidArgument(
            "closed-form variance is defined for gaussian or rademacher projections".into(),
        )),
    }
}
