use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{cholesky, psd_floor};
use crate::models::exact_jacobian;
use crate::network::NetworkSpec;
use crate::params::ParamVector;

use super::kernel::{map_mean, WoodburyFactor};
use super::{curvature, ggn_precision, CurvatureMatrix, GgnPrecision, KernelFn, Likelihood, Target};

/// `N(mean, covariance)` over the `C` network outputs at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveGaussian {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl PredictiveGaussian {
    /// Symmetrizes the covariance and floors its eigenvalues at zero.
    pub fn new(mean: Vec<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let c = mean.len();
        if covariance.nrows() != c || covariance.ncols() != c {
            return Err(shape_err(
                "predictive",
                format!("mean has {c} entries, covariance is {}x{}", covariance.nrows(), covariance.ncols()),
            ));
        }
        if !covariance.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("predictive covariance"));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            covariance: psd_floor(&covariance),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Anything that yields a Gaussian predictive at a query input.
pub trait Posterior {
    fn predictive(&self, x: &[f64]) -> Result<PredictiveGaussian>;
}

/// Curvatures `Λₙ` evaluated at the MAP outputs `f_θ*(xₙ)`.
pub fn map_curvatures(
    spec: &NetworkSpec,
    theta: &ParamVector,
    likelihood: Likelihood,
    inputs: &[Vec<f64>],
    targets: &[Target],
) -> Result<Vec<CurvatureMatrix>> {
    if inputs.len() != targets.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    inputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(n, (x, t))| {
            let f = map_mean(spec, theta, x)?;
            let mut lam = curvature(likelihood, t, &f)?;
            lam.example_id = Some(n);
            Ok(lam)
        })
        .collect()
}

/// Parameter-space LLA posterior with a Cholesky factor of the GGN precision.
#[derive(Debug, Clone)]
pub struct DirectPosterior {
    spec: NetworkSpec,
    theta: ParamVector,
    precision: GgnPrecision,
    chol: Cholesky<f64, Dyn>,
}

impl DirectPosterior {
    pub fn from_precision(spec: &NetworkSpec, theta: &ParamVector, precision: GgnPrecision) -> Result<Self> {
        if precision.dim() != spec.param_count() {
            return Err(shape_err("precision", "dimension differs from parameter count"));
        }
        let chol = cholesky(precision.entries.clone(), "GGN precision")?;
        Ok(Self {
            spec: spec.clone(),
            theta: theta.clone(),
            precision,
            chol,
        })
    }

    /// Accumulates the GGN precision over the data and factors it.
    pub fn fit(
        spec: &NetworkSpec,
        theta: &ParamVector,
        likelihood: Likelihood,
        inputs: &[Vec<f64>],
        targets: &[Target],
        sigma0: f64,
    ) -> Result<Self> {
        let lams = map_curvatures(spec, theta, likelihood, inputs, targets)?;
        let js = inputs
            .iter()
            .map(|x| exact_jacobian(spec, theta, x))
            .collect::<Result<Vec<_>>>()?;
        let precision = ggn_precision(&js, &lams, sigma0)?;
        Self::from_precision(spec, theta, precision)
    }

    pub fn precision(&self) -> &GgnPrecision {
        &self.precision
    }
}

impl Posterior for DirectPosterior {
    fn predictive(&self, x: &[f64]) -> Result<PredictiveGaussian> {
        let mean = map_mean(&self.spec, &self.theta, x)?;
        let j = exact_jacobian(&self.spec, &self.theta, x)?.entries;
        let cov = &j * self.chol.solve(&j.transpose());
        PredictiveGaussian::new(mean, cov)
    }
}

/// Function-space LLA posterior for an arbitrary base kernel.
pub struct WoodburyPosterior<'a, K> {
    spec: &'a NetworkSpec,
    theta: &'a ParamVector,
    kernel: K,
    factor: WoodburyFactor,
}

impl<'a, K: KernelFn> WoodburyPosterior<'a, K> {
    pub fn fit(
        spec: &'a NetworkSpec,
        theta: &'a ParamVector,
        kernel: K,
        train: &[Vec<f64>],
        curvatures: &[CurvatureMatrix],
        sigma0: f64,
    ) -> Result<Self> {
        if kernel.classes() != spec.output_dim() {
            return Err(shape_err("kernel", "kernel classes differ from network outputs"));
        }
        let factor = WoodburyFactor::new(train, curvatures, sigma0, &kernel)?;
        Ok(Self {
            spec,
            theta,
            kernel,
            factor,
        })
    }

    pub fn kernel(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.factor.kernel(x1, x2, &self.kernel)?.matrix)
    }
}

impl<K: KernelFn> Posterior for WoodburyPosterior<'_, K> {
    fn predictive(&self, x: &[f64]) -> Result<PredictiveGaussian> {
        let mean = map_mean(self.spec, self.theta, x)?;
        PredictiveGaussian::new(mean, self.kernel(x, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_two_moons;
    use crate::lla::{ntk, prior_precision, ExactNtk};
    use crate::linalg::{min_eigenvalue, relative_error};
    use crate::models::{init_params, train_map, MapConfig};
    use crate::network::Layer;

    #[test]
    fn mean_is_map_output_on_every_path() {
        let spec = NetworkSpec::mlp(&[2, 6, 2], Layer::Tanh).unwrap();
        let theta = init_params(&spec, 1);
        let train: Vec<Vec<f64>> = vec![vec![0.0, 1.0], vec![1.0, -1.0], vec![0.5, 0.5]];
        let targets: Vec<Target> = (0..3).map(|i| Target::Class(i % 2)).collect();
        let direct = DirectPosterior::fit(&spec, &theta, Likelihood::Softmax, &train, &targets, 1.0).unwrap();
        let lams = map_curvatures(&spec, &theta, Likelihood::Softmax, &train, &targets).unwrap();
        let wood = WoodburyPosterior::fit(
            &spec,
            &theta,
            ExactNtk { spec: &spec, theta: &theta },
            &train,
            &lams,
            1.0,
        )
        .unwrap();
        let x = [0.3, 0.9];
        let f = crate::diff::forward(&spec, &theta, &x).unwrap();
        for p in [direct.predictive(&x).unwrap(), wood.predictive(&x).unwrap()] {
            assert_eq!(p.mean.as_slice(), f.as_slice());
        }
    }

    #[test]
    fn no_data_is_prior_predictive() {
        let spec = NetworkSpec::mlp(&[2, 5, 3], Layer::Relu).unwrap();
        let theta = init_params(&spec, 6);
        let post = DirectPosterior::from_precision(&spec, &theta, prior_precision(spec.param_count(), 0.5)).unwrap();
        let x = [1.0, 0.25];
        let cov = post.predictive(&x).unwrap().covariance;
        let want = ntk(&x, &x, &spec, &theta).unwrap().matrix * 0.25;
        assert!(relative_error(&cov, &want) < 1e-10);
    }

    #[test]
    fn training_points_are_more_certain_than_far_points() {
        let data = make_two_moons(60, 0.1, 0);
        let spec = NetworkSpec::mlp(&[2, 8, 2], Layer::Tanh).unwrap();
        let fit = train_map(&spec, &data, 2.0, &MapConfig { epochs: 60, ..Default::default() }).unwrap();
        let targets: Vec<Target> = data.labels.iter().map(|&y| Target::Class(y)).collect();
        let post = DirectPosterior::fit(&spec, &fit.theta, Likelihood::Softmax, &data.inputs, &targets, 2.0).unwrap();
        let near = post.predictive(&data.inputs[0]).unwrap().covariance.trace();
        let far = post.predictive(&[6.0, -5.0]).unwrap().covariance.trace();
        assert!(near < far, "{near} vs {far}");
    }

    #[test]
    fn covariance_is_floored() {
        let p = PredictiveGaussian::new(
            vec![0.0, 0.0],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1e-9, -1e-12]),
        )
        .unwrap();
        assert_eq!(p.covariance, p.covariance.transpose());
        assert!(min_eigenvalue(&p.covariance) >= -1e-15);
    }
}
