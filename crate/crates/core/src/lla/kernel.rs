use nalgebra::DMatrix;

use crate::diff;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{cholesky, psd_sqrt};
use crate::models::{exact_jacobian, oracle_guard};
use crate::network::NetworkSpec;
use crate::params::ParamVector;

use super::{CurvatureMatrix, GgnPrecision};

/// Largest `N · C` the function-space (Woodbury) path will factor.
pub const WOODBURY_LIMIT: usize = 5000;

/// Kernel over (input, class) pairs: entry `((i, a), (j, b))` lives at row
/// `i · C + a`, column `j · C + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockKernel {
    pub classes: usize,
    pub matrix: DMatrix<f64>,
}

impl BlockKernel {
    pub fn new(classes: usize, matrix: DMatrix<f64>) -> Result<Self> {
        if classes == 0 || matrix.nrows() % classes != 0 || matrix.ncols() % classes != 0 {
            return Err(shape_err(
                "block kernel",
                format!("{}x{} is not a multiple of {classes} classes", matrix.nrows(), matrix.ncols()),
            ));
        }
        Ok(Self { classes, matrix })
    }

    pub fn row_inputs(&self) -> usize {
        self.matrix.nrows() / self.classes
    }

    pub fn col_inputs(&self) -> usize {
        self.matrix.ncols() / self.classes
    }

    /// `K[(i, a), (j, b)]`.
    pub fn entry(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        self.matrix[(i * self.classes + a, j * self.classes + b)]
    }

    /// The `C × C` block between row input `i` and column input `j`.
    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let c = self.classes;
        self.matrix.view((i * c, j * c), (c, c)).into_owned()
    }
}

/// A kernel on inputs returning `C × C` blocks.
pub trait KernelFn {
    fn classes(&self) -> usize;

    /// `k(x1, x2)`, a `C × C` matrix.
    fn block(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>>;

    /// Kernel between two input lists, `(n1 · C) × (n2 · C)`.
    fn cross(&self, xs1: &[Vec<f64>], xs2: &[Vec<f64>]) -> Result<BlockKernel> {
        let c = self.classes();
        let mut m = DMatrix::zeros(xs1.len() * c, xs2.len() * c);
        for (i, x1) in xs1.iter().enumerate() {
            for (j, x2) in xs2.iter().enumerate() {
                let b = self.block(x1, x2)?;
                m.view_mut((i * c, j * c), (c, c)).copy_from(&b);
            }
        }
        BlockKernel::new(c, m)
    }
}

/// Neural tangent kernel `J(x) J(x')ᵀ` at fixed parameters, through the
/// exact-Jacobian oracle.
#[derive(Debug, Clone)]
pub struct ExactNtk<'a> {
    pub spec: &'a NetworkSpec,
    pub theta: &'a ParamVector,
}

impl ExactNtk<'_> {
    /// Stacked Jacobians, `(n · C) × P`.
    pub fn stacked_jacobian(&self, xs: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let c = self.spec.output_dim();
        let p = self.spec.param_count();
        oracle_guard("stacked Jacobian", xs.len() * c * p)?;
        let mut out = DMatrix::zeros(xs.len() * c, p);
        for (i, x) in xs.iter().enumerate() {
            let j = exact_jacobian(self.spec, self.theta, x)?;
            out.view_mut((i * c, 0), (c, p)).copy_from(&j.entries);
        }
        Ok(out)
    }
}

impl KernelFn for ExactNtk<'_> {
    fn classes(&self) -> usize {
        self.spec.output_dim()
    }

    fn block(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        let j1 = exact_jacobian(self.spec, self.theta, x1)?.entries;
        let j2 = exact_jacobian(self.spec, self.theta, x2)?.entries;
        Ok(&j1 * j2.transpose())
    }

    fn cross(&self, xs1: &[Vec<f64>], xs2: &[Vec<f64>]) -> Result<BlockKernel> {
        let j1 = self.stacked_jacobian(xs1)?;
        let j2 = if std::ptr::eq(xs1, xs2) {
            j1.clone()
        } else {
            self.stacked_jacobian(xs2)?
        };
        BlockKernel::new(self.classes(), &j1 * j2.transpose())
    }
}

/// `K_NTK(x1, x2) = J(x1) J(x2)ᵀ`.
pub fn ntk(x1: &[f64], x2: &[f64], spec: &NetworkSpec, theta: &ParamVector) -> Result<BlockKernel> {
    let k = ExactNtk { spec, theta };
    BlockKernel::new(spec.output_dim(), k.block(x1, x2)?)
}

/// `J(x1) Σ J(x2)ᵀ` with `Σ` the inverse of `precision`, via Cholesky.
pub fn lla_kernel_direct(
    x1: &[f64],
    x2: &[f64],
    precision: &GgnPrecision,
    spec: &NetworkSpec,
    theta: &ParamVector,
) -> Result<BlockKernel> {
    if precision.dim() != spec.param_count() {
        return Err(shape_err("precision", "dimension differs from parameter count"));
    }
    let j1 = exact_jacobian(spec, theta, x1)?.entries;
    let j2 = exact_jacobian(spec, theta, x2)?.entries;
    let chol = cholesky(precision.entries.clone(), "GGN precision")?;
    let sj2 = chol.solve(&j2.transpose());
    BlockKernel::new(spec.output_dim(), &j1 * sj2)
}

/// Block-diagonal `L = diag(Λₙ^{1/2})`, rejecting curvatures that are not PSD.
pub(crate) fn curvature_roots(curvatures: &[CurvatureMatrix]) -> Result<Vec<DMatrix<f64>>> {
    curvatures
        .iter()
        .enumerate()
        .map(|(n, lam)| {
            let e = &lam.entries;
            let scale = e.amax().max(1.0);
            let min = crate::linalg::min_eigenvalue(e);
            if min < -1e-10 * scale || (e - e.transpose()).amax() > 1e-10 * scale {
                return Err(Error::InvalidArgument(format!(
                    "curvature {n} is not symmetric PSD (min eigenvalue {min:e})"
                )));
            }
            Ok(psd_sqrt(e))
        })
        .collect()
}

/// Multiplies the rows of `m` (grouped by `C`) by the blocks of `L`.
pub(crate) fn left_mul_blocks(roots: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let c = roots.first().map_or(0, |r| r.nrows());
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (n, r) in roots.iter().enumerate() {
        let rows = m.rows(n * c, c);
        out.rows_mut(n * c, c).copy_from(&(r * rows));
    }
    out
}

/// Function-space LLA kernel through the Woodbury identity:
///
/// ```text
/// σ0² k(x1, x2) − σ0⁴ k(x1, X) L (I + σ0² L K_XX L)⁻¹ L k(X, x2)
/// ```
///
/// with `L` the block-diagonal PSD square root of the curvatures. `Λ` is
/// never inverted, so singular softmax curvature is fine.
pub fn lla_kernel_woodbury<K: KernelFn + ?Sized>(
    x1: &[f64],
    x2: &[f64],
    train: &[Vec<f64>],
    curvatures: &[CurvatureMatrix],
    sigma0: f64,
    kernel: &K,
) -> Result<BlockKernel> {
    let fit = WoodburyFactor::new(train, curvatures, sigma0, kernel)?;
    fit.kernel(x1, x2, kernel)
}

/// Cached factorization of `I + σ0² L K_XX L`.
#[derive(Debug, Clone)]
pub(crate) struct WoodburyFactor {
    pub train: Vec<Vec<f64>>,
    pub roots: Vec<DMatrix<f64>>,
    pub sigma0: f64,
    pub classes: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl WoodburyFactor {
    pub fn new<K: KernelFn + ?Sized>(
        train: &[Vec<f64>],
        curvatures: &[CurvatureMatrix],
        sigma0: f64,
        kernel: &K,
    ) -> Result<Self> {
        if train.len() != curvatures.len() {
            return Err(Error::InvalidArgument(format!(
                "{} training inputs but {} curvatures",
                train.len(),
                curvatures.len()
            )));
        }
        if !(sigma0 > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma0 must be positive, got {sigma0}")));
        }
        let c = kernel.classes();
        let nc = train.len() * c;
        if nc > WOODBURY_LIMIT {
            return Err(Error::OracleScale {
                what: "Woodbury system (N·C)",
                entries: nc,
                limit: WOODBURY_LIMIT,
            });
        }
        if curvatures.iter().any(|l| l.entries.nrows() != c || l.entries.ncols() != c) {
            return Err(shape_err("curvatures", format!("expected {c}x{c} blocks")));
        }
        let roots = curvature_roots(curvatures)?;
        let kxx = kernel.cross(train, train)?.matrix;
        let lk = left_mul_blocks(&roots, &kxx);
        let lkl = left_mul_blocks(&roots, &lk.transpose());
        let mut m = crate::linalg::symmetrize(&lkl) * (sigma0 * sigma0);
        for i in 0..nc {
            m[(i, i)] += 1.0;
        }
        let chol = cholesky(m, "Woodbury system")?;
        Ok(Self {
            train: train.to_vec(),
            roots,
            sigma0,
            classes: c,
            chol,
        })
    }

    pub fn kernel<K: KernelFn + ?Sized>(&self, x1: &[f64], x2: &[f64], kernel: &K) -> Result<BlockKernel> {
        let s2 = self.sigma0 * self.sigma0;
        let k12 = kernel.block(x1, x2)?;
        if self.train.is_empty() {
            return BlockKernel::new(self.classes, k12 * s2);
        }
        let k1x = kernel.cross(std::slice::from_ref(&x1.to_vec()), &self.train)?.matrix;
        let kx2 = if x1 == x2 {
            k1x.transpose()
        } else {
            kernel.cross(&self.train, std::slice::from_ref(&x2.to_vec()))?.matrix
        };
        let a = left_mul_blocks(&self.roots, &k1x.transpose());
        let b = left_mul_blocks(&self.roots, &kx2);
        let correction = a.transpose() * self.chol.solve(&b);
        BlockKernel::new(self.classes, k12 * s2 - correction * (s2 * s2))
    }
}

/// Forward pass helper shared by the posteriors.
pub(crate) fn map_mean(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    diff::forward(spec, theta, x)
}
