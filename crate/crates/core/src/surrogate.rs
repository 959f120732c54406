//! Learned surrogate kernel.
//!
//! A surrogate network `g_φ: X → R^{C×m}` is trained so that
//! `g_φ(x) g_φ(x')ᵀ` matches the NTK of a frozen MAP network. Each step draws
//! one projection `v`, sketches every batch input with a JVP
//! (`z_i = J(x_i) v`), forms the target `K = z zᵀ` over (input, class) pairs
//! and takes a gradient step on the mean squared difference to
//! `Q = G Gᵀ`, where row `(i, a)` of `G` is `g_φ(x_i)[a, :]`.
//!
//! Batches concatenate training inputs with context inputs. With biasing
//! enabled the target entries between the two partitions are set to zero
//! before the loss, so the learned kernel decorrelates them.

use nalgebra::{Cholesky, DMatrix, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff;
use crate::error::{shape_err, Error, Result};
use crate::linalg::cholesky;
use crate::lla::{BlockKernel, CurvatureMatrix, ExactNtk, KernelFn, Posterior, PredictiveGaussian};
use crate::models::init_params;
use crate::network::NetworkSpec;
use crate::optim::{cosine_schedule, Adam, AdamConfig};
use crate::params::{Distribution, ParamVector, TangentVector};
use crate::sketch::ProjectionStream;

/// A surrogate network together with its parameters `φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSpec {
    /// Network producing `C · m` outputs.
    pub network: NetworkSpec,
    pub classes: usize,
    pub m: usize,
    pub phi: ParamVector,
}

impl SurrogateSpec {
    /// Base architecture with the output layer widened to `C · m`, freshly
    /// initialized from `seed`.
    pub fn from_base(base: &NetworkSpec, m: usize, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidArgument("surrogate needs m ≥ 1 features per class".into()));
        }
        let classes = base.output_dim();
        let network = base.with_output_dim(classes * m)?;
        let phi = init_params(&network, seed);
        Ok(Self {
            network,
            classes,
            m,
            phi,
        })
    }

    pub fn new(network: NetworkSpec, classes: usize, m: usize, phi: ParamVector) -> Result<Self> {
        if network.output_dim() != classes * m {
            return Err(shape_err(
                "surrogate",
                format!("network has {} outputs, expected C·m = {}", network.output_dim(), classes * m),
            ));
        }
        if phi.len() != network.param_count() {
            return Err(shape_err("surrogate", "φ length differs from network parameter count"));
        }
        Ok(Self {
            network,
            classes,
            m,
            phi,
        })
    }

    pub fn features(&self, x: &[f64]) -> Result<FeatureMap> {
        surrogate_features(self, x)
    }
}

/// `g_φ(x)`, a `C × m` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub g: DMatrix<f64>,
    pub input_id: Option<usize>,
}

impl FeatureMap {
    pub fn new(g: DMatrix<f64>) -> Self {
        Self { g, input_id: None }
    }
}

/// Forward pass of the surrogate, reshaped class-major: row `a` holds
/// outputs `a·m .. (a+1)·m`.
pub fn surrogate_features(surrogate: &SurrogateSpec, x: &[f64]) -> Result<FeatureMap> {
    let out = diff::forward(&surrogate.network, &surrogate.phi, x)?;
    Ok(FeatureMap::new(DMatrix::from_row_slice(surrogate.classes, surrogate.m, &out)))
}

/// `g1 g2ᵀ`.
pub fn surrogate_kernel(g1: &FeatureMap, g2: &FeatureMap) -> Result<BlockKernel> {
    if g1.g.ncols() != g2.g.ncols() || g1.g.nrows() != g2.g.nrows() {
        return Err(shape_err("surrogate kernel", "feature maps differ in shape"));
    }
    BlockKernel::new(g1.g.nrows(), &g1.g * g2.g.transpose())
}

/// Stacks feature maps into `G`, `(n · C) × m`.
pub fn stack_features(features: &[FeatureMap]) -> DMatrix<f64> {
    let (c, m) = features.first().map_or((0, 0), |f| f.g.shape());
    let mut out = DMatrix::zeros(features.len() * c, m);
    for (i, f) in features.iter().enumerate() {
        out.view_mut((i * c, 0), (c, m)).copy_from(&f.g);
    }
    out
}

/// The learned kernel as a [`KernelFn`].
#[derive(Debug, Clone, Copy)]
pub struct SurrogateKernel<'a>(pub &'a SurrogateSpec);

impl KernelFn for SurrogateKernel<'_> {
    fn classes(&self) -> usize {
        self.0.classes
    }

    fn block(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        let g1 = self.0.features(x1)?;
        let g2 = self.0.features(x2)?;
        Ok(surrogate_kernel(&g1, &g2)?.matrix)
    }

    fn cross(&self, xs1: &[Vec<f64>], xs2: &[Vec<f64>]) -> Result<BlockKernel> {
        let f1 = xs1.iter().map(|x| self.0.features(x)).collect::<Result<Vec<_>>>()?;
        let g1 = stack_features(&f1);
        let g2 = if std::ptr::eq(xs1, xs2) {
            g1.clone()
        } else {
            let f2 = xs2.iter().map(|x| self.0.features(x)).collect::<Result<Vec<_>>>()?;
            stack_features(&f2)
        };
        BlockKernel::new(self.0.classes, &g1 * g2.transpose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Context,
}

/// `[X_train ; X_context]` with per-input partition tags.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchComposition {
    pub inputs: Vec<Vec<f64>>,
    pub partition: Vec<Partition>,
}

impl BatchComposition {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

pub fn build_batch(train: &[Vec<f64>], context: &[Vec<f64>]) -> Result<BatchComposition> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("batch needs at least one training input".into()));
    }
    let mut inputs = Vec::with_capacity(train.len() + context.len());
    inputs.extend_from_slice(train);
    inputs.extend_from_slice(context);
    let mut partition = vec![Partition::Train; train.len()];
    partition.extend(std::iter::repeat_n(Partition::Context, context.len()));
    Ok(BatchComposition { inputs, partition })
}

/// 0/1 mask over `((i, a), (j, b))`: zero exactly when `i` and `j` lie in
/// different partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMask {
    pub classes: usize,
    pub partition: Vec<Partition>,
}

impl BiasMask {
    pub fn new(batch: &BatchComposition, classes: usize) -> Self {
        Self {
            classes,
            partition: batch.partition.clone(),
        }
    }

    pub fn get(&self, i: usize, a: usize, j: usize, b: usize) -> f64 {
        let _ = (a, b);
        if self.partition[i] == self.partition[j] {
            1.0
        } else {
            0.0
        }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let c = self.classes;
        let n = self.partition.len() * c;
        DMatrix::from_fn(n, n, |r, s| self.get(r / c, r % c, s / c, s % c))
    }
}

/// Zeroes cross-partition entries; within-partition entries are copied
/// unchanged.
pub fn apply_bias_mask(k: &BlockKernel, mask: &BiasMask) -> Result<BlockKernel> {
    let c = k.classes;
    let n = mask.partition.len();
    if mask.classes != c || k.row_inputs() != n || k.col_inputs() != n {
        return Err(shape_err("bias mask", "mask and kernel shapes differ"));
    }
    let mut out = k.clone();
    for i in 0..n {
        for j in 0..n {
            if mask.partition[i] != mask.partition[j] {
                out.matrix.view_mut((i * c, j * c), (c, c)).fill(0.0);
            }
        }
    }
    Ok(out)
}

/// Sketch target `(1/S) Σ_s z_s zₛᵀ` over the batch, with one JVP per input
/// and projection.
pub fn target_kernel(
    batch: &BatchComposition,
    projections: &[TangentVector],
    spec: &NetworkSpec,
    theta_star: &ParamVector,
) -> Result<BlockKernel> {
    if projections.is_empty() {
        return Err(Error::InvalidArgument("target kernel needs at least one projection".into()));
    }
    let c = spec.output_dim();
    let n = batch.len() * c;
    let mut k = DMatrix::zeros(n, n);
    for v in projections {
        let mut z = Vec::with_capacity(n);
        for x in &batch.inputs {
            z.extend(diff::jvp(spec, theta_star, x, v)?);
        }
        let z = nalgebra::DVector::from_vec(z);
        k.ger(1.0, &z, &z, 1.0);
    }
    BlockKernel::new(c, k / projections.len() as f64)
}

/// Mean squared entrywise difference between `target` and `G Gᵀ`.
pub fn kernel_loss(target: &BlockKernel, g: &DMatrix<f64>) -> f64 {
    let r = g * g.transpose() - &target.matrix;
    r.norm_squared() / r.len() as f64
}

/// Loss and gradient with respect to `φ` against a fixed target.
pub fn loss_and_grad(surrogate: &SurrogateSpec, batch: &BatchComposition, target: &BlockKernel) -> Result<(f64, Vec<f64>)> {
    let features = batch
        .inputs
        .iter()
        .map(|x| surrogate.features(x))
        .collect::<Result<Vec<_>>>()?;
    let g = stack_features(&features);
    if target.matrix.nrows() != g.nrows() {
        return Err(shape_err("loss", "target kernel does not match the batch"));
    }
    let r = &g * g.transpose() - &target.matrix;
    let count = r.len() as f64;
    let loss = r.norm_squared() / count;
    // d/dG mean((GGᵀ − T)²) = (2/M) (R + Rᵀ) G
    let dg = (&r + r.transpose()) * &g * (2.0 / count);
    let (c, m) = (surrogate.classes, surrogate.m);
    let mut grad = vec![0.0; surrogate.phi.len()];
    let mut u = vec![0.0; c * m];
    for (i, x) in batch.inputs.iter().enumerate() {
        for a in 0..c {
            for k in 0..m {
                u[a * m + k] = dg[(i * c + a, k)];
            }
        }
        diff::vjp_accumulate(&surrogate.network, &surrogate.phi, x, &u, &mut grad)?;
    }
    Ok((loss, grad))
}

/// Matching loss for one batch and set of projections: sketch the
/// target, mask it when `biased`, compare to the surrogate kernel.
pub fn loss(
    surrogate: &SurrogateSpec,
    batch: &BatchComposition,
    projections: &[TangentVector],
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    biased: bool,
) -> Result<f64> {
    let target = masked_target(batch, projections, spec, theta_star, biased)?;
    let features = batch
        .inputs
        .iter()
        .map(|x| surrogate.features(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(kernel_loss(&target, &stack_features(&features)))
}

fn masked_target(
    batch: &BatchComposition,
    projections: &[TangentVector],
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    biased: bool,
) -> Result<BlockKernel> {
    let target = target_kernel(batch, projections, spec, theta_star)?;
    if biased {
        apply_bias_mask(&target, &BiasMask::new(batch, spec.output_dim()))
    } else {
        Ok(target)
    }
}

/// Surrogate training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    /// Features per class.
    pub m: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub context_batch_size: usize,
    /// Projections averaged per step.
    pub sketches_per_step: usize,
    pub distribution: Distribution,
    pub adam: AdamConfig,
    /// When set, the step size follows a cosine decay from
    /// `adam.learning_rate` to this value over the run.
    pub final_learning_rate: Option<f64>,
    pub biased: bool,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            m: 8,
            steps: 5000,
            batch_size: 32,
            context_batch_size: 32,
            sketches_per_step: 1,
            distribution: Distribution::Rademacher,
            adam: AdamConfig::default(),
            final_learning_rate: None,
            biased: false,
            seed: 0,
        }
    }
}

/// Trained surrogate plus per-step loss.
#[derive(Debug, Clone)]
pub struct SurrogateFit {
    pub surrogate: SurrogateSpec,
    pub trace: Vec<f64>,
}

/// Mini-batch training of `g_φ` against sketched NTK targets of the frozen
/// network `(spec, theta_star)`.
pub fn train_surrogate(
    spec: &NetworkSpec,
    theta_star: &ParamVector,
    train: &[Vec<f64>],
    context: &[Vec<f64>],
    config: &SurrogateConfig,
) -> Result<SurrogateFit> {
    if config.biased && context.is_empty() {
        return Err(Error::Config("biased surrogate training needs a context dataset".into()));
    }
    if config.context_batch_size > 0 && context.is_empty() {
        return Err(Error::Config("context_batch_size > 0 but the context dataset is empty".into()));
    }
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("surrogate training needs training inputs and batch_size ≥ 1".into()));
    }
    if config.sketches_per_step == 0 {
        return Err(Error::Config("sketches_per_step must be at least 1".into()));
    }
    let mut surrogate = SurrogateSpec::from_base(spec, config.m, config.seed)?;
    let mut opt = Adam::new(config.adam, surrogate.phi.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5ca1_1a00);
    let stream = ProjectionStream::new(config.seed.wrapping_add(1), config.distribution);
    let p = spec.param_count();
    let s = config.sketches_per_step as u64;
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let train_batch: Vec<Vec<f64>> = if config.batch_size >= train.len() {
            train.to_vec()
        } else {
            rand::seq::index::sample(&mut rng, train.len(), config.batch_size)
                .iter()
                .map(|i| train[i].clone())
                .collect()
        };
        let context_batch: Vec<Vec<f64>> = (0..config.context_batch_size)
            .map(|_| context[rng.random_range(0..context.len())].clone())
            .collect();
        let batch = build_batch(&train_batch, &context_batch)?;
        let projections: Vec<TangentVector> = (0..s).map(|k| stream.sample(step as u64 * s + k, p)).collect();
        let target = masked_target(&batch, &projections, spec, theta_star, config.biased)?;
        let (l, grad) = loss_and_grad(&surrogate, &batch, &target)?;
        if !l.is_finite() || !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Diverged { step, loss: l });
        }
        if let Some(last) = config.final_learning_rate {
            opt.set_learning_rate(cosine_schedule(config.adam.learning_rate, last, step, config.steps));
        }
        opt.step(surrogate.phi.values_mut(), &grad);
        trace.push(l);
    }
    Ok(SurrogateFit { surrogate, trace })
}

/// Frobenius distance between the surrogate kernel and the exact NTK over
/// `grid`. Requires the exact oracle to be in scale.
pub fn kernel_error(surrogate: &SurrogateSpec, spec: &NetworkSpec, theta_star: &ParamVector, grid: &[Vec<f64>]) -> Result<f64> {
    let exact = ExactNtk { spec, theta: theta_star }.cross(grid, grid)?;
    let learned = SurrogateKernel(surrogate).cross(grid, grid)?;
    Ok((exact.matrix - learned.matrix).norm())
}

/// Feature-space Laplace posterior: precision
/// `Σₙ gₙᵀ Λₙ gₙ + σ0⁻² I_m` and predictive covariance `g* Σ_m g*ᵀ`.
#[derive(Debug, Clone)]
pub struct FeaturePosterior<'a> {
    spec: &'a NetworkSpec,
    theta: &'a ParamVector,
    surrogate: &'a SurrogateSpec,
    chol: Cholesky<f64, Dyn>,
}

impl<'a> FeaturePosterior<'a> {
    /// One pass over the training inputs; `curvatures` are evaluated at the
    /// MAP outputs of the base network.
    pub fn fit(
        spec: &'a NetworkSpec,
        theta: &'a ParamVector,
        surrogate: &'a SurrogateSpec,
        train: &[Vec<f64>],
        curvatures: &[CurvatureMatrix],
        sigma0: f64,
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
        if surrogate.classes != spec.output_dim() {
            return Err(shape_err("surrogate", "surrogate classes differ from network outputs"));
        }
        let m = surrogate.m;
        let mut precision = DMatrix::identity(m, m) / (sigma0 * sigma0);
        for (x, lam) in train.iter().zip(curvatures) {
            let g = surrogate.features(x)?.g;
            let lg = &lam.entries * &g;
            precision.gemm_tr(1.0, &g, &lg, 1.0);
        }
        let chol = cholesky(crate::linalg::symmetrize(&precision), "feature-space precision")?;
        Ok(Self {
            spec,
            theta,
            surrogate,
            chol,
        })
    }

    /// `g(x1) Σ_m g(x2)ᵀ`.
    pub fn kernel(&self, x1: &[f64], x2: &[f64]) -> Result<DMatrix<f64>> {
        let g1 = self.surrogate.features(x1)?.g;
        let g2 = self.surrogate.features(x2)?.g;
        Ok(&g1 * self.chol.solve(&g2.transpose()))
    }
}

impl Posterior for FeaturePosterior<'_> {
    fn predictive(&self, x: &[f64]) -> Result<PredictiveGaussian> {
        let mean = diff::forward(self.spec, self.theta, x)?;
        PredictiveGaussian::new(mean, self.kernel(x, x)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::relative_error;
    use crate::lla::{curvature, lla_kernel_woodbury, Likelihood, Target};
    use crate::network::Layer;
    use crate::sketch::sample_projection;

    fn setup() -> (NetworkSpec, ParamVector, SurrogateSpec) {
        let spec = NetworkSpec::mlp(&[2, 6, 2], Layer::Tanh).unwrap();
        let theta = init_params(&spec, 1);
        let sur = SurrogateSpec::from_base(&spec, 3, 2).unwrap();
        (spec, theta, sur)
    }

    fn inputs(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![(i as f64 * 0.9).sin(), (i as f64 * 0.4).cos()]).collect()
    }

    #[test]
    fn zero_phi_gives_zero_kernel() {
        let (_, _, mut sur) = setup();
        sur.phi = ParamVector::zeros(sur.phi.layout());
        let g = sur.features(&[0.1, 0.2]).unwrap();
        assert!(g.g.iter().all(|&v| v == 0.0));
        assert!(surrogate_kernel(&g, &g).unwrap().matrix.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn features_are_class_major() {
        let (_, _, sur) = setup();
        let x = [0.3, -0.1];
        let out = diff::forward(&sur.network, &sur.phi, &x).unwrap();
        let g = sur.features(&x).unwrap().g;
        assert_eq!(g.shape(), (2, 3));
        for a in 0..2 {
            for k in 0..3 {
                assert_eq!(g[(a, k)], out[a * 3 + k]);
            }
        }
        assert_eq!(sur.features(&x).unwrap(), sur.features(&x).unwrap());
    }

    #[test]
    fn rank_one_features_reproduce_sketch_target() {
        let (spec, theta, _) = setup();
        let xs = inputs(4);
        let v = sample_projection(spec.param_count(), Distribution::Rademacher, 0);
        let batch = build_batch(&xs, &[]).unwrap();
        let target = target_kernel(&batch, std::slice::from_ref(&v), &spec, &theta).unwrap();
        let feats: Vec<FeatureMap> = xs
            .iter()
            .map(|x| {
                let z = diff::jvp(&spec, &theta, x, &v).unwrap();
                FeatureMap::new(DMatrix::from_column_slice(2, 1, &z))
            })
            .collect();
        let g = stack_features(&feats);
        assert!((&g * g.transpose() - &target.matrix).amax() < 1e-12);
        assert_eq!(kernel_loss(&target, &g), 0.0);
    }

    #[test]
    fn gram_of_rows() {
        let g = FeatureMap::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(surrogate_kernel(&g, &g).unwrap().matrix, DMatrix::identity(2, 2));
        let h = FeatureMap::new(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let k = surrogate_kernel(&h, &h).unwrap().matrix;
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[5.0, 11.0, 11.0, 25.0]));
    }

    #[test]
    fn batch_rank_is_bounded_by_m() {
        let (_, _, sur) = setup();
        let k = SurrogateKernel(&sur).cross(&inputs(10), &inputs(10)).unwrap().matrix;
        let sv = k.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[3] <= 1e-8 * sv[0], "{sv:?}");
    }

    #[test]
    fn batch_tags() {
        let a = vec![vec![1.0]];
        let b = vec![vec![2.0]];
        let c = vec![vec![3.0]];
        let batch = build_batch(&[a[0].clone(), b[0].clone()], &c).unwrap();
        assert_eq!(batch.inputs, vec![vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(batch.partition, vec![Partition::Train, Partition::Train, Partition::Context]);
        let single = build_batch(&a, &[]).unwrap();
        assert!(BiasMask::new(&single, 2).to_matrix().iter().all(|&v| v == 1.0));
        assert!(build_batch(&[], &c).is_err());
    }

    #[test]
    fn mask_zeroes_only_cross_blocks() {
        let batch = build_batch(&[vec![0.0]], &[vec![1.0]]).unwrap();
        let k = BlockKernel::new(2, DMatrix::from_fn(4, 4, |i, j| (1 + i * 4 + j) as f64 * 0.37)).unwrap();
        let mask = BiasMask::new(&batch, 2);
        let out = apply_bias_mask(&k, &mask).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let cross = (i / 2) != (j / 2);
                if cross {
                    assert_eq!(out.matrix[(i, j)].to_bits(), 0f64.to_bits());
                } else {
                    assert_eq!(out.matrix[(i, j)].to_bits(), k.matrix[(i, j)].to_bits());
                }
            }
        }
        assert_eq!(apply_bias_mask(&out, &mask).unwrap(), out);
        let all_train = build_batch(&[vec![0.0], vec![1.0]], &[]).unwrap();
        assert_eq!(apply_bias_mask(&k, &BiasMask::new(&all_train, 2)).unwrap(), k);
        assert_eq!(mask.to_matrix(), mask.to_matrix().transpose());
    }

    #[test]
    fn zero_surrogate_loss_is_mean_square_target() {
        let (spec, theta, mut sur) = setup();
        sur.phi = ParamVector::zeros(sur.phi.layout());
        let batch = build_batch(&inputs(3), &inputs(2)).unwrap();
        let v = vec![sample_projection(spec.param_count(), Distribution::Rademacher, 5)];
        let target = target_kernel(&batch, &v, &spec, &theta).unwrap();
        let want = target.matrix.iter().map(|t| t * t).sum::<f64>() / target.matrix.len() as f64;
        let got = loss(&sur, &batch, &v, &spec, &theta, false).unwrap();
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn hand_computed_single_class_loss() {
        // C = 1, two inputs: K = [[4, 2], [2, 1]] (z = [2, 1]), G = [[1], [0]]
        // Q = [[1, 0], [0, 0]]; squared diffs 9, 4, 4, 1 -> mean 4.5
        let target = BlockKernel::new(1, DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 1.0])).unwrap();
        let g = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        assert_eq!(kernel_loss(&target, &g), 4.5);
    }

    #[test]
    fn loss_gradient_matches_fd() {
        let (spec, theta, sur) = setup();
        let batch = build_batch(&inputs(3), &inputs(5)[3..]).unwrap();
        let v = vec![sample_projection(spec.param_count(), Distribution::Rademacher, 1)];
        let target = masked_target(&batch, &v, &spec, &theta, true).unwrap();
        let (_, grad) = loss_and_grad(&sur, &batch, &target).unwrap();
        let eps = 1e-5;
        let f = |phi: &ParamVector| {
            let s = SurrogateSpec { phi: phi.clone(), ..sur.clone() };
            loss_and_grad(&s, &batch, &target).unwrap().0
        };
        for k in 0..sur.phi.len() {
            let mut p = sur.phi.clone();
            p.values_mut()[k] += eps;
            let mut q = sur.phi.clone();
            q.values_mut()[k] -= eps;
            let fd = (f(&p) - f(&q)) / (2.0 * eps);
            assert!((fd - grad[k]).abs() <= 1e-4 * fd.abs().max(1e-3), "k={k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn permuting_batch_permutes_target() {
        let (spec, theta, _) = setup();
        let xs = inputs(3);
        let rev: Vec<Vec<f64>> = xs.iter().rev().cloned().collect();
        let v = vec![sample_projection(spec.param_count(), Distribution::Rademacher, 2)];
        let k1 = target_kernel(&build_batch(&xs, &[]).unwrap(), &v, &spec, &theta).unwrap();
        let k2 = target_kernel(&build_batch(&rev, &[]).unwrap(), &v, &spec, &theta).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k1.block(i, j), k2.block(2 - i, 2 - j));
            }
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (spec, theta, _) = setup();
        let cfg = SurrogateConfig {
            m: 3,
            steps: 0,
            context_batch_size: 0,
            seed: 2,
            ..Default::default()
        };
        let fit = train_surrogate(&spec, &theta, &inputs(5), &[], &cfg).unwrap();
        assert_eq!(fit.surrogate, SurrogateSpec::from_base(&spec, 3, 2).unwrap());
        assert!(fit.trace.is_empty());
    }

    #[test]
    fn biased_without_context_is_config_error() {
        let (spec, theta, _) = setup();
        let cfg = SurrogateConfig {
            biased: true,
            ..Default::default()
        };
        assert!(matches!(
            train_surrogate(&spec, &theta, &inputs(5), &[], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_reduces_error() {
        let (spec, theta, _) = setup();
        let cfg = SurrogateConfig {
            m: 4,
            steps: 1500,
            batch_size: 8,
            context_batch_size: 4,
            adam: AdamConfig {
                learning_rate: 1e-2,
                ..Default::default()
            },
            seed: 3,
            ..Default::default()
        };
        let (train, ctx) = (inputs(20), inputs(30)[20..].to_vec());
        let a = train_surrogate(&spec, &theta, &train, &ctx, &cfg).unwrap();
        let b = train_surrogate(&spec, &theta, &train, &ctx, &cfg).unwrap();
        assert_eq!(a.surrogate, b.surrogate);
        assert_eq!(a.trace, b.trace);
        let init = SurrogateSpec::from_base(&spec, 4, 3).unwrap();
        let grid = inputs(25)[20..].to_vec();
        let e0 = kernel_error(&init, &spec, &theta, &grid).unwrap();
        let e1 = kernel_error(&a.surrogate, &spec, &theta, &grid).unwrap();
        assert!(e1 < e0, "{e1} vs {e0}");
    }

    #[test]
    fn feature_posterior_prior_and_duality() {
        let (spec, theta, sur) = setup();
        let x = [0.2, 0.7];
        let empty = FeaturePosterior::fit(&spec, &theta, &sur, &[], &[], 1.5).unwrap();
        let g = sur.features(&x).unwrap().g;
        let want = &g * g.transpose() * 2.25;
        assert!(relative_error(&empty.kernel(&x, &x).unwrap(), &want) < 1e-12);

        let train = inputs(12);
        let lams: Vec<_> = train
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let f = diff::forward(&spec, &theta, t).unwrap();
                curvature(Likelihood::Softmax, &Target::Class(i % 2), &f).unwrap()
            })
            .collect();
        let post = FeaturePosterior::fit(&spec, &theta, &sur, &train, &lams, 1.5).unwrap();
        let dual = lla_kernel_woodbury(&x, &[1.0, -1.0], &train, &lams, 1.5, &SurrogateKernel(&sur)).unwrap();
        let feat = post.kernel(&x, &[1.0, -1.0]).unwrap();
        assert!(relative_error(&feat, &dual.matrix) < 1e-8);
    }
}
