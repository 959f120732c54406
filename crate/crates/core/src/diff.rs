//! Forward evaluation, Jacobian–vector products, vector–Jacobian products
//! and finite-difference Jacobians for [`NetworkSpec`] networks.
//!
//! Forward mode carries a [`Dual`] (value, tangent) pair through every layer,
//! so one JVP costs a small constant multiple of one forward pass and never
//! materializes a `C × P` Jacobian. Reverse mode records the layer inputs of
//! a forward pass and walks them backwards.
//!
//! All arithmetic is `f64`. The ReLU derivative at exactly zero is zero.

use std::ops::{Add, Mul};

use nalgebra::DMatrix;

use crate::error::{shape_err, Error, Result};
use crate::network::{Layer, NetworkSpec, Shape};
use crate::params::{ParamVector, TangentVector};

/// Arithmetic needed to evaluate a layer.
pub trait Scalar: Copy + Add<Output = Self> + Mul<Output = Self> {
    fn zero() -> Self;
    fn relu(self) -> Self;
    fn tanh(self) -> Self;
}

impl Scalar for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }

    #[inline]
    fn relu(self) -> Self {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }

    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Value and directional derivative carried together.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub tangent: f64,
}

impl Dual {
    #[inline]
    pub fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }

    #[inline]
    pub fn constant(value: f64) -> Self {
        Self {
            value,
            tangent: 0.0,
        }
    }
}

impl Add for Dual {
    type Output = Dual;

    #[inline]
    fn add(self, rhs: Dual) -> Dual {
        Dual::new(self.value + rhs.value, self.tangent + rhs.tangent)
    }
}

impl Mul for Dual {
    type Output = Dual;

    #[inline]
    fn mul(self, rhs: Dual) -> Dual {
        Dual::new(
            self.value * rhs.value,
            self.tangent * rhs.value + self.value * rhs.tangent,
        )
    }
}

impl Scalar for Dual {
    #[inline]
    fn zero() -> Self {
        Dual::constant(0.0)
    }

    #[inline]
    fn relu(self) -> Self {
        if self.value > 0.0 {
            self
        } else {
            Dual::zero()
        }
    }

    #[inline]
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        Dual::new(t, self.tangent * (1.0 - t * t))
    }
}

/// Applies layer `index` of `spec` to `input`. `params` is the full flat
/// parameter array of the network.
fn apply_layer<T: Scalar>(spec: &NetworkSpec, index: usize, params: &[T], input: &[T]) -> Vec<T> {
    let layer = spec.layers()[index];
    match layer {
        Layer::Dense { input: n_in, output } => {
            let (wb, bb) = spec.layout().layer_blocks(index).expect("dense has params");
            let w = &params[wb.range()];
            let b = &params[bb.range()];
            (0..output)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    row.iter()
                        .zip(input)
                        .fold(b[o], |acc, (&wi, &xi)| acc + wi * xi)
                })
                .collect()
        }
        Layer::Conv2d {
            in_channels,
            out_channels,
            kernel,
        } => {
            let (wb, bb) = spec.layout().layer_blocks(index).expect("conv has params");
            let w = &params[wb.range()];
            let b = &params[bb.range()];
            let (h, wd) = image_hw(spec.shape_at(index));
            let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
            let mut out = vec![T::zero(); out_channels * oh * ow];
            for o in 0..out_channels {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = b[o];
                        for c in 0..in_channels {
                            for i in 0..kernel {
                                let wrow = ((o * in_channels + c) * kernel + i) * kernel;
                                let irow = (c * h + y + i) * wd + x;
                                for j in 0..kernel {
                                    acc = acc + w[wrow + j] * input[irow + j];
                                }
                            }
                        }
                        out[(o * oh + y) * ow + x] = acc;
                    }
                }
            }
            out
        }
        Layer::Relu => input.iter().map(|v| v.relu()).collect(),
        Layer::Tanh => input.iter().map(|v| v.tanh()).collect(),
        Layer::Flatten => input.to_vec(),
    }
}

fn image_hw(shape: Shape) -> (usize, usize) {
    match shape {
        Shape::Image { height, width, .. } => (height, width),
        Shape::Flat(_) => unreachable!("validated by NetworkSpec"),
    }
}

fn check_shapes(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<()> {
    if x.len() != spec.input_dim() {
        let first = spec
            .layers()
            .first()
            .map(|l| format!("layer 0 ({l})"))
            .unwrap_or_else(|| "input".into());
        return Err(shape_err(
            first,
            format!(
                "input has {} values, network expects {} {}",
                x.len(),
                spec.input_dim(),
                spec.input_shape()
            ),
        ));
    }
    if theta.len() != spec.param_count() {
        return Err(shape_err(
            "parameters",
            format!(
                "parameter vector has {} values, network has {}",
                theta.len(),
                spec.param_count()
            ),
        ));
    }
    Ok(())
}

fn check_finite(theta: &ParamVector, x: &[f64]) -> Result<()> {
    if !theta.is_finite() {
        return Err(Error::NonFinite("parameters"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("input"));
    }
    Ok(())
}

/// Network output `f_θ(x)` (logits, length `C`).
pub fn forward(spec: &NetworkSpec, theta: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(spec, theta, x)?;
    let params = theta.values();
    let mut act = x.to_vec();
    for i in 0..spec.layers().len() {
        act = apply_layer(spec, i, params, &act);
    }
    Ok(act)
}

/// Forward pass that keeps every intermediate activation; `trace[0]` is the
/// input and `trace[L]` the output.
fn forward_trace(spec: &NetworkSpec, params: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let mut trace = Vec::with_capacity(spec.layers().len() + 1);
    trace.push(x.to_vec());
    for i in 0..spec.layers().len() {
        let next = apply_layer(spec, i, params, &trace[i]);
        trace.push(next);
    }
    trace
}

/// `J_θ(x) v` by dual-number propagation.
pub fn jvp(spec: &NetworkSpec, theta: &ParamVector, x: &[f64], v: &TangentVector) -> Result<Vec<f64>> {
    Ok(jvp_with_value(spec, theta, x, v)?.1)
}

/// Returns `(f_θ(x), J_θ(x) v)` from the same pass.
pub fn jvp_with_value(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &[f64],
    v: &TangentVector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(spec, theta, x)?;
    if v.len() != theta.len() {
        return Err(shape_err(
            "tangent",
            format!("tangent has {} values, network has {}", v.len(), theta.len()),
        ));
    }
    check_finite(theta, x)?;
    if !v.values.iter().all(|t| t.is_finite()) {
        return Err(Error::NonFinite("tangent"));
    }
    let params: Vec<Dual> = theta
        .values()
        .iter()
        .zip(&v.values)
        .map(|(&p, &t)| Dual::new(p, t))
        .collect();
    let mut act: Vec<Dual> = x.iter().map(|&xi| Dual::constant(xi)).collect();
    for i in 0..spec.layers().len() {
        act = apply_layer(spec, i, &params, &act);
    }
    Ok(act.into_iter().map(|d| (d.value, d.tangent)).unzip())
}

/// `uᵀ J_θ(x)` as a parameter-shaped vector.
pub fn vjp(spec: &NetworkSpec, theta: &ParamVector, x: &[f64], u: &[f64]) -> Result<ParamVector> {
    let mut grad = vec![0.0; theta.len()];
    vjp_accumulate(spec, theta, x, u, &mut grad)?;
    ParamVector::new(grad, theta.layout().clone())
}

/// Adds `uᵀ J_θ(x)` into `grad`.
pub fn vjp_accumulate(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &[f64],
    u: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    check_shapes(spec, theta, x)?;
    check_finite(theta, x)?;
    if u.len() != spec.output_dim() {
        return Err(shape_err(
            "cotangent",
            format!("cotangent has {} values, network has {} outputs", u.len(), spec.output_dim()),
        ));
    }
    if grad.len() != theta.len() {
        return Err(shape_err("gradient buffer", "length differs from parameter count"));
    }
    let params = theta.values();
    let trace = forward_trace(spec, params, x);
    backward(spec, params, &trace, u.to_vec(), grad);
    Ok(())
}

/// Like [`vjp_accumulate`] but for several cotangents on the same input:
/// `grads[k] += u_kᵀ J`. One forward pass is shared.
pub(crate) fn vjp_rows(
    spec: &NetworkSpec,
    theta: &ParamVector,
    x: &[f64],
    cotangents: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    check_shapes(spec, theta, x)?;
    check_finite(theta, x)?;
    let params = theta.values();
    let trace = forward_trace(spec, params, x);
    let mut rows = Vec::with_capacity(cotangents.len());
    for u in cotangents {
        if u.len() != spec.output_dim() {
            return Err(shape_err("cotangent", "length differs from output dimension"));
        }
        let mut g = vec![0.0; theta.len()];
        backward(spec, params, &trace, u.clone(), &mut g);
        rows.push(g);
    }
    Ok(rows)
}

fn backward(spec: &NetworkSpec, params: &[f64], trace: &[Vec<f64>], mut upstream: Vec<f64>, grad: &mut [f64]) {
    for index in (0..spec.layers().len()).rev() {
        let input = &trace[index];
        let output = &trace[index + 1];
        upstream = match spec.layers()[index] {
            Layer::Dense { input: n_in, output: n_out } => {
                let (wb, bb) = spec.layout().layer_blocks(index).expect("dense has params");
                let w = &params[wb.range()];
                let mut down = vec![0.0; n_in];
                for o in 0..n_out {
                    let g = upstream[o];
                    grad[bb.offset + o] += g;
                    let gw = &mut grad[wb.offset + o * n_in..wb.offset + (o + 1) * n_in];
                    for (gwi, &xi) in gw.iter_mut().zip(input) {
                        *gwi += g * xi;
                    }
                    for (d, &wi) in down.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *d += wi * g;
                    }
                }
                down
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                let (wb, bb) = spec.layout().layer_blocks(index).expect("conv has params");
                let w = &params[wb.range()];
                let (h, wd) = image_hw(spec.shape_at(index));
                let (oh, ow) = (h - kernel + 1, wd - kernel + 1);
                let mut down = vec![0.0; input.len()];
                for o in 0..out_channels {
                    for y in 0..oh {
                        for x in 0..ow {
                            let g = upstream[(o * oh + y) * ow + x];
                            grad[bb.offset + o] += g;
                            for c in 0..in_channels {
                                for i in 0..kernel {
                                    let wrow = ((o * in_channels + c) * kernel + i) * kernel;
                                    let irow = (c * h + y + i) * wd + x;
                                    for j in 0..kernel {
                                        grad[wb.offset + wrow + j] += g * input[irow + j];
                                        down[irow + j] += w[wrow + j] * g;
                                    }
                                }
                            }
                        }
                    }
                }
                down
            }
            Layer::Relu => upstream
                .iter()
                .zip(input)
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect(),
            Layer::Tanh => upstream
                .iter()
                .zip(output)
                .map(|(&g, &t)| g * (1.0 - t * t))
                .collect(),
            Layer::Flatten => upstream,
        };
    }
}

/// Central-difference Jacobian, one column per parameter. Test oracle.
pub fn finite_diff_jacobian(spec: &NetworkSpec, theta: &ParamVector, x: &[f64], eps: f64) -> Result<DMatrix<f64>> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    check_shapes(spec, theta, x)?;
    let c = spec.output_dim();
    let p = theta.len();
    let mut jac = DMatrix::zeros(c, p);
    let mut shifted = theta.clone();
    for k in 0..p {
        let orig = theta.values()[k];
        shifted.values_mut()[k] = orig + eps;
        let plus = forward(spec, &shifted, x)?;
        shifted.values_mut()[k] = orig - eps;
        let minus = forward(spec, &shifted, x)?;
        shifted.values_mut()[k] = orig;
        for a in 0..c {
            jac[(a, k)] = (plus[a] - minus[a]) / (2.0 * eps);
        }
    }
    Ok(jac)
}
