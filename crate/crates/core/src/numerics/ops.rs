//! Forward-only reference versions of the encoder's nonlinear primitives.
//!
//! The tape in [`super::tape`] records the same computations with gradients;
//! these functions are the plain-tensor surface and share the scalar kernels.

use std::f64::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn ensure_finite(x: &Tensor, op: &'static str) -> Result<()> {
    match x.first_non_finite() {
        Some((index, value)) => Err(Error::NonFinite { op, index, value }),
        None => Ok(()),
    }
}

/// Softmax along `axis`, computed with max-subtraction.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::shape(
            "softmax",
            format!("axis {axis} for shape {shape:?}"),
        ));
    }
    ensure_finite(logits, "softmax")?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(shape.to_vec(), out))
}

/// Row-wise softmax over a contiguous slice, in place.
pub(crate) fn softmax_row_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Exact-erf GeLU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    ensure_finite(x, "gelu")?;
    Ok(x.map(gelu_scalar))
}

/// Normalises each row (last axis) to zero mean and unit population
/// variance, then applies `gamma` and `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta of {}/{} for {c} columns", gamma.len(), beta.len()),
        ));
    }
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let (mean, inv_std) = row_moments(row, eps);
        for (k, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv_std * gamma.data()[k] + beta.data()[k];
        }
    }
    Ok(out)
}

/// Mean and `1/sqrt(var + eps)` of a row, population variance.
pub(crate) fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    // eps = 0 on a constant row: the centred row is all zeros, keep it that way
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    (mean, inv_std)
}
