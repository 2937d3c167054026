//! Dense tensors, seeded randomness, the handful of kernels the encoder and
//! classifier share, and a central-difference gradient oracle.

mod rng;
mod scalar;
mod tensor;

pub use rng::{streams, SeededRng};
pub use scalar::{Precision, Scalar};
pub use tensor::{dot, l2_norm, Tensor};

use crate::error::{Error, Result};

const GELU_ALPHA: f64 = 1.702;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

/// Row-wise softmax with per-row max subtraction. A 1-D tensor is one row.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let cols = if x.shape().len() <= 1 { x.len() } else { x.cols() };
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Normalized row and reciprocal standard deviation, kept for backward.
#[derive(Debug, Clone)]
pub(crate) struct NormStats<T> {
    pub normalized: Vec<T>,
    pub rstd: T,
}

pub(crate) fn layer_norm_row<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    eps: T,
    out: &mut [T],
) -> NormStats<T> {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + eps).sqrt();
    let normalized: Vec<T> = x.iter().map(|&v| (v - mean) * rstd).collect();
    for (((o, &xh), &g), &b) in out.iter_mut().zip(&normalized).zip(gain).zip(bias) {
        *o = g * xh + b;
    }
    NormStats { normalized, rstd }
}

/// Input gradient of a layer norm given the output gradient.
pub(crate) fn layer_norm_row_backward<T: Scalar>(
    d_out: &[T],
    stats: &NormStats<T>,
    gain: &[T],
    d_in: &mut [T],
) {
    let n = T::lit(d_out.len() as f64);
    let mut mean_dy = T::zero();
    let mut mean_dy_xhat = T::zero();
    for ((&dy, &g), &xh) in d_out.iter().zip(gain).zip(&stats.normalized) {
        let dyh = dy * g;
        mean_dy += dyh;
        mean_dy_xhat += dyh * xh;
    }
    mean_dy /= n;
    mean_dy_xhat /= n;
    for (((di, &dy), &g), &xh) in d_in.iter_mut().zip(d_out).zip(gain).zip(&stats.normalized) {
        *di += stats.rstd * (dy * g - mean_dy - xh * mean_dy_xhat);
    }
}

/// `gain ⊙ (x − mean) / sqrt(var + eps) + bias` with the biased variance.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.is_empty() || gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    if !(eps > T::zero()) {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let mut out = Tensor::zeros(x.shape());
    layer_norm_row(x.data(), gain.data(), bias.data(), eps, out.data_mut());
    Ok(out)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub(crate) fn quick_gelu_scalar<T: Scalar>(x: T) -> T {
    x * sigmoid(T::lit(GELU_ALPHA) * x)
}

#[inline]
pub(crate) fn quick_gelu_grad<T: Scalar>(x: T) -> T {
    let a = T::lit(GELU_ALPHA);
    let s = sigmoid(a * x);
    s + a * x * s * (T::one() - s)
}

/// Elementwise `x · sigmoid(1.702 x)`.
pub fn quick_gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(quick_gelu_scalar)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` over every
/// coordinate, in double precision.
pub fn finite_difference_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i}: f(x+h)={plus}, f(x-h)={minus}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest coordinate-wise `|a − n| / max(|a|, |n|, floor)`.
///
/// `floor` keeps coordinates whose true gradient is essentially zero from
/// dominating the ratio with pure rounding noise.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
