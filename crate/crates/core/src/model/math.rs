//! Scalar abstraction and the nonlinear kernels (GELU, layer norm, softmax)
//! with their hand-derived backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs in f32 for
//! training and f64 for finite-difference gradient verification.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

/// Float type the model computes in: f32 (training default) or f64
/// (gradient checks).
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

const LN_EPS: f64 = 1e-5;
/// sqrt(2/pi) for the tanh GELU approximation.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<S: Scalar>(x: S) -> S {
    let x = x.to_f64();
    let inner = GELU_C * (x + GELU_CUBIC * x * x * x);
    S::from_f64(0.5 * x * (1.0 + inner.tanh()))
}

/// Derivative of [`gelu`].
pub fn dgelu<S: Scalar>(x: S) -> S {
    let x = x.to_f64();
    let inner = GELU_C * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x);
    S::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
}

/// Row-wise layer norm activations plus the per-row statistics the backward
/// pass needs.
pub struct LayerNormed<S> {
    pub y: Array2<S>,
    pub mean: Array1<S>,
    pub rstd: Array1<S>,
}

/// Normalizes each row to zero mean / unit variance, then applies gain and
/// bias.
pub fn layernorm_rows<S: Scalar>(
    x: &ArrayView2<S>,
    gain: &ArrayView1<S>,
    bias: &ArrayView1<S>,
) -> LayerNormed<S> {
    let (n, f) = x.dim();
    let mut y = Array2::zeros((n, f));
    let mut mean = Array1::zeros(n);
    let mut rstd = Array1::zeros(n);
    let inv_f = S::from_f64(1.0 / f as f64);
    let eps = S::from_f64(LN_EPS);
    for i in 0..n {
        let row = x.row(i);
        let mu = row.sum() * inv_f;
        let mut var = S::zero();
        for &v in row {
            let d = v - mu;
            var = var + d * d;
        }
        var = var * inv_f;
        let r = S::one() / (var + eps).sqrt();
        mean[i] = mu;
        rstd[i] = r;
        let mut out = y.row_mut(i);
        for j in 0..f {
            out[j] = (row[j] - mu) * r * gain[j] + bias[j];
        }
    }
    LayerNormed { y, mean, rstd }
}

/// Backward of [`layernorm_rows`]: returns (dx, dgain, dbias).
pub fn layernorm_backward<S: Scalar>(
    dy: &ArrayView2<S>,
    x: &ArrayView2<S>,
    stats: &LayerNormed<S>,
    gain: &ArrayView1<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let (n, f) = x.dim();
    let mut dx = Array2::zeros((n, f));
    let mut dgain = Array1::zeros(f);
    let mut dbias = Array1::zeros(f);
    let inv_f = S::from_f64(1.0 / f as f64);
    for i in 0..n {
        let mu = stats.mean[i];
        let r = stats.rstd[i];
        let xrow = x.row(i);
        let dyrow = dy.row(i);
        // xhat = (x - mu) * r; dxhat = dy * gain.
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..f {
            let xhat = (xrow[j] - mu) * r;
            let dxhat = dyrow[j] * gain[j];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            dgain[j] = dgain[j] + dyrow[j] * xhat;
            dbias[j] = dbias[j] + dyrow[j];
        }
        let m1 = sum_dxhat * inv_f;
        let m2 = sum_dxhat_xhat * inv_f;
        let mut dxrow = dx.row_mut(i);
        for j in 0..f {
            let xhat = (xrow[j] - mu) * r;
            let dxhat = dyrow[j] * gain[j];
            dxrow[j] = r * (dxhat - m1 - xhat * m2);
        }
    }
    (dx, dgain, dbias)
}

/// In-place softmax over `row` (max-subtracted for stability).
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Natural-log softmax of one logit row, accumulated in f64.
pub fn log_softmax_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let sum: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
    let lse = max + sum.ln();
    row.iter().map(|&v| v.to_f64() - lse).collect()
}

/// log(softmax(row))[index], accumulated in f64.
pub fn log_prob_of<S: Scalar>(row: &[S], index: usize) -> f64 {
    let max = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64()));
    let sum: f64 = row.iter().map(|&v| (v.to_f64() - max).exp()).sum();
    row[index].to_f64() - max - sum.ln()
}

/// Standard normal draw (Box-Muller).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sum of squares of a slice, accumulated in f64.
pub fn sum_sq<S: Scalar>(v: &[S]) -> f64 {
    v.iter().map(|&x| x.to_f64() * x.to_f64()).sum()
}

/// Mean over rows (axis 0) as a vector; used for bias gradients.
pub fn col_sums<S: Scalar>(m: &ArrayView2<S>) -> Array1<S> {
    m.sum_axis(Axis(0))
}
