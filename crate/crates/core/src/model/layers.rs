//! Row-major building blocks with hand-written backward passes.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type; training runs in `f32`, gradient checks in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

pub const LN_EPS: f64 = 1e-5;

pub struct LnCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layernorm<T: Scalar>(x: &Array2<T>, gain: &Array1<T>, bias: &Array1<T>) -> (Array2<T>, LnCache<T>) {
    let (n, d) = x.dim();
    let mut xhat = Array2::zeros((n, d));
    let mut rstd = Array1::zeros(n);
    let inv_d = cst::<T>(1.0 / d as f64);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + cst(LN_EPS)).sqrt();
        rstd[i] = r;
        xhat.row_mut(i).zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
    }
    let out = &xhat * gain + bias;
    (out, LnCache { xhat, rstd })
}

/// Returns dx; accumulates into `dgain` and `dbias`.
pub fn layernorm_backward<T: Scalar>(
    dout: &Array2<T>,
    cache: &LnCache<T>,
    gain: &Array1<T>,
    dgain: &mut Array1<T>,
    dbias: &mut Array1<T>,
) -> Array2<T> {
    let (n, d) = dout.dim();
    *dgain += &(dout * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dout.sum_axis(Axis(0));
    let dxhat = dout * gain;
    let inv_d = cst::<T>(1.0 / d as f64);
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() * inv_d;
        let mean_dhx = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dh[j] - mean_dh - xh[j] * mean_dhx);
        }
    }
    dx
}

pub fn layernorm_row<T: Scalar>(x: ArrayView1<T>, gain: &Array1<T>, bias: &Array1<T>) -> Array1<T> {
    let d = x.len();
    let inv_d = cst::<T>(1.0 / d as f64);
    let mean = x.sum() * inv_d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
    let r = T::one() / (var + cst(LN_EPS)).sqrt();
    x.mapv(|v| (v - mean) * r) * gain + bias
}

/// `x · w + b` with `w` stored as (in × out).
pub fn linear<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dx = dy·wᵀ`.
pub fn linear_backward<T: Scalar>(
    dy: &Array2<T>,
    x: &Array2<T>,
    w: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    general_mat_mul(T::one(), &x.t(), dy, T::one(), dw);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let k = cst::<T>(0.044715);
    cst::<T>(0.5) * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = cst::<T>(GELU_C);
    let k = cst::<T>(0.044715);
    let half = cst::<T>(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + cst::<T>(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

/// Causal multi-head self-attention over a packed `[q | k | v]` matrix.
/// Returns the concatenated head outputs and per-head attention weights.
pub fn causal_attention<T: Scalar>(qkv: &Array2<T>, n_heads: usize) -> (Array2<T>, Vec<Array2<T>>) {
    let n = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / n_heads;
    let scale = cst::<T>(1.0 / (hd as f64).sqrt());
    let mut y = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
        let mut p = q.dot(&k.t());
        for i in 0..n {
            let mut row = p.row_mut(i);
            softmax_causal_row(&mut row, i, scale);
        }
        let yh = p.dot(&v);
        y.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&yh);
        probs.push(p);
    }
    (y, probs)
}

fn softmax_causal_row<T: Scalar>(row: &mut ArrayViewMut1<T>, i: usize, scale: T) {
    let mut max = T::neg_infinity();
    for j in 0..=i {
        row[j] = row[j] * scale;
        if row[j] > max {
            max = row[j];
        }
    }
    let mut sum = T::zero();
    for j in 0..=i {
        row[j] = (row[j] - max).exp();
        sum += row[j];
    }
    for j in 0..row.len() {
        row[j] = if j <= i { row[j] / sum } else { T::zero() };
    }
}

pub fn causal_attention_backward<T: Scalar>(
    dy: &Array2<T>,
    qkv: &Array2<T>,
    probs: &[Array2<T>],
    n_heads: usize,
) -> Array2<T> {
    let n = qkv.nrows();
    let d = qkv.ncols() / 3;
    let hd = d / n_heads;
    let scale = cst::<T>(1.0 / (hd as f64).sqrt());
    let mut dqkv = Array2::zeros((n, 3 * d));
    for (h, p) in probs.iter().enumerate() {
        let q = qkv.slice(s![.., h * hd..(h + 1) * hd]);
        let k = qkv.slice(s![.., d + h * hd..d + (h + 1) * hd]);
        let v = qkv.slice(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]);
        let dyh = dy.slice(s![.., h * hd..(h + 1) * hd]);
        let mut ds = dyh.dot(&v.t());
        let dv = p.t().dot(&dyh);
        for i in 0..n {
            let pr = p.row(i);
            let mut dr = ds.row_mut(i);
            let dot: T = (0..=i).map(|j| pr[j] * dr[j]).sum();
            for j in 0..n {
                dr[j] = if j <= i { pr[j] * (dr[j] - dot) * scale } else { T::zero() };
            }
        }
        let dq = ds.dot(&k);
        let dk = ds.t().dot(&q);
        dqkv.slice_mut(s![.., h * hd..(h + 1) * hd]).assign(&dq);
        dqkv.slice_mut(s![.., d + h * hd..d + (h + 1) * hd]).assign(&dk);
        dqkv.slice_mut(s![.., 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
    }
    dqkv
}

/// Numerically stable log-softmax of one score vector.
pub fn log_softmax<T: Scalar>(z: ArrayView1<T>) -> Array1<T> {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z.mapv(|v| v - lse)
}

pub fn softmax<T: Scalar>(z: ArrayView1<T>) -> Array1<T> {
    log_softmax(z).mapv(|v| v.exp())
}

/// Cross-entropy rows: for each row of `logits` with a target class, adds
/// `weight · (−log p_target)` to the returned loss and writes
/// `weight · (softmax − onehot)` into the returned gradient.
pub fn cross_entropy_rows<T: Scalar>(logits: ArrayView2<T>, targets: &[usize], weights: &[T]) -> (T, Array2<T>) {
    let mut grad = Array2::zeros(logits.dim());
    let mut loss = T::zero();
    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
        let lp = log_softmax(logits.row(i));
        loss += -lp[t] * w;
        let mut g = grad.row_mut(i);
        g.zip_mut_with(&lp, |o, &l| *o = l.exp() * w);
        g[t] -= w;
    }
    (loss, grad)
}
