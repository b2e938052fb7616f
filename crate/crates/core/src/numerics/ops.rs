use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Real, Tensor};
use crate::{Error, Result};

fn dims_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 || b.rank() != 2 {
        return Err(dims_err("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer with weight `b`.
///
/// Every output is accumulated over `k` in ascending order whichever loop
/// shape is used, so results do not depend on `m`.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(dims_err("matmul_nt", a.shape(), b.shape()));
    }
    if m >= 4 {
        // row-axpy form vectorizes; the transpose is amortized over the rows
        return matmul(a, &b.transpose());
    }
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            let br = b.row(j);
            let mut acc = T::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`, used for weight gradients.
pub fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(dims_err("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Adds `bias[n]` to every row of `x[m×n]` in place.
pub fn add_row_bias<T: Real>(x: &mut Tensor<T>, bias: &Tensor<T>) -> Result<()> {
    if bias.len() != x.cols() {
        return Err(dims_err("add_row_bias", x.shape(), bias.shape()));
    }
    let n = x.cols();
    for row in x.data_mut().chunks_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let n = x.cols();
    if n == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(n) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Saved statistics for [`layer_norm_backward`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T = f32> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization with population variance, then `gamma * x̂ + beta`.
pub fn layer_norm_rows<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_rows_cached(x, gamma, beta, eps).map(|(y, _)| y)
}

pub fn layer_norm_rows_cached<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let n = x.cols();
    if n == 0 || gamma.len() != n || beta.len() != n {
        return Err(dims_err("layer_norm", x.shape(), gamma.shape()));
    }
    let rows = x.rows();
    let nf = T::lit(n as f64);
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let xh = xhat.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gamma.data()[j] * xh[j] + beta.data()[j];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.xhat.check_same_shape(dy)?;
    let n = dy.cols();
    let nf = T::lit(n as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[n]);
    let mut dbeta = Tensor::zeros(&[n]);
    let mut dxhat = vec![T::zero(); n];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for j in 0..n {
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * gamma.data()[j];
        }
        let mean_d = dxhat.iter().copied().sum::<T>() / nf;
        let mean_dx = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>() / nf;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    Ok((dx, dgamma, dbeta))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_K) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

/// Mean negative log-likelihood over positions whose target is not `ignore_index`.
///
/// `dlogits = (softmax - onehot) / count` on counted rows and zero on ignored rows.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    ignore_index: usize,
) -> Result<(T, Tensor<T>)> {
    let (b, v) = (logits.rows(), logits.cols());
    if targets.len() != b {
        return Err(Error::Shape(format!(
            "cross_entropy: {} targets for {} rows",
            targets.len(),
            b
        )));
    }
    let count = targets.iter().filter(|&&t| t != ignore_index).count();
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    let inv = T::one() / T::lit(count as f64);
    let mut d = Tensor::zeros(logits.shape());
    let mut loss = T::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t == ignore_index {
            continue;
        }
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[t];
        let drow = d.row_mut(r);
        for (j, o) in drow.iter_mut().enumerate() {
            *o = (row[j] - lse).exp() * inv;
        }
        drow[t] -= inv;
    }
    let loss = loss * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, d))
}
