//! Eager tensor kernels. The recording graph calls these for its forward values.

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// `a[n,k] @ b[k,m]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = (a.rows(), a.cols());
    if b.shape().len() != 2 || b.shape()[0] != k {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let m = b.cols();
    let mut out = vec![S::zero(); n * m];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a[n,k] @ b[m,k]^T`.
pub fn matmul_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (n, k) = (a.rows(), a.cols());
    if b.cols() != k {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    let m = b.rows();
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..m {
            out.push(dot(ar, b.row(j)));
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a[k,n]^T @ b[k,m]`.
pub fn matmul_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (k, n) = (a.rows(), a.cols());
    if b.rows() != k {
        return Err(Error::dim("matmul_at", a.shape(), b.shape()));
    }
    let m = b.cols();
    let mut out = vec![S::zero(); n * m];
    for p in 0..k {
        let ar = a.row(p);
        let br = b.row(p);
        for (i, &av) in ar.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            for (o, &bv) in out[i * m..(i + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `x[n,d_in] @ weight[d_in,d_out] + bias[d_out]`.
pub fn affine<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    if weight.shape().len() != 2 || x.cols() != weight.shape()[0] {
        return Err(Error::dim("affine (x, weight)", x.shape(), weight.shape()));
    }
    if bias.numel() != weight.cols() {
        return Err(Error::dim("affine (weight, bias)", weight.shape(), bias.shape()));
    }
    let mut out = matmul(x, weight)?;
    let b = bias.data();
    for r in 0..out.rows() {
        for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(out)
}

/// Softmax along `axis`, stabilized by subtracting the maximum.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::Argument(format!("softmax axis {axis} for shape {shape:?}")));
    }
    if !x.is_finite() {
        return Err(Error::Numeric("softmax input".into()));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone().into_data();
    let mut buf = vec![S::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = out[base + j * inner];
            }
            softmax_in_place(&mut buf);
            for (j, &b) in buf.iter().enumerate() {
                out[base + j * inner] = b;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row softmax where invalid columns get zero weight. A row with no valid
/// column yields all zeros; the second return value counts such rows.
pub fn masked_softmax_rows<S: Scalar>(x: &Tensor<S>, valid: Option<&[bool]>) -> Result<(Tensor<S>, usize)> {
    let c = x.cols();
    if let Some(v) = valid {
        if v.len() != c {
            return Err(Error::dim("masked_softmax", x.shape(), v.len()));
        }
    }
    let mut out = x.clone();
    let mut degenerate = 0;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        match valid {
            None => softmax_in_place(row),
            Some(v) => {
                let max = row
                    .iter()
                    .zip(v)
                    .filter(|(_, &ok)| ok)
                    .map(|(&s, _)| s)
                    .fold(S::neg_infinity(), S::max);
                if max == S::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = S::zero());
                    degenerate += 1;
                    continue;
                }
                let mut sum = S::zero();
                for (s, &ok) in row.iter_mut().zip(v) {
                    *s = if ok { (*s - max).exp() } else { S::zero() };
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
        }
    }
    Ok((out, degenerate))
}

/// Per-row statistics cached by layer normalization for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<S> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<S>,
}

/// Normalizes every row to zero mean and unit variance, then applies `gamma`/`beta`.
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gamma: &Tensor<S>, beta: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    Ok(layer_norm_with_cache(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_with_cache<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: f64,
) -> Result<(Tensor<S>, LayerNormCache<S>)> {
    let d = x.cols();
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = S::lit(eps);
    let dn = S::lit(d as f64);
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        // Constant rows with eps = 0 would divide by zero; they normalize to zero.
        let denom = (var + eps).sqrt();
        let istd = if denom > S::zero() { S::one() / denom } else { S::zero() };
        inv_std.push(istd);
        let nrow = normalized.row_mut(r);
        for (nv, &v) in nrow.iter_mut().zip(row) {
            *nv = (v - mean) * istd;
        }
        let nrow = normalized.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = nrow[j] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x * Phi(x)`.
#[inline]
pub fn gelu_scalar<S: Scalar>(x: S) -> S {
    x * standard_normal_cdf(x)
}

#[inline]
pub fn standard_normal_cdf<S: Scalar>(x: S) -> S {
    S::lit(0.5) * (S::one() + (x * S::lit(INV_SQRT_2)).erf())
}

/// d/dx of `x * Phi(x)`: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let pdf = S::lit(INV_SQRT_2PI) * (-(x * x) * S::lit(0.5)).exp();
    standard_normal_cdf(x) + x * pdf
}

pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus_scalar<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean over rows of `-log softmax(logits)[target]`, plus the softmax itself.
pub fn cross_entropy_with_probs<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<(S, Tensor<S>)> {
    let (n, k) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::dim("cross_entropy", logits.shape(), targets.len()));
    }
    let mut probs = logits.clone();
    let mut total = S::zero();
    for (r, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Index { what: "class target", index: t, bound: k });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
        total += lse - row[t];
        for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    Ok((total / S::lit(n as f64), probs))
}

pub fn cross_entropy_from_logits<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<S> {
    Ok(cross_entropy_with_probs(logits, targets)?.0)
}
