//! Forward kernels over plain tensors.
//!
//! Both the recording [`Graph`](crate::graph::Graph) and the unrecorded
//! [`Eval`](crate::backend::Eval) backend call these functions, so recorded and
//! unrecorded forward passes produce bit-identical values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Padding applied by [`max_pool_1d`] before windowing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolPad {
    None,
    /// Append `k - 1` copies of the last row so a stride-1 pool preserves length.
    ReplicateLast,
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, s, &[0, 0])),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul_nt", a)?;
    let (n, k2) = require_2d("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out[i * n + j] = dot(arow, b.row(j));
        }
    }
    Tensor::matrix(m, n, out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = require_2d("matmul_tn", a)?;
    let (k2, n) = require_2d("matmul_tn", b)?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for (i, &s) in arow.iter().enumerate() {
            axpy(&mut out[i * n..(i + 1) * n], s, brow);
        }
    }
    Tensor::matrix(m, n, out)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(out: &mut [f64], s: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d("transpose", a)?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.get2(i, j);
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Adds `bias` (length = last axis extent) to every row of `a`.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != a.cols() {
        return Err(Error::dim("add_bias", a.shape(), bias.shape()));
    }
    let mut out = a.clone();
    let c = a.cols();
    for row in out.data_mut().chunks_mut(c) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    a.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| if v < 0.0 { 0.0 } else { v })
}

pub fn slice_rows(a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let (m, n) = require_2d("slice_rows", a)?;
    if lo >= hi || hi > m {
        return Err(Error::Index {
            what: "row slice",
            index: hi,
            len: m,
        });
    }
    Tensor::matrix(hi - lo, n, a.data()[lo * n..hi * n].to_vec())
}

pub fn slice_cols(a: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
    let (m, n) = require_2d("slice_cols", a)?;
    if lo >= hi || hi > n {
        return Err(Error::Index {
            what: "column slice",
            index: hi,
            len: n,
        });
    }
    let w = hi - lo;
    let mut out = Vec::with_capacity(m * w);
    for i in 0..m {
        out.extend_from_slice(&a.row(i)[lo..hi]);
    }
    Tensor::matrix(m, w, out)
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
    let (_, n) = require_2d("concat_rows", first)?;
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let (m, n2) = require_2d("concat_rows", p)?;
        if n2 != n {
            return Err(Error::dim("concat_rows", first.shape(), p.shape()));
        }
        rows += m;
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, n, data)
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
    let (m, _) = require_2d("concat_cols", first)?;
    let mut width = 0;
    for p in parts {
        let (m2, n) = require_2d("concat_cols", p)?;
        if m2 != m {
            return Err(Error::dim("concat_cols", first.shape(), p.shape()));
        }
        width += n;
    }
    let mut data = Vec::with_capacity(m * width);
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(m, width, data)
}

/// Row `p * parts.len() + b` of the result is row `p` of `parts[b]`.
pub fn interleave_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("interleave_rows of nothing".into()))?;
    let (m, n) = require_2d("interleave_rows", first)?;
    for p in parts {
        same_shape("interleave_rows", first, p)?;
    }
    let mut data = Vec::with_capacity(m * n * parts.len());
    for i in 0..m {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(m * parts.len(), n, data)
}

/// Takes row `i` from `a` where `mask[i]` holds and from `b` otherwise.
pub fn row_select(mask: &[bool], a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("row_select", a, b)?;
    if mask.len() != a.rows() {
        return Err(Error::dim("row_select", a.shape(), &[mask.len()]));
    }
    let mut out = b.clone();
    for (i, &m) in mask.iter().enumerate() {
        if m {
            out.row_mut(i).copy_from_slice(a.row(i));
        }
    }
    Ok(out)
}

/// Stride layout `(outer, axis_len, inner)` for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            len: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, stabilized by max subtraction. Positions with
/// `mask[j] == false` (mask indexed along `axis`) get exactly zero weight.
pub fn softmax(x: &Tensor, axis: usize, mask: Option<&[bool]>) -> Result<Tensor> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("softmax input contains NaN".into()));
    }
    let (outer, n, inner) = axis_layout(x.shape(), axis)?;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::dim("softmax mask", x.shape(), &[m.len()]));
        }
        if !m.iter().any(|&v| v) {
            return Err(Error::Contract("softmax with every position masked".into()));
        }
    }
    let valid = |j: usize| mask.is_none_or(|m| m[j]);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in (0..n).filter(|&j| valid(j)) {
                mx = mx.max(xd[idx(j)]);
            }
            let mut total = 0.0;
            for j in (0..n).filter(|&j| valid(j)) {
                let e = (xd[idx(j)] - mx).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in (0..n).filter(|&j| valid(j)) {
                out[idx(j)] /= total;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn check_odd_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "temporal kernel size must be odd, got {k}"
        )));
    }
    Ok(())
}

/// Temporal convolution of `x: [L x d_in]` with `w: [k x d_in x d_out]`,
/// zero-padded symmetrically so the output keeps length `L`.
///
/// `y[p] = Σ_o x[p + o - k/2] · w[o]`, with out-of-range rows reading zero.
pub fn conv1d_temporal(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (len, din) = require_2d("conv1d_temporal", x)?;
    let [k, wdin, dout] = *w.shape() else {
        return Err(Error::dim("conv1d_temporal", x.shape(), w.shape()));
    };
    check_odd_kernel(k)?;
    if wdin != din {
        return Err(Error::dim("conv1d_temporal", x.shape(), w.shape()));
    }
    let r = k / 2;
    let wd = w.data();
    let mut out = vec![0.0; len * dout];
    for p in 0..len {
        let orow = &mut out[p * dout..(p + 1) * dout];
        for o in 0..k {
            let Some(q) = (p + o).checked_sub(r).filter(|&q| q < len) else {
                continue;
            };
            let xrow = x.row(q);
            let wk = &wd[o * din * dout..(o + 1) * din * dout];
            for (c, &xv) in xrow.iter().enumerate() {
                axpy(orow, xv, &wk[c * dout..(c + 1) * dout]);
            }
        }
    }
    Tensor::matrix(len, dout, out)
}

/// Per-channel max pooling along the temporal (row) axis of `x: [L x d]`.
///
/// Returns the pooled tensor and, for every output element, the input row its
/// value was taken from (the first maximal row on ties).
pub fn max_pool_1d(
    x: &Tensor,
    k: usize,
    stride: usize,
    pad: PoolPad,
) -> Result<(Tensor, Vec<usize>)> {
    let (len, d) = require_2d("max_pool_1d", x)?;
    if k == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "max_pool_1d needs k >= 1 and stride >= 1, got k={k} stride={stride}"
        )));
    }
    let padded = match pad {
        PoolPad::None => len,
        PoolPad::ReplicateLast => len + k - 1,
    };
    if k > padded {
        return Err(Error::Config(format!(
            "pool window {k} exceeds padded input length {padded}"
        )));
    }
    let out_len = (padded - k) / stride + 1;
    let mut out = vec![0.0; out_len * d];
    let mut arg = vec![0usize; out_len * d];
    for p in 0..out_len {
        let start = p * stride;
        for c in 0..d {
            let mut best = start.min(len - 1);
            for q in start..start + k {
                let src = q.min(len - 1);
                if x.get2(src, c) > x.get2(best, c) {
                    best = src;
                }
            }
            out[p * d + c] = x.get2(best, c);
            arg[p * d + c] = best;
        }
    }
    Ok((Tensor::matrix(out_len, d, out)?, arg))
}

/// Layer normalization over the last axis. Returns the output together with the
/// normalized pre-affine values and per-row inverse standard deviations.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        let hr = xhat.row_mut(i);
        for (h, &v) in hr.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let hr = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = hr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    Ok((out, xhat, inv_std))
}

/// Inverted dropout. Returns the output and the per-element multiplier
/// (`0` or `1 / (1 - rate)`); in eval mode, or with `rate == 0`, the
/// multiplier is all ones and no random numbers are drawn.
pub fn dropout<R: Rng + ?Sized>(
    x: &Tensor,
    rate: f64,
    train: bool,
    rng: &mut R,
) -> Result<(Tensor, Vec<f64>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if !train || rate == 0.0 {
        return Ok((x.clone(), vec![1.0; x.len()]));
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Ok((Tensor::new(x.shape().to_vec(), data)?, mask))
}

/// Mean softmax cross-entropy of the rows of `logits` against `targets`.
/// Returns the scalar loss and the row-wise softmax probabilities.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Tensor)> {
    let c = logits.cols();
    let b = logits.rows();
    if targets.len() != b {
        return Err(Error::dim("cross_entropy", logits.shape(), &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Index {
            what: "target class",
            index: bad,
            len: c,
        });
    }
    let probs = softmax(logits, logits.ndim() - 1, None)?;
    let mut loss = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        // log-sum-exp form keeps the loss finite when the target probability underflows
        let row = logits.row(i);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        loss += lse - row[t];
    }
    Ok((Tensor::scalar(loss / b as f64), probs))
}
