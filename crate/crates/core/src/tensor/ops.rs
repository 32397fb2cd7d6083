//! Engine primitives.
//!
//! Every function here validates shapes, computes into a single output
//! buffer and returns it; no other tracked allocation happens. Reductions
//! always run in ascending index order so results are bit-reproducible.

use super::{numel, strides, Tensor};
use crate::error::{dim_err, Error, Result};

/// Additive mask value for excluded positions.
pub const MASK_NEG: f64 = -1e30;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Numpy-style broadcast of two shapes (right-aligned, extents 1 or equal).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {a:?} and {b:?} do not broadcast")),
        };
    }
    Ok(out)
}

/// Strides of `shape` aligned to `out`, zero along broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len()).map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { st[i - pad] }).collect()
}

/// Visits every output position in row-major order with the matching offset
/// into each (broadcast) input.
pub(crate) fn for_each_broadcast(out: &[usize], in_strides: &[Vec<usize>], mut f: impl FnMut(usize, &[usize])) {
    let total = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; in_strides.len()];
    for flat in 0..total {
        f(flat, &offs);
        for d in (0..rank).rev() {
            idx[d] += 1;
            for (o, s) in offs.iter_mut().zip(in_strides) {
                *o += s[d];
            }
            if idx[d] < out[d] {
                break;
            }
            for (o, s) in offs.iter_mut().zip(in_strides) {
                *o -= s[d] * out[d];
            }
            idx[d] = 0;
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let out = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out);
    let sb = broadcast_strides(b.shape(), &out);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &[sa, sb], |i, o| data[i] = f(da[o[0]], db[o[1]]));
    Ok(Tensor::from_parts(out, data))
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary(a, b, |x, y| x * y)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    unary(x, sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    unary(x, |v| v.max(0.0))
}

pub fn scale(x: &Tensor, factor: f64) -> Tensor {
    unary(x, |v| v * factor)
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
/// broadcast batch dimensions.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(dim_err!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(dim_err!("matmul contraction mismatch: {sa:?} x {sb:?}"));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch =
        broadcast_shapes(ba, bb).map_err(|_| dim_err!("matmul batch dims do not broadcast: {sa:?} x {sb:?}"))?;
    let batch = if batch.is_empty() { vec![1] } else { batch };
    let ba_s = if ba.is_empty() { vec![0; batch.len()] } else { broadcast_strides(ba, &batch) };
    let bb_s = if bb.is_empty() { vec![0; batch.len()] } else { broadcast_strides(bb, &batch) };
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; numel(&batch) * m * n];
    for_each_broadcast(&batch, &[ba_s, bb_s], |bi, o| {
        let (oa, ob, oc) = (o[0] * m * k, o[1] * k * n, bi * m * n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += da[oa + i * k + kk] * db[ob + kk * n + j];
                }
                data[oc + i * n + j] = acc;
            }
        }
    });
    let mut shape: Vec<usize> = broadcast_shapes(ba, bb)?;
    shape.extend([m, n]);
    Ok(Tensor::from_parts(shape, data))
}

/// `x @ w + b` over the last axis: `[.., in] x [in, out] (+ [out]) -> [.., out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let sx = x.shape();
    let fan_in = *sx.last().unwrap();
    if w.rank() != 2 || w.shape()[0] != fan_in {
        return Err(dim_err!("linear weight {:?} does not fit input {sx:?}", w.shape()));
    }
    let fan_out = w.shape()[1];
    if let Some(b) = b {
        if b.shape() != [fan_out] {
            return Err(dim_err!("linear bias {:?} does not match output width {fan_out}", b.shape()));
        }
    }
    let rows = x.numel() / fan_in;
    let (dx, dw) = (x.data(), w.data());
    let db = b.map(|b| b.data());
    let mut data = vec![0.0; rows * fan_out];
    for r in 0..rows {
        let xr = &dx[r * fan_in..(r + 1) * fan_in];
        for o in 0..fan_out {
            let mut acc = 0.0;
            for (kk, xv) in xr.iter().enumerate() {
                acc += xv * dw[kk * fan_out + o];
            }
            if let Some(db) = db {
                acc += db[o];
            }
            data[r * fan_out + o] = acc;
        }
    }
    let mut shape = sx.to_vec();
    *shape.last_mut().unwrap() = fan_out;
    Ok(Tensor::from_parts(shape, data))
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    Ok(())
}

fn check_finite(x: &Tensor, what: &str) -> Result<()> {
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("{what} input contains non-finite values")));
    }
    Ok(())
}

/// (outer count, axis extent, inner count) for iterating slices along `axis`.
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// In-place softmax of every slice along `axis`.
fn softmax_in_place(data: &mut [f64], shape: &[usize], axis: usize) {
    let (outer, len, inner) = axis_layout(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..len {
                mx = mx.max(data[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (data[base + j * inner] - mx).exp();
                data[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                data[base + j * inner] /= sum;
            }
        }
    }
}

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis(x.shape(), axis)?;
    check_finite(x, "softmax")?;
    let mut data = x.data().to_vec();
    softmax_in_place(&mut data, x.shape(), axis);
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// `softmax(x + mask + bias)` without materializing either sum.
///
/// `mask` and `bias` must broadcast to exactly `x`'s shape. The additions are
/// applied in the order `(x + mask) + bias`, matching the composed form.
pub fn fused_softmax_mask_bias(
    x: &Tensor,
    mask: Option<&Tensor>,
    bias: Option<&Tensor>,
    axis: usize,
) -> Result<Tensor> {
    check_axis(x.shape(), axis)?;
    check_finite(x, "fused softmax")?;
    let out = x.shape().to_vec();
    let mut ins: Vec<&Tensor> = vec![x];
    for (name, t) in [("mask", mask), ("bias", bias)] {
        if let Some(t) = t {
            if broadcast_shapes(&out, t.shape())? != out {
                return Err(dim_err!("{name} {:?} does not broadcast to {out:?}", t.shape()));
            }
            check_finite(t, "fused softmax")?;
            ins.push(t);
        }
    }
    let in_strides: Vec<Vec<usize>> = ins.iter().map(|t| broadcast_strides(t.shape(), &out)).collect();
    let datas: Vec<&[f64]> = ins.iter().map(|t| t.data()).collect();
    let mut data = vec![0.0; numel(&out)];
    for_each_broadcast(&out, &in_strides, |i, o| {
        let mut v = datas[0][o[0]];
        for (d, off) in datas[1..].iter().zip(&o[1..]) {
            v += d[*off];
        }
        data[i] = v;
    });
    softmax_in_place(&mut data, &out, axis);
    Ok(Tensor::from_parts(out, data))
}

/// Layer normalization over the last axis (population variance, eps inside
/// the square root).
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err!("layernorm params {:?}/{:?} do not match last extent {c}", gamma.shape(), beta.shape()));
    }
    let (dx, dg, db) = (x.data(), gamma.data(), beta.data());
    let rows = x.numel() / c;
    let mut data = vec![0.0; x.numel()];
    for r in 0..rows {
        let row = &dx[r * c..(r + 1) * c];
        let mut sum = 0.0;
        for v in row {
            sum += v;
        }
        let mean = sum / c as f64;
        let mut var = 0.0;
        for v in row {
            var += (v - mean) * (v - mean);
        }
        let inv = 1.0 / (var / c as f64 + eps).sqrt();
        for j in 0..c {
            data[r * c + j] = (row[j] - mean) * inv * dg[j] + db[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

fn reduce_axis(x: &Tensor, axis: usize, mean: bool) -> Result<Tensor> {
    check_axis(x.shape(), axis)?;
    if x.rank() == 1 {
        // Reducing the only axis yields a one-element tensor.
        let mut acc = 0.0;
        for v in x.data() {
            acc += v;
        }
        let v = if mean { acc / x.numel() as f64 } else { acc };
        return Ok(Tensor::from_parts(vec![1], vec![v]));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let d = x.data();
    let mut data = vec![0.0; outer * inner];
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = 0.0;
            for j in 0..len {
                acc += d[o * len * inner + j * inner + i];
            }
            data[o * inner + i] = if mean { acc / len as f64 } else { acc };
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Ok(Tensor::from_parts(shape, data))
}

/// Mean over `axis`, removing it (a rank-1 input gives shape `[1]`).
pub fn mean_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce_axis(x, axis, true)
}

/// Sum over `axis`, removing it (a rank-1 input gives shape `[1]`).
pub fn sum_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    reduce_axis(x, axis, false)
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(dim_err!("{perm:?} is not a permutation of rank {rank}"));
    }
    let out: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src = strides(x.shape());
    let st: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
    let d = x.data();
    let mut data = vec![0.0; x.numel()];
    for_each_broadcast(&out, &[st], |i, o| data[i] = d[o[0]]);
    Ok(Tensor::from_parts(out, data))
}

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if shape.is_empty() || shape.contains(&0) || numel(shape) != x.numel() {
        return Err(dim_err!("cannot reshape {:?} to {shape:?}", x.shape()));
    }
    Ok(Tensor::from_parts(shape.to_vec(), x.data().to_vec()))
}

/// Concatenation along the last axis; leading extents must agree.
pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
    let lead = &first.shape()[..first.rank() - 1];
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(dim_err!("concat leading dims differ: {:?} vs {:?}", first.shape(), p.shape()));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = numel(lead);
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor::from_parts(shape, data))
}

/// Elements `start..end` along `axis`.
pub fn slice_axis(x: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    check_axis(x.shape(), axis)?;
    if start >= end || end > x.shape()[axis] {
        return Err(dim_err!("slice {start}..{end} out of range for axis {axis} of {:?}", x.shape()));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let w = end - start;
    let d = x.data();
    let mut data = Vec::with_capacity(outer * w * inner);
    for o in 0..outer {
        let base = o * len * inner;
        data.extend_from_slice(&d[base + start * inner..base + end * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = w;
    Ok(Tensor::from_parts(shape, data))
}

/// Writes `src` into `dst` at `start..` along `axis`. `dst` must not be shared.
pub fn write_slice(dst: &mut Tensor, axis: usize, start: usize, src: &Tensor) -> Result<()> {
    check_axis(dst.shape(), axis)?;
    let mut expect = dst.shape().to_vec();
    let w = src.shape().get(axis).copied().unwrap_or(0);
    expect[axis] = w;
    if src.shape() != expect.as_slice() || start + w > dst.shape()[axis] {
        return Err(dim_err!("cannot write {:?} into {:?} at {start} along axis {axis}", src.shape(), dst.shape()));
    }
    let (outer, len, inner) = axis_layout(dst.shape(), axis);
    let s = src.data();
    let d = dst.data_mut().ok_or_else(|| Error::Dimension("write_slice target buffer is shared".into()))?;
    for o in 0..outer {
        let dbase = o * len * inner + start * inner;
        d[dbase..dbase + w * inner].copy_from_slice(&s[o * w * inner..(o + 1) * w * inner]);
    }
    Ok(())
}

/// Outer product over the last axes: `[.., I] x [.., J] -> [.., I, J]`.
pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra != rb || a.shape()[..ra - 1] != b.shape()[..rb - 1] {
        return Err(dim_err!("outer needs equal leading dims: {:?} vs {:?}", a.shape(), b.shape()));
    }
    let (i_n, j_n) = (a.shape()[ra - 1], b.shape()[rb - 1]);
    let lead = numel(&a.shape()[..ra - 1]);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; lead * i_n * j_n];
    for l in 0..lead {
        for i in 0..i_n {
            for j in 0..j_n {
                data[(l * i_n + i) * j_n + j] = da[l * i_n + i] * db[l * j_n + j];
            }
        }
    }
    let mut shape = a.shape()[..ra - 1].to_vec();
    shape.extend([i_n, j_n]);
    Ok(Tensor::from_parts(shape, data))
}

/// `[S, I, P] x [S, J, Q] -> [I, J, P*Q]`, the mean over `S` of per-row outer
/// products, flattened row-major over `(p, q)`.
pub fn outer_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(dim_err!("outer_mean needs [S,I,P] and [S,J,Q], got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (s_n, i_n, p_n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (j_n, q_n) = (b.shape()[1], b.shape()[2]);
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; i_n * j_n * p_n * q_n];
    for i in 0..i_n {
        for j in 0..j_n {
            let base = (i * j_n + j) * p_n * q_n;
            for p in 0..p_n {
                for q in 0..q_n {
                    let mut acc = 0.0;
                    for s in 0..s_n {
                        acc += da[(s * i_n + i) * p_n + p] * db[(s * j_n + j) * q_n + q];
                    }
                    data[base + p * q_n + q] = acc / s_n as f64;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![i_n, j_n, p_n * q_n], data))
}

/// `[I, K, C] x [J, K, C] -> [I, J, C]`: `out[i,j,c] = sum_k a[i,k,c] * b[j,k,c]`.
pub fn contract_k(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 3 || b.rank() != 3 || a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2] {
        return Err(dim_err!("contract_k needs [I,K,C] and [J,K,C], got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (i_n, k_n, c_n) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let j_n = b.shape()[0];
    let (da, db) = (a.data(), b.data());
    let mut data = vec![0.0; i_n * j_n * c_n];
    for i in 0..i_n {
        for j in 0..j_n {
            for c in 0..c_n {
                let mut acc = 0.0;
                for k in 0..k_n {
                    acc += da[(i * k_n + k) * c_n + c] * db[(j * k_n + k) * c_n + c];
                }
                data[(i * j_n + j) * c_n + c] = acc;
            }
        }
    }
    Ok(Tensor::from_parts(vec![i_n, j_n, c_n], data))
}
