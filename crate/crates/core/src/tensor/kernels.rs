//! Loop kernels shared by the graph ops. Accumulation order is fixed so
//! results are bitwise reproducible.

use super::Tensor;
use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of `input` it reads from.
/// `None` when the shapes are identical.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let rank = out.len();
    let offset = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..input.len()).rev() {
        strides[i + offset] = if input[i] == 1 { 0 } else { s };
        s *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub a_offsets: Vec<usize>,
    pub b_offsets: Vec<usize>,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!(
            "matmul needs rank >= 2 operands, got {a:?} and {b:?}"
        )));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {a:?} x {b:?}"
        )));
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let batch = broadcast_shape(a_batch, b_batch).map_err(|_| {
        Error::shape(format!("matmul batch dimensions of {a:?} and {b:?} do not broadcast"))
    })?;
    let nb: usize = batch.iter().product();
    let a_map = broadcast_map(&batch, a_batch);
    let b_map = broadcast_map(&batch, b_batch);
    let a_offsets = (0..nb)
        .map(|i| a_map.as_ref().map_or(i, |m| m[i]) * p * q)
        .collect();
    let b_offsets = (0..nb)
        .map(|i| b_map.as_ref().map_or(i, |m| m[i]) * q * r)
        .collect();
    let mut out_shape = batch;
    out_shape.extend([p, r]);
    Ok(MatmulPlan {
        out_shape,
        a_offsets,
        b_offsets,
        p,
        q,
        r,
    })
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<(Vec<usize>, Vec<f64>)> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let (p, q, r) = (plan.p, plan.q, plan.r);
    let mut out = vec![0.0; plan.a_offsets.len() * p * r];
    for (i, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        mm_acc(
            &mut out[i * p * r..(i + 1) * p * r],
            &a.data()[ao..ao + p * q],
            &b.data()[bo..bo + q * r],
            p,
            q,
            r,
        );
    }
    Ok((plan.out_shape, out))
}

/// Gradients of a (broadcast) batched matmul w.r.t. both operands.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let (p, q, r) = (plan.p, plan.q, plan.r);
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    for (i, (&ao, &bo)) in plan.a_offsets.iter().zip(&plan.b_offsets).enumerate() {
        let g = &grad[i * p * r..(i + 1) * p * r];
        mm_nt_acc(&mut ga[ao..ao + p * q], g, &b.data()[bo..bo + q * r], p, r, q);
        mm_tn_acc(&mut gb[bo..bo + q * r], &a.data()[ao..ao + p * q], g, p, q, r);
    }
    (ga, gb)
}

/// out[p×r] += a[p×q] · b[q×r]
fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let av = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[p×q] += g[p×r] · b[q×r]ᵀ
fn mm_nt_acc(out: &mut [f64], g: &[f64], b: &[f64], p: usize, r: usize, q: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            let mut acc = 0.0;
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * q + j] += acc;
        }
    }
}

/// out[q×r] += a[p×q]ᵀ · g[p×r]
fn mm_tn_acc(out: &mut [f64], a: &[f64], g: &[f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let grow = &g[i * r..(i + 1) * r];
        for j in 0..q {
            let av = a[i * q + j];
            let orow = &mut out[j * r..(j + 1) * r];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

pub(crate) fn transpose_last2(t: &Tensor) -> Tensor {
    let rank = t.rank();
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 2, rank - 1);
    permute(t, &axes)
}

pub(crate) fn permute(t: &Tensor, axes: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = t.numel();
    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..numel {
        data.push(t.data()[pos]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            pos -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data).expect("permutation preserves size")
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Numerically stable softmax along `axis`.
pub(crate) fn softmax(t: &Tensor, axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let x = t.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for k in 0..len {
                max = max.max(x[base + k * inner]);
            }
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                total += e;
            }
            for k in 0..len {
                out[base + k * inner] /= total;
            }
        }
    }
    out
}

/// log(1 + e^x) evaluated as max(x, 0) + log(1 + e^{-|x|}).
pub(crate) fn log1pexp(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
