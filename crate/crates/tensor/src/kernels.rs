//! Forward and backward kernels on raw slices.

use crate::element::{Element, Strides};
use crate::tape::{AttnDims, AxisSplit, MatDims};

pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], d: &MatDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let ab = &a[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bb = if d.batched_rhs { &b[bi * d.k * d.n..(bi + 1) * d.k * d.n] } else { b };
        T::gemm(
            d.m,
            d.k,
            d.n,
            T::one(),
            ab,
            Strides::row_major(d.k),
            bb,
            Strides::row_major(d.n),
            T::zero(),
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            Strides::row_major(d.n),
        );
    }
    out
}

pub(crate) fn matmul_grad_lhs<T: Element>(g: &[T], b: &[T], d: &MatDims) -> Vec<T> {
    let mut out = vec![T::zero(); d.batch * d.m * d.k];
    for bi in 0..d.batch {
        let gb = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let bb = if d.batched_rhs { &b[bi * d.k * d.n..(bi + 1) * d.k * d.n] } else { b };
        T::gemm(
            d.m,
            d.n,
            d.k,
            T::one(),
            gb,
            Strides::row_major(d.n),
            bb,
            Strides::transposed(d.n),
            T::zero(),
            &mut out[bi * d.m * d.k..(bi + 1) * d.m * d.k],
            Strides::row_major(d.k),
        );
    }
    out
}

pub(crate) fn matmul_grad_rhs<T: Element>(a: &[T], g: &[T], d: &MatDims) -> Vec<T> {
    let rhs_batches = if d.batched_rhs { d.batch } else { 1 };
    let mut out = vec![T::zero(); rhs_batches * d.k * d.n];
    for bi in 0..d.batch {
        let ab = &a[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let gb = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let ob = if d.batched_rhs { bi } else { 0 };
        T::gemm(
            d.k,
            d.m,
            d.n,
            T::one(),
            ab,
            Strides::transposed(d.k),
            gb,
            Strides::row_major(d.n),
            T::one(),
            &mut out[ob * d.k * d.n..(ob + 1) * d.k * d.n],
            Strides::row_major(d.n),
        );
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax<T: Element>(x: &[T], s: AxisSplit) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..s.outer {
        for i in 0..s.inner {
            let idx = |j: usize| (o * s.len + j) * s.inner + i;
            let max = (0..s.len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..s.len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..s.len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], g: &[T], s: AxisSplit) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    for o in 0..s.outer {
        for i in 0..s.inner {
            let idx = |j: usize| (o * s.len + j) * s.inner + i;
            let dot = (0..s.len).fold(T::zero(), |acc, j| acc + g[idx(j)] * y[idx(j)]);
            for j in 0..s.len {
                out[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
            }
        }
    }
    out
}

/// Normalizes to zero mean and unit variance along the split axis.
/// Returns the output and the per-group inverse standard deviation.
pub(crate) fn layernorm<T: Element>(x: &[T], s: AxisSplit, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); s.outer * s.inner];
    let n = T::from_f64(s.len as f64);
    for o in 0..s.outer {
        for i in 0..s.inner {
            let idx = |j: usize| (o * s.len + j) * s.inner + i;
            let mean = (0..s.len).fold(T::zero(), |acc, j| acc + x[idx(j)]) / n;
            let var = (0..s.len).fold(T::zero(), |acc, j| {
                let d = x[idx(j)] - mean;
                acc + d * d
            }) / n;
            let r = T::one() / (var + eps).sqrt();
            inv_std[o * s.inner + i] = r;
            for j in 0..s.len {
                out[idx(j)] = (x[idx(j)] - mean) * r;
            }
        }
    }
    (out, inv_std)
}

pub(crate) fn layernorm_backward<T: Element>(y: &[T], g: &[T], inv_std: &[T], s: AxisSplit) -> Vec<T> {
    let mut out = vec![T::zero(); y.len()];
    let n = T::from_f64(s.len as f64);
    for o in 0..s.outer {
        for i in 0..s.inner {
            let idx = |j: usize| (o * s.len + j) * s.inner + i;
            let mean_g = (0..s.len).fold(T::zero(), |acc, j| acc + g[idx(j)]) / n;
            let mean_gy = (0..s.len).fold(T::zero(), |acc, j| acc + g[idx(j)] * y[idx(j)]) / n;
            let r = inv_std[o * s.inner + i];
            for j in 0..s.len {
                out[idx(j)] = r * (g[idx(j)] - mean_g - y[idx(j)] * mean_gy);
            }
        }
    }
    out
}

pub(crate) fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output axis `i` takes input axis `perm[i]`.
pub(crate) fn permute<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    if rank == 0 {
        out.push(x[0]);
        return out;
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        // innermost axis as a strided run
        let stride = src_strides[last];
        for t in 0..out_shape[last] {
            out.push(x[offset + t * stride]);
        }
        // advance the odometer over the remaining axes
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Scaled dot-product attention; returns output and attention weights.
pub(crate) fn attention<T: Element>(q: &[T], k: &[T], v: &[T], d: &AttnDims) -> (Vec<T>, Vec<T>) {
    let scale = T::one() / T::from_f64(d.d as f64).sqrt();
    let mut probs = vec![T::zero(); d.batch * d.lq * d.lk];
    let mut out = vec![T::zero(); d.batch * d.lq * d.dv];
    for b in 0..d.batch {
        let qb = &q[b * d.lq * d.d..(b + 1) * d.lq * d.d];
        let kb = &k[b * d.lk * d.d..(b + 1) * d.lk * d.d];
        let vb = &v[b * d.lk * d.dv..(b + 1) * d.lk * d.dv];
        let pb = &mut probs[b * d.lq * d.lk..(b + 1) * d.lq * d.lk];
        T::gemm(
            d.lq,
            d.d,
            d.lk,
            scale,
            qb,
            Strides::row_major(d.d),
            kb,
            Strides::transposed(d.d),
            T::zero(),
            pb,
            Strides::row_major(d.lk),
        );
        for row in pb.chunks_exact_mut(d.lk) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total = total + *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        T::gemm(
            d.lq,
            d.lk,
            d.dv,
            T::one(),
            pb,
            Strides::row_major(d.lk),
            vb,
            Strides::row_major(d.dv),
            T::zero(),
            &mut out[b * d.lq * d.dv..(b + 1) * d.lq * d.dv],
            Strides::row_major(d.dv),
        );
    }
    (out, probs)
}

pub(crate) fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    d: &AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let scale = T::one() / T::from_f64(d.d as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); d.lq * d.lk];
    for b in 0..d.batch {
        let qb = &q[b * d.lq * d.d..(b + 1) * d.lq * d.d];
        let kb = &k[b * d.lk * d.d..(b + 1) * d.lk * d.d];
        let vb = &v[b * d.lk * d.dv..(b + 1) * d.lk * d.dv];
        let pb = &probs[b * d.lq * d.lk..(b + 1) * d.lq * d.lk];
        let gb = &g[b * d.lq * d.dv..(b + 1) * d.lq * d.dv];
        // dV = Pᵀ G
        T::gemm(
            d.lk,
            d.lq,
            d.dv,
            T::one(),
            pb,
            Strides::transposed(d.lk),
            gb,
            Strides::row_major(d.dv),
            T::zero(),
            &mut dv[b * d.lk * d.dv..(b + 1) * d.lk * d.dv],
            Strides::row_major(d.dv),
        );
        // dP = G Vᵀ
        T::gemm(
            d.lq,
            d.dv,
            d.lk,
            T::one(),
            gb,
            Strides::row_major(d.dv),
            vb,
            Strides::transposed(d.dv),
            T::zero(),
            &mut ds,
            Strides::row_major(d.lk),
        );
        // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
        for (drow, prow) in ds.chunks_exact_mut(d.lk).zip(pb.chunks_exact(d.lk)) {
            let dot = drow.iter().zip(prow).fold(T::zero(), |acc, (&a, &p)| acc + a * p);
            for (x, &p) in drow.iter_mut().zip(prow) {
                *x = p * (*x - dot) * scale;
            }
        }
        T::gemm(
            d.lq,
            d.lk,
            d.d,
            T::one(),
            &ds,
            Strides::row_major(d.lk),
            kb,
            Strides::row_major(d.d),
            T::zero(),
            &mut dq[b * d.lq * d.d..(b + 1) * d.lq * d.d],
            Strides::row_major(d.d),
        );
        T::gemm(
            d.lk,
            d.lq,
            d.d,
            T::one(),
            &ds,
            Strides::transposed(d.lk),
            qb,
            Strides::row_major(d.d),
            T::zero(),
            &mut dk[b * d.lk * d.d..(b + 1) * d.lk * d.d],
            Strides::row_major(d.d),
        );
    }
    (dq, dk, dv)
}
