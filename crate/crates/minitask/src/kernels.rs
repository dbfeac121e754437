//! Dense compute kernels.
//!
//! Each kernel has a sequential implementation and, with the `parallel`
//! feature, a rayon row-parallel one. The parallel variants split work so
//! that every output element is produced by exactly one task with the same
//! per-element evaluation order as the sequential code, so results are
//! bitwise identical for a fixed input regardless of thread count.
//!
//! The `matmul`/`matmul_nt`/`pairwise_sq_dists` entry points dispatch to the
//! parallel variant when the feature is enabled and the problem is large
//! enough to amortize fork/join overhead.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many output elements the dispatchers stay sequential.
const PAR_THRESHOLD: usize = 16 * 1024;

/// c[m x n] = a[m x k] * b[k x n]. Caller guarantees the shapes.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * n >= PAR_THRESHOLD && m > 1 {
            return matmul_par(a, b, m, k, n);
        }
    }
    matmul_seq(a, b, m, k, n)
}

pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        matmul_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(crow, arow)| matmul_row(arow, b, crow, k, n));
    c
}

// ikj order: the inner loop runs along contiguous rows of b and c.
#[inline]
fn matmul_row(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize) {
    for (p, &av) in arow.iter().enumerate().take(k) {
        let brow = &b[p * n..(p + 1) * n];
        for (cv, &bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// c[m x n] = a[m x k] * b[n x k]^T.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * n >= PAR_THRESHOLD && m > 1 {
            return matmul_nt_par(a, b, m, k, n);
        }
    }
    matmul_nt_seq(a, b, m, k, n)
}

pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        matmul_nt_row(&a[i * k..(i + 1) * k], b, &mut c[i * n..(i + 1) * n], k, n);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(crow, arow)| matmul_nt_row(arow, b, crow, k, n));
    c
}

#[inline]
fn matmul_nt_row(arow: &[f64], b: &[f64], crow: &mut [f64], k: usize, n: usize) {
    for (j, cv) in crow.iter_mut().enumerate().take(n) {
        let brow = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (av, bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
        *cv = acc;
    }
}

/// c[k x n] = a[m x k]^T * b[m x n]. Used by matmul backward.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// Squared Euclidean distances between all row pairs of x[n x d],
/// written as a dense n x n matrix with a zero diagonal.
pub fn pairwise_sq_dists(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if n * n >= PAR_THRESHOLD {
            return pairwise_sq_dists_par(x, n, d);
        }
    }
    pairwise_sq_dists_seq(x, n, d)
}

pub fn pairwise_sq_dists_seq(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        pairwise_row(x, &mut out[i * n..(i + 1) * n], i, n, d);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn pairwise_sq_dists_par(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| pairwise_row(x, row, i, n, d));
    out
}

#[inline]
fn pairwise_row(x: &[f64], row: &mut [f64], i: usize, n: usize, d: usize) {
    let xi = &x[i * d..(i + 1) * d];
    for (j, out) in row.iter_mut().enumerate().take(n) {
        if i == j {
            *out = 0.0;
            continue;
        }
        let xj = &x[j * d..(j + 1) * d];
        let mut acc = 0.0;
        for (a, b) in xi.iter().zip(xj) {
            let diff = a - b;
            acc += diff * diff;
        }
        *out = acc;
    }
}
