//! Raw dense kernels shared by the forward and backward passes.
//!
//! Loop orders are fixed (and documented where a contract depends on them),
//! so every reduction happens in the same floating-point order on every run.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// C[m,n] += A[m,k] @ B[k,n]. The i-k-j order streams rows of B and C.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C[m,n] += A[m,k] @ B[n,k]^T — rows of A against rows of B (contiguous dots).
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    matmul_nt_acc(a, b, &mut c, m, k, n);
    c
}

/// C[k,n] += A[m,k]^T @ B[m,n].
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
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
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = T::ZERO;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Output length of a strided conv over a padded signal; `None` if too short.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + pad;
    if padded < kernel {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// 1-D convolution: x[cin,l], w[cout,cin,k], bias[cout] -> out[cout,lout].
#[allow(clippy::too_many_arguments)]
pub fn conv1d<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: &[T],
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad_l: usize,
    pad_r: usize,
) -> Vec<T> {
    let lout = conv_out_len(len, kernel, stride, pad_l + pad_r).unwrap_or(0);
    let mut out = vec![T::ZERO; cout * lout];
    for co in 0..cout {
        let orow = &mut out[co * lout..(co + 1) * lout];
        for (t, ov) in orow.iter_mut().enumerate() {
            let base = (t * stride) as isize - pad_l as isize;
            let mut acc = bias[co];
            for ci in 0..cin {
                let xrow = &x[ci * len..(ci + 1) * len];
                let wrow = &w[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                let k_lo = if base < 0 { (-base) as usize } else { 0 };
                let k_hi = core::cmp::min(kernel, (len as isize - base).max(0) as usize);
                for kk in k_lo..k_hi {
                    acc += wrow[kk] * xrow[(base + kk as isize) as usize];
                }
            }
            *ov = acc;
        }
    }
    out
}

/// Gradients of conv1d w.r.t. input, weights, and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Scalar>(
    g: &[T],
    x: &[T],
    w: &[T],
    cin: usize,
    len: usize,
    cout: usize,
    kernel: usize,
    stride: usize,
    pad_l: usize,
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    let lout = g.len() / cout;
    for co in 0..cout {
        let grow = &g[co * lout..(co + 1) * lout];
        for (t, &gv) in grow.iter().enumerate() {
            db[co] += gv;
            let base = (t * stride) as isize - pad_l as isize;
            for ci in 0..cin {
                let xrow = &x[ci * len..(ci + 1) * len];
                let wrow = &w[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                let dwrow = &mut dw[(co * cin + ci) * kernel..(co * cin + ci + 1) * kernel];
                let k_lo = if base < 0 { (-base) as usize } else { 0 };
                let k_hi = core::cmp::min(kernel, (len as isize - base).max(0) as usize);
                for kk in k_lo..k_hi {
                    let pos = (base + kk as isize) as usize;
                    dwrow[kk] += gv * xrow[pos];
                    dx[ci * len + pos] += gv * wrow[kk];
                }
            }
        }
    }
}

/// Softmax of one row in place, with max subtraction for stability.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    let inv = T::ONE / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn logsumexp_slice<T: Scalar>(row: &[T]) -> T {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.maximum(v);
    }
    let mut sum = T::ZERO;
    for &v in row.iter() {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

pub fn l2_norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}
