//! Small row-major matrix products used by the convolution kernels.
//!
//! Every output element accumulates its terms in ascending index order, so
//! results do not depend on blocking.

use crate::nn::dot;
use crate::tensor::Scalar;

const COLUMN_BLOCK: usize = 256;

/// `c[m×n] += a[m×k] · b[k×n]`.
pub(crate) fn gemm_nn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut j0 = 0;
    while j0 < n {
        let nc = COLUMN_BLOCK.min(n - j0);
        let mut i = 0;
        while i + 4 <= m {
            let block = &mut c[i * n..(i + 4) * n];
            let (r0, rest) = block.split_at_mut(n);
            let (r1, rest) = rest.split_at_mut(n);
            let (r2, r3) = rest.split_at_mut(n);
            let (r0, r1, r2, r3) = (
                &mut r0[j0..j0 + nc],
                &mut r1[j0..j0 + nc],
                &mut r2[j0..j0 + nc],
                &mut r3[j0..j0 + nc],
            );
            for p in 0..k {
                let bp = &b[p * n + j0..p * n + j0 + nc];
                let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
                for j in 0..nc {
                    let bv = bp[j];
                    r0[j] = r0[j] + a0 * bv;
                    r1[j] = r1[j] + a1 * bv;
                    r2[j] = r2[j] + a2 * bv;
                    r3[j] = r3[j] + a3 * bv;
                }
            }
            i += 4;
        }
        while i < m {
            let row = &mut c[i * n + j0..i * n + j0 + nc];
            for p in 0..k {
                let bp = &b[p * n + j0..p * n + j0 + nc];
                let av = a[i * k + p];
                for (cv, &bv) in row.iter_mut().zip(bp) {
                    *cv = *cv + av * bv;
                }
            }
            i += 1;
        }
        j0 += nc;
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`.
pub(crate) fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let slot = &mut c[i * k + p];
            *slot = *slot + dot(ai, &b[p * n..(p + 1) * n]);
        }
    }
}

/// Transposes `a[m×k]` into a new `k×m` buffer.
pub(crate) fn transpose<T: Scalar>(m: usize, k: usize, a: &[T]) -> Vec<T> {
    let mut t = vec![T::zero(); m * k];
    for i in 0..m {
        for p in 0..k {
            t[p * m + i] = a[i * k + p];
        }
    }
    t
}
