//! Slice-level matrix kernels shared by the forward and backward passes.
//! All accumulate into `c`.

/// Products at least this large (in multiply-adds) go to the blocked kernel.
const BLOCKED_MIN_WORK: usize = 2048;

/// `c += op(a) * op(b)` with explicit strides for the blocked kernel.
#[allow(clippy::too_many_arguments)]
fn blocked(a: &[f64], (rsa, csa): (isize, isize), b: &[f64], (rsb, csb): (isize, isize), c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides address only the first `m*k`, `k*n` and `m*n`
    // elements of `a`, `b` and `c`, whose lengths are checked above by the
    // callers' slicing; `c` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return blocked(a, (k as isize, 1), b, (n as isize, 1), c, m, k, n);
    }
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aip * bj;
            }
        }
    }
}

/// Dot product over four independent partial sums.
fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `c[m x n] += a[m x k] * b[n x k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return blocked(a, (k as isize, 1), b, (1, k as isize), c, m, k, n);
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m x n] += a[k x m]^T * b[k x n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n >= BLOCKED_MIN_WORK {
        return blocked(a, (1, m as isize), b, (n as isize, 1), c, m, k, n);
    }
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += api * bj;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> alloc::vec::Vec<f64> {
        let mut c = alloc::vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> alloc::vec::Vec<f64> {
        let mut t = alloc::vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for (m, k, n) in [(3, 4, 5), (1, 1, 1), (20, 17, 13), (64, 32, 8), (12, 8, 12), (2, 7, 3)] {
            let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
            let base: alloc::vec::Vec<f64> = (0..m * n).map(|i| i as f64 * 0.5).collect();
            let want: alloc::vec::Vec<f64> = naive(&a, &b, m, k, n).iter().zip(&base).map(|(x, y)| x + y).collect();
            let close = |c: &[f64]| c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12);

            let mut c = base.clone();
            gemm_nn(&a, &b, &mut c, m, k, n);
            assert!(close(&c), "nn {m}x{k}x{n}");

            let mut c = base.clone();
            gemm_nt(&a, &transpose(&b, k, n), &mut c, m, k, n);
            assert!(close(&c), "nt {m}x{k}x{n}");

            let mut c = base.clone();
            gemm_tn(&transpose(&a, m, k), &b, &mut c, m, k, n);
            assert!(close(&c), "tn {m}x{k}x{n}");
        }
    }
}
