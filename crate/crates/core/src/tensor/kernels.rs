//! Dense matrix kernels.
//!
//! Every output element is reduced in a fixed order that does not depend on
//! the matrix sizes, the row blocking, or the number of worker threads: all
//! three products accumulate strictly in ascending index order starting from
//! `0.0`. Parallel execution splits work by output rows only, so results are
//! bitwise identical with one or many threads.

use rayon::prelude::*;

/// Work (multiply-adds) above which rows are split across the rayon pool.
const PAR_THRESHOLD: usize = 1 << 18;

fn parallel_ok(work: usize) -> bool {
    work >= PAR_THRESHOLD && rayon::current_num_threads() > 1
}

/// `c[m, n] = a[m, k] · b[k, n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm(a, k, 1, b, m, k, n)
}

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;

/// `c[rows, n] = A · b` where `A[i, p] = a[i * rs + p * cs]` and `b` is
/// `[red, n]` row-major. Each output element is `0.0` plus the products in
/// ascending `p`, one multiply and one add at a time, in every code path.
fn gemm(a: &[f64], rs: usize, cs: usize, b: &[f64], rows: usize, red: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; rows * n];
    if rows == 0 || n == 0 {
        return c;
    }
    let rows_per_task = MR * 8;
    if parallel_ok(rows * red * n) {
        c.par_chunks_mut(rows_per_task * n).enumerate().for_each(|(t, chunk)| {
            gemm_block(a, rs, cs, b, chunk, t * rows_per_task, red, n);
        });
    } else {
        gemm_block(a, rs, cs, b, &mut c, 0, red, n);
    }
    c
}

#[allow(clippy::too_many_arguments)]
fn gemm_block(a: &[f64], rs: usize, cs: usize, b: &[f64], c: &mut [f64], r0: usize, red: usize, n: usize) {
    let rows = c.len() / n;
    let full = rows / MR;
    // A in MR-row panels: panel q holds A[r0 + q*MR + r, p] at q*red*MR + p*MR + r.
    let mut packed = vec![0.0; full * red * MR];
    for q in 0..full {
        for p in 0..red {
            for r in 0..MR {
                packed[(q * red + p) * MR + r] = a[(r0 + q * MR + r) * rs + p * cs];
            }
        }
    }
    // Reduction blocks of KC keep the b panel cache resident; partial sums
    // round-trip through `c` exactly, so the order per element is unchanged.
    let mut p0 = 0;
    while p0 < red {
        let p1 = (p0 + KC).min(red);
        let mut j = 0;
        while j + NR <= n {
            for q in 0..full {
                let panel = &packed[(q * red + p0) * MR..(q * red + p1) * MR];
                let mut acc = [[0.0f64; NR]; MR];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let i = q * MR + r;
                    accr.copy_from_slice(&c[i * n + j..i * n + j + NR]);
                }
                for (dp, av) in panel.chunks_exact(MR).enumerate() {
                    let p = p0 + dp;
                    let bv: &[f64; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile");
                    for (accr, &x) in acc.iter_mut().zip(av) {
                        for l in 0..NR {
                            accr[l] += x * bv[l];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let i = q * MR + r;
                    c[i * n + j..i * n + j + NR].copy_from_slice(accr);
                }
            }
            j += NR;
        }
        p0 = p1;
    }
    let mut j = 0;
    while j + NR <= n {
        for i in full * MR..rows {
            let mut acc = [0.0f64; NR];
            for p in 0..red {
                let av = a[(r0 + i) * rs + p * cs];
                for l in 0..NR {
                    acc[l] += av * b[p * n + j + l];
                }
            }
            c[i * n + j..i * n + j + NR].copy_from_slice(&acc);
        }
        j += NR;
    }
    if j < n {
        for i in 0..rows {
            for jj in j..n {
                let mut acc = 0.0;
                for p in 0..red {
                    acc += a[(r0 + i) * rs + p * cs] * b[p * n + jj];
                }
                c[i * n + jj] = acc;
            }
        }
    }
}

/// `c[m, n] = a[m, k] · b[n, k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm(a, k, 1, &bt, m, k, n)
}

/// `c[k, n] = a[m, k]ᵀ · b[m, n]`
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    gemm(a, 1, k, b, k, m, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn seq(n: usize, salt: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37 + salt).sin() * 3.0).collect()
    }

    #[test]
    fn nn_is_bitwise_equal_to_naive_order() {
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 7), (9, 17, 300), (4, 8, 2), (70, 520, 33)] {
            let a = seq(m * k, 0.1);
            let b = seq(k * n, 0.7);
            assert_eq!(matmul_nn(&a, &b, m, k, n), naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn nt_and_tn_match_naive_order() {
        for &(m, k, n) in &[(6, 19, 5), (13, 300, 40), (64, 600, 17)] {
            let a = seq(m * k, 0.3);
            let b = seq(k * n, 1.3);
            let want = naive(&a, &b, m, k, n);
            assert_eq!(matmul_nt(&a, &transpose(&b, k, n), m, k, n), want);
            assert_eq!(matmul_tn(&transpose(&a, m, k), &b, k, m, n), want);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_row_count() {
        let (k, n) = (16, 33);
        let a = seq(7 * k, 0.5);
        let b = seq(k * n, 0.9);
        let full = matmul_nn(&a, &b, 7, k, n);
        let prefix = matmul_nn(&a[..3 * k], &b, 3, k, n);
        assert_eq!(&full[..3 * n], &prefix[..]);
    }
}
