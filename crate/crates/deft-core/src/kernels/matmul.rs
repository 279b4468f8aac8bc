//! Dense matrix multiply kernels. All variants accumulate into `c` so the
//! backward pass can reuse them for gradient accumulation; callers zero the
//! output first when they want a plain product.
//!
//! Reductions use fixed-order lane accumulators, so results are bitwise
//! identical for any thread count: each output element is always produced by
//! one thread with one summation order.

use std::sync::OnceLock;

use crate::element::Element;

/// Parallelism cap from the `DEFT_THREADS` env var. Defaults to 1, which
/// keeps every kernel on the calling thread.
pub fn thread_count() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("DEFT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .expect("thread pool construction")
    })
}

/// Work threshold (in multiply-adds) below which threading is never worth it.
const PAR_MIN_WORK: usize = 1 << 21;

/// Column-block width for `nn`/`tn`; keeps the active output row slice in L1
/// while a `k`-tall block of `b` stays in L2 across the row sweep.
const COL_BLOCK: usize = 512;

#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::zero(); 8];
    let mut i = 0;
    while i + 8 <= n {
        let av: &[T; 8] = a[i..i + 8].try_into().unwrap();
        let bv: &[T; 8] = b[i..i + 8].try_into().unwrap();
        for l in 0..8 {
            acc[l] += av[l] * bv[l];
        }
        i += 8;
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    while i < n {
        s += a[i] * b[i];
        i += 1;
    }
    s
}

#[inline]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * *xv;
    }
}

fn nn_rows<T: Element>(a: &[T], b: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 < n {
        let jw = COL_BLOCK.min(n - j0);
        for i in 0..rows {
            let (arow, crow) = (&a[i * k..(i + 1) * k], &mut c[i * n + j0..i * n + j0 + jw]);
            for (kk, &aik) in arow.iter().enumerate() {
                axpy(aik, &b[kk * n + j0..kk * n + j0 + jw], crow);
            }
        }
        j0 += jw;
    }
}

/// c[m,n] += a[m,k] · b[k,n]
pub fn matmul_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let threads = thread_count();
    if threads > 1 && m * k * n >= PAR_MIN_WORK && m >= 2 {
        let band = m.div_ceil(threads);
        pool().install(|| {
            use rayon::prelude::*;
            c.par_chunks_mut(band * n).enumerate().for_each(|(t, cband)| {
                let rows = cband.len() / n;
                nn_rows(&a[t * band * k..t * band * k + rows * k], b, cband, rows, k, n);
            });
        });
    } else {
        nn_rows(a, b, c, m, k, n);
    }
}

fn nt_rows<T: Element>(a: &[T], b: &[T], c: &mut [T], rows: usize, k: usize, n: usize) {
    for i in 0..rows {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[m,n] += a[m,k] · b[n,k]ᵀ
pub fn matmul_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let threads = thread_count();
    if threads > 1 && m * k * n >= PAR_MIN_WORK && m >= 2 {
        let band = m.div_ceil(threads);
        pool().install(|| {
            use rayon::prelude::*;
            c.par_chunks_mut(band * n).enumerate().for_each(|(t, cband)| {
                let rows = cband.len() / n;
                nt_rows(&a[t * band * k..t * band * k + rows * k], b, cband, rows, k, n);
            });
        });
    } else {
        nt_rows(a, b, c, m, k, n);
    }
}

/// c[m,n] += a[k,m]ᵀ · b[k,n]
pub fn matmul_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut j0 = 0;
    while j0 < n {
        let jw = COL_BLOCK.min(n - j0);
        for kk in 0..k {
            let brow = &b[kk * n + j0..kk * n + j0 + jw];
            for i in 0..m {
                let aki = a[kk * m + i];
                axpy(aki, brow, &mut c[i * n + j0..i * n + j0 + jw]);
            }
        }
        j0 += jw;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 31 % 17) as f64 - 8.0) * scale).collect()
    }

    #[test]
    fn nn_matches_naive_triple_loop() {
        let (m, k, n) = (7, 13, 19);
        let a = ramp(m * k, 0.3);
        let b = ramp(k * n, 0.7);
        let mut c = vec![0.0; m * n];
        matmul_nn(&a, &b, &mut c, m, k, n);
        let want = naive_nn(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_matches_nn_on_transposed_operand() {
        let (m, k, n) = (5, 11, 9);
        let a = ramp(m * k, 0.2);
        let bt = ramp(n * k, 0.4); // row-major [n,k]
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for kk in 0..k {
                b[kk * n + j] = bt[j * k + kk];
            }
        }
        let mut c_nt = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c_nt, m, k, n);
        let want = naive_nn(&a, &b, m, k, n);
        for (x, y) in c_nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_matches_nn_on_transposed_operand() {
        let (m, k, n) = (6, 10, 8);
        let at = ramp(k * m, 0.5); // row-major [k,m]
        let mut a = vec![0.0; m * k];
        for kk in 0..k {
            for i in 0..m {
                a[i * k + kk] = at[kk * m + i];
            }
        }
        let b = ramp(k * n, 0.6);
        let mut c_tn = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c_tn, m, k, n);
        let want = naive_nn(&a, &b, m, k, n);
        for (x, y) in c_tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_adds_to_existing_output() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        matmul_nn(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }
}
