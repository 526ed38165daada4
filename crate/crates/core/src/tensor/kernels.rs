//! Matrix kernels with serial and row-parallel variants.
//!
//! Every output element is one fixed-order dot product owned by exactly
//! one task, so the parallel variants are bitwise identical to the serial
//! ones regardless of thread count. `matmul_*` dispatch to the parallel
//! path when the `parallel` feature is on and the problem is large enough
//! to amortize fork overhead.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the rayon fork costs more than it saves.
const PAR_THRESHOLD: usize = 16_384;

#[inline]
fn dot(a: &[f64], b_col: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b_col) {
        acc += x * y;
    }
    acc
}

fn mm_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    let k = a_row.len();
    for (j, o) in out_row.iter_mut().enumerate() {
        *o = dot(a_row, (0..k).map(|p| b[p * n + j]));
    }
}

/// C = A (m x k) * B (k x n), serial.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        mm_row(&a[i * k..(i + 1) * k], b, n, &mut c[i * n..(i + 1) * n]);
    }
    c
}

/// C = A * B with rows distributed over the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| mm_row(a_row, b, n, out_row));
    c
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            return matmul_par(a, b, m, k, n);
        }
    }
    matmul_seq(a, b, m, k, n)
}

fn mm_nt_row(a_row: &[f64], b: &[f64], n: usize, k: usize, out_row: &mut [f64]) {
    debug_assert_eq!(a_row.len(), k);
    for j in 0..n {
        out_row[j] = dot(a_row, b[j * k..(j + 1) * k].iter().copied());
    }
}

/// C = A (m x k) * B^T where B is (n x k), serial.
pub fn matmul_nt_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        mm_nt_row(&a[i * k..(i + 1) * k], b, n, k, &mut c[i * n..(i + 1) * n]);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| mm_nt_row(a_row, b, n, k, out_row));
    c
}

/// C = A * B^T with dispatch.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && m > 1 {
            return matmul_nt_par(a, b, m, k, n);
        }
    }
    matmul_nt_seq(a, b, m, k, n)
}

fn mm_tn_row(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, i: usize, out_row: &mut [f64]) {
    // Row i of A^T B is the dot of A's column i with each column of B,
    // accumulated in sample order (p) so the sum order never depends on
    // how rows were distributed.
    for j in 0..n {
        let mut acc = 0.0;
        for p in 0..m {
            acc += a[p * k + i] * b[p * n + j];
        }
        out_row[j] = acc;
    }
}

/// C = A^T (k x m) * B (m x n) where A is stored (m x k), serial.
pub fn matmul_tn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut c = vec![0.0; k * n];
    for i in 0..k {
        mm_tn_row(a, b, m, k, n, i, &mut c[i * n..(i + 1) * n]);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| mm_tn_row(a, b, m, k, n, i, out_row));
    c
}

/// C = A^T * B with dispatch.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_THRESHOLD && k > 1 {
            return matmul_tn_par(a, b, m, k, n);
        }
    }
    matmul_tn_seq(a, b, m, k, n)
}

/// Column sums of a (m x n) matrix, accumulated in row order.
pub fn col_sums(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for i in 0..m {
        for j in 0..n {
            out[j] += a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn random_mat(rng: &mut SplitMix64, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.next_range(-1.0, 1.0)).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let mut rng = SplitMix64::new(11);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (17, 8, 9), (64, 32, 48)] {
            let a = random_mat(&mut rng, m * k);
            let b = random_mat(&mut rng, k * n);
            assert_eq!(matmul_seq(&a, &b, m, k, n), naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn transposed_variants_match_explicit_transpose() {
        let mut rng = SplitMix64::new(12);
        let (m, k, n) = (13, 7, 5);
        let a = random_mat(&mut rng, m * k);
        let b = random_mat(&mut rng, n * k);
        // A * B^T via materialized transpose.
        let mut bt = vec![0.0; k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        let want = naive(&a, &bt, m, k, n);
        let got = matmul_nt_seq(&a, &b, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let c = random_mat(&mut rng, m * n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want = naive(&at, &c, k, m, n);
        let got = matmul_tn_seq(&a, &c, m, k, n);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bitwise_equal_to_serial() {
        let mut rng = SplitMix64::new(13);
        for &(m, k, n) in &[(5, 3, 2), (33, 17, 21), (128, 64, 32)] {
            let a = random_mat(&mut rng, m * k);
            let b = random_mat(&mut rng, k * n);
            let seq = matmul_seq(&a, &b, m, k, n);
            let par = matmul_par(&a, &b, m, k, n);
            assert!(
                seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()),
                "seq/par drift at {m}x{k}x{n}"
            );

            let bt = random_mat(&mut rng, n * k);
            let seq = matmul_nt_seq(&a, &bt, m, k, n);
            let par = matmul_nt_par(&a, &bt, m, k, n);
            assert!(seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()));

            let c = random_mat(&mut rng, m * n);
            let seq = matmul_tn_seq(&a, &c, m, k, n);
            let par = matmul_tn_par(&a, &c, m, k, n);
            assert!(seq.iter().zip(&par).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
