//! Register-blocked f32 matrix product.
//!
//! Each output element is a single running sum over `k` in ascending order,
//! one multiply and one add per step (no fused multiply-add). That makes every
//! tile, edge path and SIMD width produce the same bits as a plain triple loop.

use std::sync::OnceLock;

pub(crate) const MR: usize = 6;
pub(crate) const NR: usize = 16;

/// Borrowed row-major matrix with an explicit row stride.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub ld: usize,
}

/// `c[i, j] (+)= sum_k a[i, k] * b[k, j]` for `i < m`, `j < n`, `k < kc`.
///
/// With `accumulate` the running sum starts from the current contents of `c`,
/// which lets callers split `k` into consecutive blocks without changing the
/// summation order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    kc: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    match simd_level() {
        #[cfg(target_arch = "x86_64")]
        SimdLevel::Avx2 => unsafe { gemm_avx2(m, n, kc, a, b, c, ldc, accumulate) },
        _ => gemm_body(m, n, kc, a, b, c, ldc, accumulate),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SimdLevel {
    Scalar,
    #[cfg(target_arch = "x86_64")]
    Avx2,
}

fn simd_level() -> SimdLevel {
    static LEVEL: OnceLock<SimdLevel> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        if std::is_x86_feature_detected!("avx2") {
            return SimdLevel::Avx2;
        }
        SimdLevel::Scalar
    })
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2(
    m: usize,
    n: usize,
    kc: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) {
    gemm_body(m, n, kc, a, b, c, ldc, accumulate)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body(m: usize, n: usize, kc: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f32], ldc: usize, accumulate: bool) {
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        let mut j = 0;
        while j < n {
            let cols = NR.min(n - j);
            if rows == MR && cols == NR {
                tile_full(
                    kc,
                    &a.data[i * a.ld..],
                    a.ld,
                    &b.data[j..],
                    b.ld,
                    &mut c[i * ldc + j..],
                    ldc,
                    accumulate,
                );
            } else {
                tile_edge(
                    rows,
                    cols,
                    kc,
                    &a.data[i * a.ld..],
                    a.ld,
                    &b.data[j..],
                    b.ld,
                    &mut c[i * ldc + j..],
                    ldc,
                    accumulate,
                );
            }
            j += NR;
        }
        i += MR;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile_full(kc: usize, a: &[f32], lda: usize, b: &[f32], ldb: usize, c: &mut [f32], ldc: usize, accumulate: bool) {
    let mut acc = [[0f32; NR]; MR];
    if accumulate {
        for (r, row) in acc.iter_mut().enumerate() {
            row.copy_from_slice(&c[r * ldc..r * ldc + NR]);
        }
    }
    let a_rows: [&[f32]; MR] = std::array::from_fn(|r| &a[r * lda..r * lda + kc]);
    for k in 0..kc {
        let brow: &[f32; NR] = b[k * ldb..k * ldb + NR].try_into().unwrap();
        for r in 0..MR {
            let av = a_rows[r][k];
            let row = &mut acc[r];
            for j in 0..NR {
                row[j] += av * brow[j];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * ldc..r * ldc + NR].copy_from_slice(row);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile_edge(
    rows: usize,
    cols: usize,
    kc: usize,
    a: &[f32],
    lda: usize,
    b: &[f32],
    ldb: usize,
    c: &mut [f32],
    ldc: usize,
    accumulate: bool,
) {
    let mut acc = [[0f32; NR]; MR];
    if accumulate {
        for r in 0..rows {
            acc[r][..cols].copy_from_slice(&c[r * ldc..r * ldc + cols]);
        }
    }
    for k in 0..kc {
        let brow = &b[k * ldb..k * ldb + cols];
        for r in 0..rows {
            let av = a[r * lda + k];
            for (acc, &bv) in acc[r][..cols].iter_mut().zip(brow) {
                *acc += av * bv;
            }
        }
    }
    for r in 0..rows {
        c[r * ldc..r * ldc + cols].copy_from_slice(&acc[r][..cols]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive(m: usize, n: usize, k: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0f32;
                for t in 0..k {
                    s += a[i * k + t] * b[t * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matches_triple_loop_bitwise_including_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, n, k) in &[(1, 1, 1), (6, 16, 9), (7, 17, 33), (13, 40, 5), (2, 3, 100)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0f32; m * n];
            gemm(
                m,
                n,
                k,
                MatRef { data: &a, ld: k },
                MatRef { data: &b, ld: n },
                &mut c,
                n,
                false,
            );
            let want = naive(m, n, k, &a, &b);
            let same = c.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "m={m} n={n} k={k}");
        }
    }

    #[test]
    fn split_k_accumulation_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (m, n, k) = (9, 21, 50);
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut whole = vec![0f32; m * n];
        gemm(
            m,
            n,
            k,
            MatRef { data: &a, ld: k },
            MatRef { data: &b, ld: n },
            &mut whole,
            n,
            false,
        );
        let mut split = vec![0f32; m * n];
        gemm(
            m,
            n,
            20,
            MatRef { data: &a, ld: k },
            MatRef { data: &b, ld: n },
            &mut split,
            n,
            false,
        );
        gemm(
            m,
            n,
            30,
            MatRef { data: &a[20..], ld: k },
            MatRef {
                data: &b[20 * n..],
                ld: n,
            },
            &mut split,
            n,
            true,
        );
        assert_eq!(whole, split);
    }
}
