//! Slice-level numeric kernels shared by the tape operations.
//!
//! Every kernel accumulates into its output in a fixed loop order, so a given
//! call sequence always produces the same bits.

/// `c[m×n] += a[m×k] · b[k×n]`
///
/// Register-blocked in 4×4 tiles. Each tile is loaded from `c` and summed
/// over `p` in order, so results equal the naive triple loop bit for bit.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: AVX support was just checked.
        unsafe { gemm_avx(m, k, n, a, b, c) };
        return;
    }
    gemm_portable(m, k, n, a, b, c);
}

fn gemm_portable(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut i = 0;
    while i + 4 <= m {
        let mut j = 0;
        while j + 4 <= n {
            tile4x4(i, j, k, n, a, b, c);
            j += 4;
        }
        if j < n {
            for r in i..i + 4 {
                row_tail(r, j, k, n, a, b, c);
            }
        }
        i += 4;
    }
    while i < m {
        row_tail(i, 0, k, n, a, b, c);
        i += 1;
    }
}

/// 4×8 tiles in AVX registers. Multiplies and adds are separate
/// instructions, so rounding matches the scalar loop exactly.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_avx(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    use std::arch::x86_64::*;
    let mut i = 0;
    while i + 4 <= m {
        let mut j = 0;
        while j + 8 <= n {
            let cp = c.as_mut_ptr();
            let mut acc = [[_mm256_setzero_pd(); 2]; 4];
            for (r, row) in acc.iter_mut().enumerate() {
                let o = (i + r) * n + j;
                row[0] = _mm256_loadu_pd(cp.add(o));
                row[1] = _mm256_loadu_pd(cp.add(o + 4));
            }
            let ap = a.as_ptr();
            let bp = b.as_ptr();
            for p in 0..k {
                let b0 = _mm256_loadu_pd(bp.add(p * n + j));
                let b1 = _mm256_loadu_pd(bp.add(p * n + j + 4));
                for (r, row) in acc.iter_mut().enumerate() {
                    let av = _mm256_broadcast_sd(&*ap.add((i + r) * k + p));
                    row[0] = _mm256_add_pd(row[0], _mm256_mul_pd(av, b0));
                    row[1] = _mm256_add_pd(row[1], _mm256_mul_pd(av, b1));
                }
            }
            for (r, row) in acc.iter().enumerate() {
                let o = (i + r) * n + j;
                _mm256_storeu_pd(cp.add(o), row[0]);
                _mm256_storeu_pd(cp.add(o + 4), row[1]);
            }
            j += 8;
        }
        while j + 4 <= n {
            tile4x4(i, j, k, n, a, b, c);
            j += 4;
        }
        if j < n {
            for r in i..i + 4 {
                row_tail(r, j, k, n, a, b, c);
            }
        }
        i += 4;
    }
    while i < m {
        row_tail(i, 0, k, n, a, b, c);
        i += 1;
    }
}

#[inline(always)]
fn tile4x4(i: usize, j: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut acc = [[0.0f64; 4]; 4];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + 4]);
    }
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    for p in 0..k {
        let bv: [f64; 4] = b[p * n + j..p * n + j + 4].try_into().unwrap();
        let av = [a0[p], a1[p], a2[p], a3[p]];
        for r in 0..4 {
            for q in 0..4 {
                acc[r][q] += av[r] * bv[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[(i + r) * n + j..(i + r) * n + j + 4].copy_from_slice(row);
    }
}

/// Columns `j0..n` of row `i`, in naive order.
fn row_tail(i: usize, j0: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let crow = &mut c[i * n + j0..(i + 1) * n];
    let arow = &a[i * k..(i + 1) * k];
    for p in 0..k {
        let brow = &b[p * n + j0..(p + 1) * n];
        let av = arow[p];
        for (cv, bv) in crow.iter_mut().zip(brow) {
            *cv += av * bv;
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub fn transpose(r: usize, c: usize, src: &[f64]) -> Vec<f64> {
    debug_assert_eq!(src.len(), r * c);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let bt = transpose(n, k, b);
    gemm_acc(m, k, n, a, &bt, c);
}

/// `c[k×n] += a[m×k]ᵀ · d[m×n]`
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], d: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(d.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let at = transpose(m, k, a);
    gemm_acc(k, m, n, &at, d, c);
}

/// Sums the rows of an `m×n` matrix into `out[n]`.
pub fn sum_rows_acc(m: usize, n: usize, src: &[f64], out: &mut [f64]) {
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
            *o += v;
        }
    }
}

/// Exact Gaussian-CDF GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    #[test]
    fn blocked_gemm_matches_triple_loop_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (5, 3, 7), (9, 4, 2), (8, 8, 8), (13, 6, 11), (12, 9, 21)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            let want = naive(m, k, n, &a, &b);
            assert!(c.iter().zip(&want).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 - 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 0.5 * i as f64).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nt_acc(m, k, n, &a, &transpose(k, n, &b), &mut c);
        assert_eq!(c, want);

        // (aᵀ)ᵀ · b through the tn kernel
        let at = transpose(m, k, &a);
        let mut c2 = vec![0.0; m * n];
        gemm_tn_acc(k, m, n, &at, &b, &mut c2);
        assert_eq!(c2, want);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        let want = -0.5 * (1.0 + libm::erf(-1.0 / 2f64.sqrt()));
        assert!((gelu(-1.0) - want).abs() < 1e-16);
        assert!((gelu(-1.0) - (-0.158_655_253_931_457_05)).abs() < 1e-15);
    }
}
