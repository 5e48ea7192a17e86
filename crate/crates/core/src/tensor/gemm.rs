//! Row-major matrix products backing every contraction in the crate.
//!
//! One portable kernel, plus an AVX2/FMA build of the same loop selected at
//! runtime. Both are deterministic for a given shape on a given machine; the
//! FMA build rounds differently from the portable one, so results are not
//! bit-identical across CPUs with and without FMA.

/// `c[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: both target features were detected on this CPU.
            unsafe { gemm_fma(m, k, n, a, b, c) };
            return;
        }
    }
    kernel(m, k, n, a, b, c, |x, y, acc| acc + x * y);
}

/// `a[m×k] · b[k×n]` into a fresh buffer.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a, b, &mut c);
    c
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    transpose_into(rows, cols, a, &mut out);
    out
}

/// Transpose `a` (`rows × cols`) into `out` (`cols × rows`), in 8×8 blocks.
pub fn transpose_into(rows: usize, cols: usize, a: &[f64], out: &mut [f64]) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    const B: usize = 8;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[c * rows + r] = a[r * cols + c];
                }
            }
        }
    }
}

// Up to 4×8 output tiles held in registers across one block of the
// reduction; ragged tiles use masked loads and stores. Each element is one
// fused multiply-add chain over `p` in ascending order whatever the tiling,
// since storing and reloading an f64 accumulator between blocks is exact.
#[cfg(target_arch = "x86_64")]
const KC: usize = 256;

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_fma(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for k0 in (0..k).step_by(KC) {
        let k1 = (k0 + KC).min(k);
        for j in (0..n).step_by(8) {
            let w = (n - j).min(8);
            let mut i = 0;
            while i < m {
                let r = (m - i).min(4);
                let t = Tile { k, n, k0, k1, i, j, w };
                match (r, w == 8) {
                    (4, true) => tile::<4, true>(t, a, b, c),
                    (4, false) => tile::<4, false>(t, a, b, c),
                    (3, true) => tile::<3, true>(t, a, b, c),
                    (3, false) => tile::<3, false>(t, a, b, c),
                    (2, true) => tile::<2, true>(t, a, b, c),
                    (2, false) => tile::<2, false>(t, a, b, c),
                    (_, true) => tile::<1, true>(t, a, b, c),
                    (_, false) => tile::<1, false>(t, a, b, c),
                }
                i += r;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[derive(Clone, Copy)]
struct Tile {
    k: usize,
    n: usize,
    k0: usize,
    k1: usize,
    i: usize,
    j: usize,
    w: usize,
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
#[inline]
unsafe fn tile<const R: usize, const FULL: bool>(t: Tile, a: &[f64], b: &[f64], c: &mut [f64]) {
    use std::arch::x86_64::*;
    let Tile { k, n, k0, k1, i, j, w } = t;
    let (ap, bp, cp) = (a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
    let lane = |l: usize| if l < w { -1i64 } else { 0 };
    let m0 = _mm256_setr_epi64x(lane(0), lane(1), lane(2), lane(3));
    let m1 = _mm256_setr_epi64x(lane(4), lane(5), lane(6), lane(7));
    // SAFETY: i + R <= m, p < k and lanes at or beyond column j + w are
    // masked off, so every access stays inside its slice.
    let load = |ptr: *const f64| {
        if FULL {
            (_mm256_loadu_pd(ptr), _mm256_loadu_pd(ptr.add(4)))
        } else {
            (_mm256_maskload_pd(ptr, m0), _mm256_maskload_pd(ptr.add(4), m1))
        }
    };
    let mut acc = [(_mm256_setzero_pd(), _mm256_setzero_pd()); R];
    for (r, v) in acc.iter_mut().enumerate() {
        *v = load(cp.add((i + r) * n + j));
    }
    for p in k0..k1 {
        let (b0, b1) = load(bp.add(p * n + j));
        for (r, v) in acc.iter_mut().enumerate() {
            let av = _mm256_set1_pd(*ap.add((i + r) * k + p));
            v.0 = _mm256_fmadd_pd(av, b0, v.0);
            v.1 = _mm256_fmadd_pd(av, b1, v.1);
        }
    }
    for (r, v) in acc.iter().enumerate() {
        let ptr = cp.add((i + r) * n + j);
        if FULL {
            _mm256_storeu_pd(ptr, v.0);
            _mm256_storeu_pd(ptr.add(4), v.1);
        } else {
            _mm256_maskstore_pd(ptr, m0, v.0);
            _mm256_maskstore_pd(ptr.add(4), m1, v.1);
        }
    }
}

// Four output rows share each load of a `b` row; the inner loop over `n`
// is what the compiler vectorizes.
#[inline(always)]
fn kernel<F>(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], madd: F)
where
    F: Fn(f64, f64, f64) -> f64,
{
    let mut i = 0;
    while i + 4 <= m {
        let block = &mut c[i * n..(i + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let (r0, r1, r2, r3) = (
            &a[i * k..(i + 1) * k],
            &a[(i + 1) * k..(i + 2) * k],
            &a[(i + 2) * k..(i + 3) * k],
            &a[(i + 3) * k..(i + 4) * k],
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (r0[p], r1[p], r2[p], r3[p]);
            let brow = &b[p * n..(p + 1) * n];
            for ((((bv, x0), x1), x2), x3) in
                brow.iter().zip(c0.iter_mut()).zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut())
            {
                *x0 = madd(a0, *bv, *x0);
                *x1 = madd(a1, *bv, *x1);
                *x2 = madd(a2, *bv, *x2);
                *x3 = madd(a3, *bv, *x3);
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (x, bv) in crow.iter_mut().zip(brow) {
                *x = madd(av, *bv, *x);
            }
        }
        i += 1;
    }
}
