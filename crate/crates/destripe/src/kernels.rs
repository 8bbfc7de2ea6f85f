//! Hand-vectorized AVX-512 kernels for the dense-layer shapes that dominate
//! training time: 64-unit hidden layers and the scalar output head, applied
//! over hundreds of thousands of rows.
//!
//! Throughput on these shapes is limited by memory bandwidth for the big
//! row-major operands, so the kernels keep full output rows in registers,
//! fuse the bias add and ReLU into the forward store, fuse the ReLU mask,
//! bias gradient, and input gradient into one backward sweep, and write
//! bulk outputs with non-temporal stores. Non-temporal stores require
//! 64-byte alignment, which [`crate::avec::AVec`] guarantees for every tape
//! buffer.
//!
//! All reductions accumulate in a fixed order (rows ascending, lanes combined
//! by a fixed tree), so results are bit-identical from run to run on the same
//! binary and machine. Callers fall back to the generic `matrixmultiply`
//! path when AVX-512 is unavailable or shapes do not match.

#![allow(clippy::too_many_arguments)]

/// Output width every wide kernel is specialized for.
pub const WIDE: usize = 64;

/// Row stride of the transposed-weight scratch for a given input width.
pub fn wt_stride(in_dim: usize) -> usize {
    if in_dim == WIDE {
        WIDE
    } else {
        8
    }
}

/// Whether the specialized kernels can run on this CPU.
#[cfg(target_arch = "x86_64")]
pub fn available() -> bool {
    use std::sync::OnceLock;
    static AVAIL: OnceLock<bool> = OnceLock::new();
    *AVAIL.get_or_init(|| is_x86_feature_detected!("avx512f"))
}

#[cfg(not(target_arch = "x86_64"))]
pub fn available() -> bool {
    false
}

/// Fills `wt` (shape `WIDE x wt_stride(in_dim)`) with the transpose of `w`
/// (shape `in_dim x WIDE`), zero-padding rows past `in_dim`.
pub fn transpose_wt(w: &[f64], in_dim: usize, wt: &mut [f64]) {
    let stride = wt_stride(in_dim);
    assert_eq!(w.len(), in_dim * WIDE);
    assert_eq!(wt.len(), WIDE * stride);
    if stride > in_dim {
        wt.fill(0.0);
    }
    for (i, row) in w.chunks_exact(WIDE).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            wt[c * stride + i] = v;
        }
    }
}

fn assert_aligned(p: *const f64, what: &str) {
    assert_eq!(p as usize % 64, 0, "{what} must be 64-byte aligned");
}

/// `out = x w + b` with optional fused ReLU, `out_dim = WIDE`.
///
/// `out` is written with non-temporal stores and must be 64-byte aligned,
/// as must `w` and `b`. `x` may have any alignment.
pub fn fwd_wide(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], rows: usize, in_dim: usize, relu: bool) {
    assert!(available(), "avx512 kernel called without cpu support");
    assert_eq!(x.len(), rows * in_dim);
    assert_eq!(w.len(), in_dim * WIDE);
    assert_eq!(b.len(), WIDE);
    assert_eq!(out.len(), rows * WIDE);
    assert_aligned(w.as_ptr(), "w");
    assert_aligned(b.as_ptr(), "b");
    assert_aligned(out.as_ptr(), "out");
    #[cfg(target_arch = "x86_64")]
    unsafe {
        x86::fwd_wide(x.as_ptr(), w.as_ptr(), b.as_ptr(), out.as_mut_ptr(), rows, in_dim, relu);
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

/// `out[r] = dot(x[r], w) + b`, the `out_dim = 1` head.
pub fn fwd_col(x: &[f64], w: &[f64], b: f64, out: &mut [f64], rows: usize, in_dim: usize) {
    assert!(available(), "avx512 kernel called without cpu support");
    assert_eq!(x.len(), rows * in_dim);
    assert_eq!(w.len(), in_dim);
    assert_eq!(out.len(), rows);
    #[cfg(target_arch = "x86_64")]
    unsafe {
        x86::fwd_col(x.as_ptr(), w.as_ptr(), b, out.as_mut_ptr(), rows, in_dim);
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

/// Backward sweep for a `WIDE`-output layer: masks the upstream gradient
/// through the ReLU (when `relu`), accumulates the bias gradient into `db`,
/// streams the masked gradient to `gm`, and, when `dx` is given, computes the
/// input gradient rows from the transposed weights `wt`.
///
/// `dx` support requires `in_dim == WIDE` or `in_dim <= 8`; `accumulate`
/// selects `dx +=` over plain assignment. For other widths pass `None` and
/// compute the input gradient from `gm` outside. `g`, `out`, `gm`, `db`, and
/// `wt` must be 64-byte aligned; a full-width `dx` must be as well.
pub fn bwd_wide(
    g: &[f64],
    out: &[f64],
    wt: &[f64],
    gm: &mut [f64],
    dx: Option<&mut [f64]>,
    accumulate: bool,
    db: &mut [f64],
    rows: usize,
    in_dim: usize,
    relu: bool,
) {
    assert!(available(), "avx512 kernel called without cpu support");
    assert_eq!(g.len(), rows * WIDE);
    assert_eq!(out.len(), rows * WIDE);
    assert_eq!(gm.len(), rows * WIDE);
    assert_eq!(db.len(), WIDE);
    assert_aligned(g.as_ptr(), "g");
    assert_aligned(out.as_ptr(), "out");
    assert_aligned(gm.as_ptr(), "gm");
    assert_aligned(db.as_ptr(), "db");
    let dx_ptr = match dx {
        Some(dx) => {
            assert!(in_dim == WIDE || in_dim <= 8, "dx unsupported for in_dim {in_dim}");
            assert_eq!(dx.len(), rows * in_dim);
            assert_eq!(wt.len(), WIDE * wt_stride(in_dim));
            assert_aligned(wt.as_ptr(), "wt");
            if in_dim == WIDE {
                assert_aligned(dx.as_ptr(), "dx");
            }
            dx.as_mut_ptr()
        }
        None => std::ptr::null_mut(),
    };
    #[cfg(target_arch = "x86_64")]
    unsafe {
        x86::bwd_wide(
            g.as_ptr(),
            out.as_ptr(),
            wt.as_ptr(),
            gm.as_mut_ptr(),
            dx_ptr,
            accumulate,
            db.as_mut_ptr(),
            rows,
            in_dim,
            relu,
        );
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

/// `dw += x^T gm` for a `WIDE`-output layer, blocked over rows so the masked
/// gradient block stays cache-resident across input features.
pub fn dw_wide(x: &[f64], gm: &[f64], dw: &mut [f64], rows: usize, in_dim: usize) {
    assert!(available(), "avx512 kernel called without cpu support");
    assert_eq!(x.len(), rows * in_dim);
    assert_eq!(gm.len(), rows * WIDE);
    assert_eq!(dw.len(), in_dim * WIDE);
    assert_aligned(gm.as_ptr(), "gm");
    assert_aligned(dw.as_ptr(), "dw");
    #[cfg(target_arch = "x86_64")]
    unsafe {
        x86::dw_wide(x.as_ptr(), gm.as_ptr(), dw.as_mut_ptr(), rows, in_dim);
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

/// Backward sweep for the scalar head (`out_dim = 1`, no ReLU,
/// `in_dim = WIDE`): accumulates `db` and `dw`, and when `dx` is given fills
/// the input gradient rows `g[r] * w`.
pub fn bwd_col(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    dx: Option<&mut [f64]>,
    accumulate: bool,
    dw: &mut [f64],
    db: &mut f64,
    rows: usize,
) {
    assert!(available(), "avx512 kernel called without cpu support");
    assert_eq!(g.len(), rows);
    assert_eq!(x.len(), rows * WIDE);
    assert_eq!(w.len(), WIDE);
    assert_eq!(dw.len(), WIDE);
    assert_aligned(x.as_ptr(), "x");
    assert_aligned(w.as_ptr(), "w");
    assert_aligned(dw.as_ptr(), "dw");
    let dx_ptr = match dx {
        Some(dx) => {
            assert_eq!(dx.len(), rows * WIDE);
            assert_aligned(dx.as_ptr(), "dx");
            dx.as_mut_ptr()
        }
        None => std::ptr::null_mut(),
    };
    #[cfg(target_arch = "x86_64")]
    unsafe {
        x86::bwd_col(g.as_ptr(), x.as_ptr(), w.as_ptr(), dx_ptr, accumulate, dw.as_mut_ptr(), db, rows);
    }
    #[cfg(not(target_arch = "x86_64"))]
    unreachable!();
}

#[cfg(target_arch = "x86_64")]
mod x86 {
    use super::WIDE;
    use std::arch::x86_64::*;

    #[repr(align(64))]
    struct RowBuf([f64; WIDE]);

    #[target_feature(enable = "avx512f")]
    pub unsafe fn fwd_wide(
        x: *const f64,
        w: *const f64,
        b: *const f64,
        out: *mut f64,
        rows: usize,
        in_dim: usize,
        relu: bool,
    ) {
        let zero = _mm512_setzero_pd();
        let b0 = _mm512_load_pd(b);
        let b1 = _mm512_load_pd(b.add(8));
        let b2 = _mm512_load_pd(b.add(16));
        let b3 = _mm512_load_pd(b.add(24));
        let b4 = _mm512_load_pd(b.add(32));
        let b5 = _mm512_load_pd(b.add(40));
        let b6 = _mm512_load_pd(b.add(48));
        let b7 = _mm512_load_pd(b.add(56));
        let mut r = 0;
        while r + 2 <= rows {
            let s0 = x.add(r * in_dim);
            let s1 = x.add((r + 1) * in_dim);
            let mut a00 = zero; let mut a01 = zero; let mut a02 = zero; let mut a03 = zero;
            let mut a04 = zero; let mut a05 = zero; let mut a06 = zero; let mut a07 = zero;
            let mut a10 = zero; let mut a11 = zero; let mut a12 = zero; let mut a13 = zero;
            let mut a14 = zero; let mut a15 = zero; let mut a16 = zero; let mut a17 = zero;
            for k in 0..in_dim {
                let wrow = w.add(k * WIDE);
                let x0 = _mm512_set1_pd(*s0.add(k));
                let x1 = _mm512_set1_pd(*s1.add(k));
                let v0 = _mm512_load_pd(wrow);
                a00 = _mm512_fmadd_pd(x0, v0, a00);
                a10 = _mm512_fmadd_pd(x1, v0, a10);
                let v1 = _mm512_load_pd(wrow.add(8));
                a01 = _mm512_fmadd_pd(x0, v1, a01);
                a11 = _mm512_fmadd_pd(x1, v1, a11);
                let v2 = _mm512_load_pd(wrow.add(16));
                a02 = _mm512_fmadd_pd(x0, v2, a02);
                a12 = _mm512_fmadd_pd(x1, v2, a12);
                let v3 = _mm512_load_pd(wrow.add(24));
                a03 = _mm512_fmadd_pd(x0, v3, a03);
                a13 = _mm512_fmadd_pd(x1, v3, a13);
                let v4 = _mm512_load_pd(wrow.add(32));
                a04 = _mm512_fmadd_pd(x0, v4, a04);
                a14 = _mm512_fmadd_pd(x1, v4, a14);
                let v5 = _mm512_load_pd(wrow.add(40));
                a05 = _mm512_fmadd_pd(x0, v5, a05);
                a15 = _mm512_fmadd_pd(x1, v5, a15);
                let v6 = _mm512_load_pd(wrow.add(48));
                a06 = _mm512_fmadd_pd(x0, v6, a06);
                a16 = _mm512_fmadd_pd(x1, v6, a16);
                let v7 = _mm512_load_pd(wrow.add(56));
                a07 = _mm512_fmadd_pd(x0, v7, a07);
                a17 = _mm512_fmadd_pd(x1, v7, a17);
            }
            a00 = _mm512_add_pd(a00, b0); a01 = _mm512_add_pd(a01, b1);
            a02 = _mm512_add_pd(a02, b2); a03 = _mm512_add_pd(a03, b3);
            a04 = _mm512_add_pd(a04, b4); a05 = _mm512_add_pd(a05, b5);
            a06 = _mm512_add_pd(a06, b6); a07 = _mm512_add_pd(a07, b7);
            a10 = _mm512_add_pd(a10, b0); a11 = _mm512_add_pd(a11, b1);
            a12 = _mm512_add_pd(a12, b2); a13 = _mm512_add_pd(a13, b3);
            a14 = _mm512_add_pd(a14, b4); a15 = _mm512_add_pd(a15, b5);
            a16 = _mm512_add_pd(a16, b6); a17 = _mm512_add_pd(a17, b7);
            if relu {
                a00 = _mm512_max_pd(a00, zero); a01 = _mm512_max_pd(a01, zero);
                a02 = _mm512_max_pd(a02, zero); a03 = _mm512_max_pd(a03, zero);
                a04 = _mm512_max_pd(a04, zero); a05 = _mm512_max_pd(a05, zero);
                a06 = _mm512_max_pd(a06, zero); a07 = _mm512_max_pd(a07, zero);
                a10 = _mm512_max_pd(a10, zero); a11 = _mm512_max_pd(a11, zero);
                a12 = _mm512_max_pd(a12, zero); a13 = _mm512_max_pd(a13, zero);
                a14 = _mm512_max_pd(a14, zero); a15 = _mm512_max_pd(a15, zero);
                a16 = _mm512_max_pd(a16, zero); a17 = _mm512_max_pd(a17, zero);
            }
            let o0 = out.add(r * WIDE);
            _mm512_stream_pd(o0, a00); _mm512_stream_pd(o0.add(8), a01);
            _mm512_stream_pd(o0.add(16), a02); _mm512_stream_pd(o0.add(24), a03);
            _mm512_stream_pd(o0.add(32), a04); _mm512_stream_pd(o0.add(40), a05);
            _mm512_stream_pd(o0.add(48), a06); _mm512_stream_pd(o0.add(56), a07);
            let o1 = out.add((r + 1) * WIDE);
            _mm512_stream_pd(o1, a10); _mm512_stream_pd(o1.add(8), a11);
            _mm512_stream_pd(o1.add(16), a12); _mm512_stream_pd(o1.add(24), a13);
            _mm512_stream_pd(o1.add(32), a14); _mm512_stream_pd(o1.add(40), a15);
            _mm512_stream_pd(o1.add(48), a16); _mm512_stream_pd(o1.add(56), a17);
            r += 2;
        }
        if r < rows {
            let s0 = x.add(r * in_dim);
            let mut a00 = zero; let mut a01 = zero; let mut a02 = zero; let mut a03 = zero;
            let mut a04 = zero; let mut a05 = zero; let mut a06 = zero; let mut a07 = zero;
            for k in 0..in_dim {
                let wrow = w.add(k * WIDE);
                let x0 = _mm512_set1_pd(*s0.add(k));
                a00 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow), a00);
                a01 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(8)), a01);
                a02 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(16)), a02);
                a03 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(24)), a03);
                a04 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(32)), a04);
                a05 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(40)), a05);
                a06 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(48)), a06);
                a07 = _mm512_fmadd_pd(x0, _mm512_load_pd(wrow.add(56)), a07);
            }
            a00 = _mm512_add_pd(a00, b0); a01 = _mm512_add_pd(a01, b1);
            a02 = _mm512_add_pd(a02, b2); a03 = _mm512_add_pd(a03, b3);
            a04 = _mm512_add_pd(a04, b4); a05 = _mm512_add_pd(a05, b5);
            a06 = _mm512_add_pd(a06, b6); a07 = _mm512_add_pd(a07, b7);
            if relu {
                a00 = _mm512_max_pd(a00, zero); a01 = _mm512_max_pd(a01, zero);
                a02 = _mm512_max_pd(a02, zero); a03 = _mm512_max_pd(a03, zero);
                a04 = _mm512_max_pd(a04, zero); a05 = _mm512_max_pd(a05, zero);
                a06 = _mm512_max_pd(a06, zero); a07 = _mm512_max_pd(a07, zero);
            }
            let o0 = out.add(r * WIDE);
            _mm512_stream_pd(o0, a00); _mm512_stream_pd(o0.add(8), a01);
            _mm512_stream_pd(o0.add(16), a02); _mm512_stream_pd(o0.add(24), a03);
            _mm512_stream_pd(o0.add(32), a04); _mm512_stream_pd(o0.add(40), a05);
            _mm512_stream_pd(o0.add(48), a06); _mm512_stream_pd(o0.add(56), a07);
        }
        _mm_sfence();
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn fwd_col(x: *const f64, w: *const f64, b: f64, out: *mut f64, rows: usize, in_dim: usize) {
        if in_dim == WIDE {
            let w0 = _mm512_loadu_pd(w);
            let w1 = _mm512_loadu_pd(w.add(8));
            let w2 = _mm512_loadu_pd(w.add(16));
            let w3 = _mm512_loadu_pd(w.add(24));
            let w4 = _mm512_loadu_pd(w.add(32));
            let w5 = _mm512_loadu_pd(w.add(40));
            let w6 = _mm512_loadu_pd(w.add(48));
            let w7 = _mm512_loadu_pd(w.add(56));
            for r in 0..rows {
                let xp = x.add(r * WIDE);
                let a0 = _mm512_mul_pd(_mm512_loadu_pd(xp), w0);
                let a1 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(8)), w1);
                let a2 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(16)), w2);
                let a3 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(24)), w3);
                let a4 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(32)), w4);
                let a5 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(40)), w5);
                let a6 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(48)), w6);
                let a7 = _mm512_mul_pd(_mm512_loadu_pd(xp.add(56)), w7);
                let s01 = _mm512_add_pd(a0, a1);
                let s23 = _mm512_add_pd(a2, a3);
                let s45 = _mm512_add_pd(a4, a5);
                let s67 = _mm512_add_pd(a6, a7);
                let s = _mm512_add_pd(_mm512_add_pd(s01, s23), _mm512_add_pd(s45, s67));
                *out.add(r) = _mm512_reduce_add_pd(s) + b;
            }
        } else {
            for r in 0..rows {
                let xp = x.add(r * in_dim);
                let mut acc = 0.0;
                for k in 0..in_dim {
                    acc += *xp.add(k) * *w.add(k);
                }
                *out.add(r) = acc + b;
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn bwd_wide(
        g: *const f64,
        out: *const f64,
        wt: *const f64,
        gm: *mut f64,
        dx: *mut f64,
        accumulate: bool,
        db: *mut f64,
        rows: usize,
        in_dim: usize,
        relu: bool,
    ) {
        let zero = _mm512_setzero_pd();
        let mut db0 = zero; let mut db1 = zero; let mut db2 = zero; let mut db3 = zero;
        let mut db4 = zero; let mut db5 = zero; let mut db6 = zero; let mut db7 = zero;
        let mut gbuf = RowBuf([0.0; WIDE]);
        let narrow_mask: __mmask8 = if in_dim < 8 { (1u8 << in_dim) - 1 } else { 0xff };
        for r in 0..rows {
            let gp = g.add(r * WIDE);
            let (g0, g1, g2, g3, g4, g5, g6, g7);
            if relu {
                let op = out.add(r * WIDE);
                g0 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op), zero, _CMP_GT_OQ), _mm512_load_pd(gp));
                g1 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(8)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(8)));
                g2 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(16)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(16)));
                g3 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(24)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(24)));
                g4 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(32)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(32)));
                g5 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(40)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(40)));
                g6 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(48)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(48)));
                g7 = _mm512_maskz_mov_pd(_mm512_cmp_pd_mask(_mm512_load_pd(op.add(56)), zero, _CMP_GT_OQ), _mm512_load_pd(gp.add(56)));
            } else {
                g0 = _mm512_load_pd(gp);
                g1 = _mm512_load_pd(gp.add(8));
                g2 = _mm512_load_pd(gp.add(16));
                g3 = _mm512_load_pd(gp.add(24));
                g4 = _mm512_load_pd(gp.add(32));
                g5 = _mm512_load_pd(gp.add(40));
                g6 = _mm512_load_pd(gp.add(48));
                g7 = _mm512_load_pd(gp.add(56));
            }
            db0 = _mm512_add_pd(db0, g0); db1 = _mm512_add_pd(db1, g1);
            db2 = _mm512_add_pd(db2, g2); db3 = _mm512_add_pd(db3, g3);
            db4 = _mm512_add_pd(db4, g4); db5 = _mm512_add_pd(db5, g5);
            db6 = _mm512_add_pd(db6, g6); db7 = _mm512_add_pd(db7, g7);
            let gmp = gm.add(r * WIDE);
            _mm512_stream_pd(gmp, g0); _mm512_stream_pd(gmp.add(8), g1);
            _mm512_stream_pd(gmp.add(16), g2); _mm512_stream_pd(gmp.add(24), g3);
            _mm512_stream_pd(gmp.add(32), g4); _mm512_stream_pd(gmp.add(40), g5);
            _mm512_stream_pd(gmp.add(48), g6); _mm512_stream_pd(gmp.add(56), g7);
            if dx.is_null() {
                continue;
            }
            _mm512_store_pd(gbuf.0.as_mut_ptr(), g0);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(8), g1);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(16), g2);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(24), g3);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(32), g4);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(40), g5);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(48), g6);
            _mm512_store_pd(gbuf.0.as_mut_ptr().add(56), g7);
            if in_dim == WIDE {
                let mut x0 = zero; let mut x1 = zero; let mut x2 = zero; let mut x3 = zero;
                let mut x4 = zero; let mut x5 = zero; let mut x6 = zero; let mut x7 = zero;
                for c in 0..WIDE {
                    let gv = _mm512_set1_pd(*gbuf.0.as_ptr().add(c));
                    let wrow = wt.add(c * WIDE);
                    x0 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow), x0);
                    x1 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(8)), x1);
                    x2 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(16)), x2);
                    x3 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(24)), x3);
                    x4 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(32)), x4);
                    x5 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(40)), x5);
                    x6 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(48)), x6);
                    x7 = _mm512_fmadd_pd(gv, _mm512_load_pd(wrow.add(56)), x7);
                }
                let dxp = dx.add(r * WIDE);
                if accumulate {
                    _mm512_store_pd(dxp, _mm512_add_pd(_mm512_load_pd(dxp), x0));
                    _mm512_store_pd(dxp.add(8), _mm512_add_pd(_mm512_load_pd(dxp.add(8)), x1));
                    _mm512_store_pd(dxp.add(16), _mm512_add_pd(_mm512_load_pd(dxp.add(16)), x2));
                    _mm512_store_pd(dxp.add(24), _mm512_add_pd(_mm512_load_pd(dxp.add(24)), x3));
                    _mm512_store_pd(dxp.add(32), _mm512_add_pd(_mm512_load_pd(dxp.add(32)), x4));
                    _mm512_store_pd(dxp.add(40), _mm512_add_pd(_mm512_load_pd(dxp.add(40)), x5));
                    _mm512_store_pd(dxp.add(48), _mm512_add_pd(_mm512_load_pd(dxp.add(48)), x6));
                    _mm512_store_pd(dxp.add(56), _mm512_add_pd(_mm512_load_pd(dxp.add(56)), x7));
                } else {
                    _mm512_stream_pd(dxp, x0); _mm512_stream_pd(dxp.add(8), x1);
                    _mm512_stream_pd(dxp.add(16), x2); _mm512_stream_pd(dxp.add(24), x3);
                    _mm512_stream_pd(dxp.add(32), x4); _mm512_stream_pd(dxp.add(40), x5);
                    _mm512_stream_pd(dxp.add(48), x6); _mm512_stream_pd(dxp.add(56), x7);
                }
            } else {
                let mut x0 = zero;
                for c in 0..WIDE {
                    let gv = _mm512_set1_pd(*gbuf.0.as_ptr().add(c));
                    x0 = _mm512_fmadd_pd(gv, _mm512_load_pd(wt.add(c * 8)), x0);
                }
                let dxp = dx.add(r * in_dim);
                if accumulate {
                    let prev = _mm512_maskz_loadu_pd(narrow_mask, dxp);
                    _mm512_mask_storeu_pd(dxp, narrow_mask, _mm512_add_pd(prev, x0));
                } else {
                    _mm512_mask_storeu_pd(dxp, narrow_mask, x0);
                }
            }
        }
        _mm_sfence();
        _mm512_store_pd(db, _mm512_add_pd(_mm512_load_pd(db), db0));
        _mm512_store_pd(db.add(8), _mm512_add_pd(_mm512_load_pd(db.add(8)), db1));
        _mm512_store_pd(db.add(16), _mm512_add_pd(_mm512_load_pd(db.add(16)), db2));
        _mm512_store_pd(db.add(24), _mm512_add_pd(_mm512_load_pd(db.add(24)), db3));
        _mm512_store_pd(db.add(32), _mm512_add_pd(_mm512_load_pd(db.add(32)), db4));
        _mm512_store_pd(db.add(40), _mm512_add_pd(_mm512_load_pd(db.add(40)), db5));
        _mm512_store_pd(db.add(48), _mm512_add_pd(_mm512_load_pd(db.add(48)), db6));
        _mm512_store_pd(db.add(56), _mm512_add_pd(_mm512_load_pd(db.add(56)), db7));
    }

    /// Rows are processed in blocks small enough that a block of `gm` stays
    /// in L1 while the feature loop revisits it.
    const DW_BLOCK: usize = 48;

    #[target_feature(enable = "avx512f")]
    pub unsafe fn dw_wide(x: *const f64, gm: *const f64, dw: *mut f64, rows: usize, in_dim: usize) {
        let zero = _mm512_setzero_pd();
        let mut rb = 0;
        while rb < rows {
            let re = (rb + DW_BLOCK).min(rows);
            let mut f = 0;
            while f + 2 <= in_dim {
                let mut a00 = zero; let mut a01 = zero; let mut a02 = zero; let mut a03 = zero;
                let mut a04 = zero; let mut a05 = zero; let mut a06 = zero; let mut a07 = zero;
                let mut a10 = zero; let mut a11 = zero; let mut a12 = zero; let mut a13 = zero;
                let mut a14 = zero; let mut a15 = zero; let mut a16 = zero; let mut a17 = zero;
                for r in rb..re {
                    let gp = gm.add(r * WIDE);
                    let x0 = _mm512_set1_pd(*x.add(r * in_dim + f));
                    let x1 = _mm512_set1_pd(*x.add(r * in_dim + f + 1));
                    let v0 = _mm512_load_pd(gp);
                    a00 = _mm512_fmadd_pd(x0, v0, a00);
                    a10 = _mm512_fmadd_pd(x1, v0, a10);
                    let v1 = _mm512_load_pd(gp.add(8));
                    a01 = _mm512_fmadd_pd(x0, v1, a01);
                    a11 = _mm512_fmadd_pd(x1, v1, a11);
                    let v2 = _mm512_load_pd(gp.add(16));
                    a02 = _mm512_fmadd_pd(x0, v2, a02);
                    a12 = _mm512_fmadd_pd(x1, v2, a12);
                    let v3 = _mm512_load_pd(gp.add(24));
                    a03 = _mm512_fmadd_pd(x0, v3, a03);
                    a13 = _mm512_fmadd_pd(x1, v3, a13);
                    let v4 = _mm512_load_pd(gp.add(32));
                    a04 = _mm512_fmadd_pd(x0, v4, a04);
                    a14 = _mm512_fmadd_pd(x1, v4, a14);
                    let v5 = _mm512_load_pd(gp.add(40));
                    a05 = _mm512_fmadd_pd(x0, v5, a05);
                    a15 = _mm512_fmadd_pd(x1, v5, a15);
                    let v6 = _mm512_load_pd(gp.add(48));
                    a06 = _mm512_fmadd_pd(x0, v6, a06);
                    a16 = _mm512_fmadd_pd(x1, v6, a16);
                    let v7 = _mm512_load_pd(gp.add(56));
                    a07 = _mm512_fmadd_pd(x0, v7, a07);
                    a17 = _mm512_fmadd_pd(x1, v7, a17);
                }
                let d0 = dw.add(f * WIDE);
                _mm512_store_pd(d0, _mm512_add_pd(_mm512_load_pd(d0), a00));
                _mm512_store_pd(d0.add(8), _mm512_add_pd(_mm512_load_pd(d0.add(8)), a01));
                _mm512_store_pd(d0.add(16), _mm512_add_pd(_mm512_load_pd(d0.add(16)), a02));
                _mm512_store_pd(d0.add(24), _mm512_add_pd(_mm512_load_pd(d0.add(24)), a03));
                _mm512_store_pd(d0.add(32), _mm512_add_pd(_mm512_load_pd(d0.add(32)), a04));
                _mm512_store_pd(d0.add(40), _mm512_add_pd(_mm512_load_pd(d0.add(40)), a05));
                _mm512_store_pd(d0.add(48), _mm512_add_pd(_mm512_load_pd(d0.add(48)), a06));
                _mm512_store_pd(d0.add(56), _mm512_add_pd(_mm512_load_pd(d0.add(56)), a07));
                let d1 = dw.add((f + 1) * WIDE);
                _mm512_store_pd(d1, _mm512_add_pd(_mm512_load_pd(d1), a10));
                _mm512_store_pd(d1.add(8), _mm512_add_pd(_mm512_load_pd(d1.add(8)), a11));
                _mm512_store_pd(d1.add(16), _mm512_add_pd(_mm512_load_pd(d1.add(16)), a12));
                _mm512_store_pd(d1.add(24), _mm512_add_pd(_mm512_load_pd(d1.add(24)), a13));
                _mm512_store_pd(d1.add(32), _mm512_add_pd(_mm512_load_pd(d1.add(32)), a14));
                _mm512_store_pd(d1.add(40), _mm512_add_pd(_mm512_load_pd(d1.add(40)), a15));
                _mm512_store_pd(d1.add(48), _mm512_add_pd(_mm512_load_pd(d1.add(48)), a16));
                _mm512_store_pd(d1.add(56), _mm512_add_pd(_mm512_load_pd(d1.add(56)), a17));
                f += 2;
            }
            if f < in_dim {
                let mut a00 = zero; let mut a01 = zero; let mut a02 = zero; let mut a03 = zero;
                let mut a04 = zero; let mut a05 = zero; let mut a06 = zero; let mut a07 = zero;
                for r in rb..re {
                    let gp = gm.add(r * WIDE);
                    let x0 = _mm512_set1_pd(*x.add(r * in_dim + f));
                    a00 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp), a00);
                    a01 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(8)), a01);
                    a02 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(16)), a02);
                    a03 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(24)), a03);
                    a04 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(32)), a04);
                    a05 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(40)), a05);
                    a06 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(48)), a06);
                    a07 = _mm512_fmadd_pd(x0, _mm512_load_pd(gp.add(56)), a07);
                }
                let d0 = dw.add(f * WIDE);
                _mm512_store_pd(d0, _mm512_add_pd(_mm512_load_pd(d0), a00));
                _mm512_store_pd(d0.add(8), _mm512_add_pd(_mm512_load_pd(d0.add(8)), a01));
                _mm512_store_pd(d0.add(16), _mm512_add_pd(_mm512_load_pd(d0.add(16)), a02));
                _mm512_store_pd(d0.add(24), _mm512_add_pd(_mm512_load_pd(d0.add(24)), a03));
                _mm512_store_pd(d0.add(32), _mm512_add_pd(_mm512_load_pd(d0.add(32)), a04));
                _mm512_store_pd(d0.add(40), _mm512_add_pd(_mm512_load_pd(d0.add(40)), a05));
                _mm512_store_pd(d0.add(48), _mm512_add_pd(_mm512_load_pd(d0.add(48)), a06));
                _mm512_store_pd(d0.add(56), _mm512_add_pd(_mm512_load_pd(d0.add(56)), a07));
            }
            rb = re;
        }
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn bwd_col(
        g: *const f64,
        x: *const f64,
        w: *const f64,
        dx: *mut f64,
        accumulate: bool,
        dw: *mut f64,
        db: *mut f64,
        rows: usize,
    ) {
        let zero = _mm512_setzero_pd();
        let w0 = _mm512_load_pd(w);
        let w1 = _mm512_load_pd(w.add(8));
        let w2 = _mm512_load_pd(w.add(16));
        let w3 = _mm512_load_pd(w.add(24));
        let w4 = _mm512_load_pd(w.add(32));
        let w5 = _mm512_load_pd(w.add(40));
        let w6 = _mm512_load_pd(w.add(48));
        let w7 = _mm512_load_pd(w.add(56));
        let mut dw0 = zero; let mut dw1 = zero; let mut dw2 = zero; let mut dw3 = zero;
        let mut dw4 = zero; let mut dw5 = zero; let mut dw6 = zero; let mut dw7 = zero;
        let mut dbs = 0.0;
        for r in 0..rows {
            let gs = *g.add(r);
            dbs += gs;
            let gv = _mm512_set1_pd(gs);
            let xp = x.add(r * WIDE);
            dw0 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp), dw0);
            dw1 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(8)), dw1);
            dw2 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(16)), dw2);
            dw3 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(24)), dw3);
            dw4 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(32)), dw4);
            dw5 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(40)), dw5);
            dw6 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(48)), dw6);
            dw7 = _mm512_fmadd_pd(gv, _mm512_load_pd(xp.add(56)), dw7);
            if dx.is_null() {
                continue;
            }
            let dxp = dx.add(r * WIDE);
            if accumulate {
                _mm512_store_pd(dxp, _mm512_fmadd_pd(gv, w0, _mm512_load_pd(dxp)));
                _mm512_store_pd(dxp.add(8), _mm512_fmadd_pd(gv, w1, _mm512_load_pd(dxp.add(8))));
                _mm512_store_pd(dxp.add(16), _mm512_fmadd_pd(gv, w2, _mm512_load_pd(dxp.add(16))));
                _mm512_store_pd(dxp.add(24), _mm512_fmadd_pd(gv, w3, _mm512_load_pd(dxp.add(24))));
                _mm512_store_pd(dxp.add(32), _mm512_fmadd_pd(gv, w4, _mm512_load_pd(dxp.add(32))));
                _mm512_store_pd(dxp.add(40), _mm512_fmadd_pd(gv, w5, _mm512_load_pd(dxp.add(40))));
                _mm512_store_pd(dxp.add(48), _mm512_fmadd_pd(gv, w6, _mm512_load_pd(dxp.add(48))));
                _mm512_store_pd(dxp.add(56), _mm512_fmadd_pd(gv, w7, _mm512_load_pd(dxp.add(56))));
            } else {
                _mm512_stream_pd(dxp, _mm512_mul_pd(gv, w0));
                _mm512_stream_pd(dxp.add(8), _mm512_mul_pd(gv, w1));
                _mm512_stream_pd(dxp.add(16), _mm512_mul_pd(gv, w2));
                _mm512_stream_pd(dxp.add(24), _mm512_mul_pd(gv, w3));
                _mm512_stream_pd(dxp.add(32), _mm512_mul_pd(gv, w4));
                _mm512_stream_pd(dxp.add(40), _mm512_mul_pd(gv, w5));
                _mm512_stream_pd(dxp.add(48), _mm512_mul_pd(gv, w6));
                _mm512_stream_pd(dxp.add(56), _mm512_mul_pd(gv, w7));
            }
        }
        _mm_sfence();
        let mut dwbuf = RowBuf([0.0; WIDE]);
        _mm512_store_pd(dwbuf.0.as_mut_ptr(), dw0);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(8), dw1);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(16), dw2);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(24), dw3);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(32), dw4);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(40), dw5);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(48), dw6);
        _mm512_store_pd(dwbuf.0.as_mut_ptr().add(56), dw7);
        for (k, v) in dwbuf.0.iter().enumerate() {
            *dw.add(k) += v;
        }
        *db += dbs;
    }
}

#[cfg(all(test, target_arch = "x86_64"))]
mod tests {
    use super::*;
    use crate::avec::AVec;

    fn filled(n: usize, f: impl Fn(usize) -> f64) -> AVec {
        let mut v = AVec::zeroed(n);
        for (i, x) in v.iter_mut().enumerate() {
            *x = f(i);
        }
        v
    }

    fn fwd_oracle(x: &[f64], w: &[f64], b: &[f64], rows: usize, in_dim: usize, out_dim: usize, relu: bool) -> Vec<f64> {
        let mut out = vec![0.0; rows * out_dim];
        for r in 0..rows {
            for c in 0..out_dim {
                let mut acc = 0.0;
                for k in 0..in_dim {
                    acc += x[r * in_dim + k] * w[k * out_dim + c];
                }
                acc += b[c];
                out[r * out_dim + c] = if relu { acc.max(0.0) } else { acc };
            }
        }
        out
    }

    #[test]
    fn fwd_wide_matches_oracle() {
        if !available() {
            return;
        }
        for rows in [1, 2, 3, 37] {
            for in_dim in [6, 64] {
                for relu in [false, true] {
                    let x = filled(rows * in_dim, |i| ((i * 53) % 101) as f64 / 50.0 - 1.0);
                    let w = filled(in_dim * 64, |i| ((i * 97) % 89) as f64 / 44.0 - 1.0);
                    let b = filled(64, |i| i as f64 / 32.0 - 1.0);
                    let mut out = AVec::zeroed(rows * 64);
                    fwd_wide(&x, &w, &b, &mut out, rows, in_dim, relu);
                    let want = fwd_oracle(&x, &w, &b, rows, in_dim, 64, relu);
                    for (got, want) in out.iter().zip(&want) {
                        assert!((got - want).abs() < 1e-12, "rows={rows} in={in_dim} relu={relu}");
                    }
                }
            }
        }
    }

    #[test]
    fn fwd_col_matches_oracle() {
        if !available() {
            return;
        }
        for (rows, in_dim) in [(1, 64), (37, 64), (5, 6)] {
            let x = filled(rows * in_dim, |i| ((i * 31) % 103) as f64 / 51.0 - 1.0);
            let w = filled(in_dim, |i| ((i * 7) % 13) as f64 / 6.0 - 1.0);
            let mut out = AVec::zeroed(rows);
            fwd_col(&x, &w, 0.25, &mut out, rows, in_dim);
            let want = fwd_oracle(&x, &w, &[0.25], rows, in_dim, 1, false);
            for (got, want) in out.iter().zip(&want) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bwd_wide_matches_oracle() {
        if !available() {
            return;
        }
        for rows in [1, 3, 37] {
            for in_dim in [6usize, 64] {
                for relu in [false, true] {
                    for accumulate in [false, true] {
                        let g = filled(rows * 64, |i| ((i * 29) % 83) as f64 / 41.0 - 1.0);
                        let out = filled(rows * 64, |i| ((i * 13) % 7) as f64 - 3.0);
                        let w = filled(in_dim * 64, |i| ((i * 97) % 89) as f64 / 44.0 - 1.0);
                        let mut wt = AVec::zeroed(64 * wt_stride(in_dim));
                        transpose_wt(&w, in_dim, &mut wt);
                        let mut gm = AVec::zeroed(rows * 64);
                        let mut dx = AVec::from_slice(&vec![0.5; rows * in_dim]);
                        let mut db = AVec::zeroed(64);
                        bwd_wide(&g, &out, &wt, &mut gm, Some(&mut dx), accumulate, &mut db, rows, in_dim, relu);
                        let mask = |k: usize| !relu || out[k] > 0.0;
                        for r in 0..rows {
                            for c in 0..64 {
                                let k = r * 64 + c;
                                let want = if mask(k) { g[k] } else { 0.0 };
                                assert_eq!(gm[k], want);
                            }
                        }
                        for c in 0..64 {
                            let want: f64 =
                                (0..rows).map(|r| if mask(r * 64 + c) { g[r * 64 + c] } else { 0.0 }).sum();
                            assert!((db[c] - want).abs() < 1e-12);
                        }
                        for r in 0..rows {
                            for i in 0..in_dim {
                                let mut want: f64 = (0..64)
                                    .map(|c| {
                                        let k = r * 64 + c;
                                        let gv = if mask(k) { g[k] } else { 0.0 };
                                        gv * w[i * 64 + c]
                                    })
                                    .sum();
                                if accumulate {
                                    want += 0.5;
                                }
                                assert!(
                                    (dx[r * in_dim + i] - want).abs() < 1e-12,
                                    "rows={rows} in={in_dim} relu={relu} acc={accumulate}"
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bwd_wide_without_dx_only_touches_gm_db() {
        if !available() {
            return;
        }
        let rows = 5;
        let g = filled(rows * 64, |i| i as f64 * 0.01 - 1.5);
        let out = filled(rows * 64, |i| ((i * 13) % 5) as f64 - 2.0);
        let mut gm = AVec::zeroed(rows * 64);
        let mut db = AVec::zeroed(64);
        bwd_wide(&g, &out, &[], &mut gm, None, false, &mut db, rows, 17, true);
        for k in 0..rows * 64 {
            let want = if out[k] > 0.0 { g[k] } else { 0.0 };
            assert_eq!(gm[k], want);
        }
    }

    #[test]
    fn dw_wide_matches_oracle() {
        if !available() {
            return;
        }
        for rows in [1, 37, 120] {
            for in_dim in [5usize, 6, 64] {
                let x = filled(rows * in_dim, |i| ((i * 53) % 101) as f64 / 50.0 - 1.0);
                let gm = filled(rows * 64, |i| ((i * 29) % 83) as f64 / 41.0 - 1.0);
                let mut dw = AVec::from_slice(&vec![0.125; in_dim * 64]);
                dw_wide(&x, &gm, &mut dw, rows, in_dim);
                for i in 0..in_dim {
                    for c in 0..64 {
                        let want: f64 =
                            0.125 + (0..rows).map(|r| x[r * in_dim + i] * gm[r * 64 + c]).sum::<f64>();
                        assert!((dw[i * 64 + c] - want).abs() < 1e-12, "rows={rows} in={in_dim}");
                    }
                }
            }
        }
    }

    #[test]
    fn bwd_col_matches_oracle() {
        if !available() {
            return;
        }
        for rows in [1, 3, 37] {
            for accumulate in [false, true] {
                let g = filled(rows, |i| ((i * 7) % 11) as f64 / 5.0 - 1.0);
                let x = filled(rows * 64, |i| ((i * 31) % 103) as f64 / 51.0 - 1.0);
                let w = filled(64, |i| ((i * 3) % 17) as f64 / 8.0 - 1.0);
                let mut dx = AVec::from_slice(&vec![0.5; rows * 64]);
                let mut dw = AVec::zeroed(64);
                let mut db = 0.0;
                bwd_col(&g, &x, &w, Some(&mut dx), accumulate, &mut dw, &mut db, rows);
                let want_db: f64 = g.iter().sum();
                assert!((db - want_db).abs() < 1e-12);
                for i in 0..64 {
                    let want: f64 = (0..rows).map(|r| g[r] * x[r * 64 + i]).sum();
                    assert!((dw[i] - want).abs() < 1e-12);
                }
                for r in 0..rows {
                    for i in 0..64 {
                        let mut want = g[r] * w[i];
                        if accumulate {
                            want += 0.5;
                        }
                        assert!((dx[r * 64 + i] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn kernels_are_deterministic() {
        if !available() {
            return;
        }
        let rows = 131;
        let in_dim = 64;
        let x = filled(rows * in_dim, |i| (i as f64).sin());
        let w = filled(in_dim * 64, |i| (i as f64).cos());
        let b = filled(64, |i| i as f64 * 1e-3);
        let mut out1 = AVec::zeroed(rows * 64);
        let mut out2 = AVec::zeroed(rows * 64);
        fwd_wide(&x, &w, &b, &mut out1, rows, in_dim, true);
        fwd_wide(&x, &w, &b, &mut out2, rows, in_dim, true);
        assert_eq!(&out1[..], &out2[..]);
        let mut dw1 = AVec::zeroed(in_dim * 64);
        let mut dw2 = AVec::zeroed(in_dim * 64);
        dw_wide(&x, &out1, &mut dw1, rows, in_dim);
        dw_wide(&x, &out1, &mut dw2, rows, in_dim);
        assert_eq!(&dw1[..], &dw2[..]);
    }
}
