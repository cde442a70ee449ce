//! Column-softmax pass for bilinear costs `M_ij = x_iᵀ A y_j`.
//!
//! This is the hot loop of the semi-dual solver on sampled data. For every
//! column `j` it forms `s_i = τ (F_i + M_ij)`, the log-sum-exp over `i`, the
//! softmax weights `q_ij`, and accumulates `Σ_j q_ij` and `Q Y`. The `N x N`
//! matrix is never stored; columns are processed four at a time with
//! register-tiled multiply-adds and a polynomial `exp`.

use std::sync::OnceLock;

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
// 1.5 * 2^52: adding it rounds to an integer held in the low mantissa bits.
const SHIFT: f64 = 6_755_399_441_055_744.0;

const TILE_COLS: usize = 4;
const LANES: usize = 8;

#[inline(always)]
fn fma<const F: bool>(a: f64, b: f64, c: f64) -> f64 {
    if F {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// `exp(x)` for `x ≤ 0`, relative error below 3e-16. Arguments under -708 flush to zero.
#[inline(always)]
pub(crate) fn exp_neg<const F: bool>(x: f64) -> f64 {
    let xc = if x < -708.0 { -708.0 } else { x };
    let t = fma::<F>(xc, LOG2E, SHIFT);
    let kf = t - SHIFT;
    let r = fma::<F>(-kf, LN2_LO, fma::<F>(-kf, LN2_HI, xc));
    let mut p = 1.0 / 6_227_020_800.0;
    p = fma::<F>(p, r, 1.0 / 479_001_600.0);
    p = fma::<F>(p, r, 1.0 / 39_916_800.0);
    p = fma::<F>(p, r, 1.0 / 3_628_800.0);
    p = fma::<F>(p, r, 1.0 / 362_880.0);
    p = fma::<F>(p, r, 1.0 / 40_320.0);
    p = fma::<F>(p, r, 1.0 / 5_040.0);
    p = fma::<F>(p, r, 1.0 / 720.0);
    p = fma::<F>(p, r, 1.0 / 120.0);
    p = fma::<F>(p, r, 1.0 / 24.0);
    p = fma::<F>(p, r, 1.0 / 6.0);
    p = fma::<F>(p, r, 0.5);
    p = fma::<F>(p, r, 1.0);
    p = fma::<F>(p, r, 1.0);
    let k = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    let scale = f64::from_bits((k.wrapping_add(1023) as u64) << 52);
    let v = p * scale;
    if x < -708.0 {
        0.0
    } else {
        v
    }
}

/// Centered sample matrices stored feature-major for the kernel.
#[derive(Debug, Clone)]
pub(crate) struct BilinearData {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    /// `xa[p][i] = x_ip`
    pub xa: Vec<Vec<f64>>,
    /// `yr[j * d2 + q] = y_jq`
    pub yr: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct PassOutput {
    /// `log((1/n) Σ_i exp(τ(F_i + M_ij)))` for every column.
    pub lse: Vec<f64>,
    /// `Σ_j q_ij`
    pub rowsum: Vec<f64>,
    /// `(Q Y)[i, q]` stored as `qy[q][i]`.
    pub qy: Vec<Vec<f64>>,
}

#[inline(always)]
fn tile_products<const F: bool>(m: &mut [Vec<f64>], xa: &[Vec<f64>], w: &[[f64; TILE_COLS]], cols: usize) {
    let n = m[0].len();
    let d = xa.len();
    assert!(w.len() == d && xa.iter().all(|c| c.len() == n) && m.iter().all(|c| c.len() == n));
    let mut i = 0;
    while i + LANES <= n {
        let mut acc = [[0.0f64; LANES]; TILE_COLS];
        for (col, wk) in xa.iter().zip(w) {
            let x: &[f64; LANES] = col[i..i + LANES].try_into().unwrap();
            for c in 0..TILE_COLS {
                for l in 0..LANES {
                    acc[c][l] = fma::<F>(x[l], wk[c], acc[c][l]);
                }
            }
        }
        for c in 0..cols {
            m[c][i..i + LANES].copy_from_slice(&acc[c]);
        }
        i += LANES;
    }
    for ii in i..n {
        for c in 0..cols {
            let mut s = 0.0;
            for k in 0..d {
                s = fma::<F>(xa[k][ii], w[k][c], s);
            }
            m[c][ii] = s;
        }
    }
}

/// Overwrites `m` with `exp(τ(m + f) - top)` and returns `(top, Σ)`.
#[inline(always)]
fn softmax_column<const F: bool>(m: &mut [f64], f: &[f64], tau: f64) -> (f64, f64) {
    let mut mx = [f64::NEG_INFINITY; LANES];
    let mut top = f64::NEG_INFINITY;
    {
        let mut chunks = m.chunks_exact_mut(LANES);
        let mut fch = f.chunks_exact(LANES);
        for (ch, fc) in (&mut chunks).zip(&mut fch) {
            for l in 0..LANES {
                let v = (ch[l] + fc[l]) * tau;
                ch[l] = v;
                mx[l] = if v > mx[l] { v } else { mx[l] };
            }
        }
        for (v, &fi) in chunks.into_remainder().iter_mut().zip(fch.remainder()) {
            *v = (*v + fi) * tau;
            top = top.max(*v);
        }
    }
    top = mx.iter().fold(top, |a, &b| a.max(b));
    let mut acc = [0.0; LANES];
    let mut chunks = m.chunks_exact_mut(LANES);
    for ch in &mut chunks {
        for l in 0..LANES {
            let e = exp_neg::<F>(ch[l] - top);
            ch[l] = e;
            acc[l] += e;
        }
    }
    let mut sum: f64 = acc.iter().sum();
    for v in chunks.into_remainder() {
        *v = exp_neg::<F>(*v - top);
        sum += *v;
    }
    (top, sum)
}

/// Scales column `c` of `q` by `inv[c]`, adds it to `rowsum`, and adds `q yᵀ` into `qy`.
#[inline(always)]
fn accumulate<const F: bool>(
    qy: &mut [Vec<f64>],
    rowsum: &mut [f64],
    q: &[Vec<f64>],
    inv: &[f64; TILE_COLS],
    ys: &[[f64; TILE_COLS]],
    cols: usize,
) {
    let n = q[0].len();
    assert!(rowsum.len() == n && ys.len() == qy.len());
    assert!(q.iter().all(|c| c.len() == n) && qy.iter().all(|c| c.len() == n));
    let mut i = 0;
    if cols == TILE_COLS {
        while i + LANES <= n {
            let mut qs = [[0.0f64; LANES]; TILE_COLS];
            let rs: &mut [f64; LANES] = (&mut rowsum[i..i + LANES]).try_into().unwrap();
            for c in 0..TILE_COLS {
                let src: &[f64; LANES] = q[c][i..i + LANES].try_into().unwrap();
                for l in 0..LANES {
                    qs[c][l] = src[l] * inv[c];
                    rs[l] += qs[c][l];
                }
            }
            for (out, yk) in qy.iter_mut().zip(ys) {
                let rr: &mut [f64; LANES] = (&mut out[i..i + LANES]).try_into().unwrap();
                for c in 0..TILE_COLS {
                    for l in 0..LANES {
                        rr[l] = fma::<F>(qs[c][l], yk[c], rr[l]);
                    }
                }
            }
            i += LANES;
        }
    }
    for ii in i..n {
        for c in 0..cols {
            let v = q[c][ii] * inv[c];
            rowsum[ii] += v;
            for (out, yk) in qy.iter_mut().zip(ys) {
                out[ii] = fma::<F>(v, yk[c], out[ii]);
            }
        }
    }
}

/// The three inner loops, instantiated once per instruction set. Each one is
/// kept out of line: inlined together, LLVM stops vectorizing the accumulation.
trait Backend {
    fn tile(m: &mut [Vec<f64>], xa: &[Vec<f64>], w: &[[f64; TILE_COLS]], cols: usize);
    fn softmax(m: &mut [f64], f: &[f64], tau: f64) -> (f64, f64);
    fn accumulate(
        qy: &mut [Vec<f64>],
        rowsum: &mut [f64],
        q: &[Vec<f64>],
        inv: &[f64; TILE_COLS],
        ys: &[[f64; TILE_COLS]],
        cols: usize,
    );
}

struct Portable;

impl Backend for Portable {
    fn tile(m: &mut [Vec<f64>], xa: &[Vec<f64>], w: &[[f64; TILE_COLS]], cols: usize) {
        tile_products::<false>(m, xa, w, cols)
    }
    fn softmax(m: &mut [f64], f: &[f64], tau: f64) -> (f64, f64) {
        softmax_column::<false>(m, f, tau)
    }
    fn accumulate(
        qy: &mut [Vec<f64>],
        rowsum: &mut [f64],
        q: &[Vec<f64>],
        inv: &[f64; TILE_COLS],
        ys: &[[f64; TILE_COLS]],
        cols: usize,
    ) {
        accumulate::<false>(qy, rowsum, q, inv, ys, cols)
    }
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use super::*;

    /// Only constructed after runtime detection of AVX2 and FMA.
    pub(super) struct Avx2;

    /// Same as `tile_products`, written with intrinsics: the autovectorized
    /// version loses its vector registers once debug assertions are enabled.
    #[inline(never)]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn tile(m: &mut [Vec<f64>], xa: &[Vec<f64>], w: &[[f64; TILE_COLS]], cols: usize) {
        use std::arch::x86_64::*;
        let n = m[0].len();
        assert!(w.len() == xa.len() && xa.iter().all(|c| c.len() == n) && m.iter().all(|c| c.len() == n));
        let mut i = 0;
        while i + LANES <= n {
            let mut acc = [_mm256_setzero_pd(); 2 * TILE_COLS];
            for (col, wk) in xa.iter().zip(w) {
                // In bounds: every column has length n and i + 8 <= n.
                let x0 = _mm256_loadu_pd(col.as_ptr().add(i));
                let x1 = _mm256_loadu_pd(col.as_ptr().add(i + 4));
                for c in 0..TILE_COLS {
                    let wc = _mm256_set1_pd(wk[c]);
                    acc[2 * c] = _mm256_fmadd_pd(x0, wc, acc[2 * c]);
                    acc[2 * c + 1] = _mm256_fmadd_pd(x1, wc, acc[2 * c + 1]);
                }
            }
            for c in 0..cols {
                _mm256_storeu_pd(m[c].as_mut_ptr().add(i), acc[2 * c]);
                _mm256_storeu_pd(m[c].as_mut_ptr().add(i + 4), acc[2 * c + 1]);
            }
            i += LANES;
        }
        for ii in i..n {
            for c in 0..cols {
                let mut s = 0.0;
                for (col, wk) in xa.iter().zip(w) {
                    s = col[ii].mul_add(wk[c], s);
                }
                m[c][ii] = s;
            }
        }
    }

    #[inline(never)]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn softmax(m: &mut [f64], f: &[f64], tau: f64) -> (f64, f64) {
        softmax_column::<true>(m, f, tau)
    }

    #[inline(never)]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn accumulate_avx(
        qy: &mut [Vec<f64>],
        rowsum: &mut [f64],
        q: &[Vec<f64>],
        inv: &[f64; TILE_COLS],
        ys: &[[f64; TILE_COLS]],
        cols: usize,
    ) {
        accumulate::<true>(qy, rowsum, q, inv, ys, cols)
    }

    // SAFETY for all three: `pass` below is only reached when has_avx2_fma() holds.
    impl Backend for Avx2 {
        fn tile(m: &mut [Vec<f64>], xa: &[Vec<f64>], w: &[[f64; TILE_COLS]], cols: usize) {
            unsafe { tile(m, xa, w, cols) }
        }
        fn softmax(m: &mut [f64], f: &[f64], tau: f64) -> (f64, f64) {
            unsafe { softmax(m, f, tau) }
        }
        fn accumulate(
            qy: &mut [Vec<f64>],
            rowsum: &mut [f64],
            q: &[Vec<f64>],
            inv: &[f64; TILE_COLS],
            ys: &[[f64; TILE_COLS]],
            cols: usize,
        ) {
            unsafe { accumulate_avx(qy, rowsum, q, inv, ys, cols) }
        }
    }
}

fn pass_impl<B: Backend>(
    data: &BilinearData,
    a: &nalgebra::DMatrix<f64>,
    f: &[f64],
    tau: f64,
    want_grad: bool,
) -> PassOutput {
    let n = data.n;
    let ln_n = (n as f64).ln();
    let mut out = PassOutput {
        lse: vec![0.0; n],
        rowsum: if want_grad { vec![0.0; n] } else { Vec::new() },
        qy: if want_grad { vec![vec![0.0; n]; data.d2] } else { Vec::new() },
    };
    let mut m = vec![vec![0.0; n]; TILE_COLS];
    let mut w = vec![[0.0f64; TILE_COLS]; data.d1];
    let mut ys = vec![[0.0f64; TILE_COLS]; data.d2];
    let mut j0 = 0;
    while j0 < n {
        let cols = TILE_COLS.min(n - j0);
        for c in 0..TILE_COLS {
            if c >= cols {
                w.iter_mut().for_each(|v| v[c] = 0.0);
                ys.iter_mut().for_each(|v| v[c] = 0.0);
                continue;
            }
            let y = &data.yr[(j0 + c) * data.d2..(j0 + c + 1) * data.d2];
            for (p, wp) in w.iter_mut().enumerate() {
                let mut s = 0.0;
                for (q, &yq) in y.iter().enumerate() {
                    s += a[(p, q)] * yq;
                }
                wp[c] = s;
            }
            for (k, &yq) in y.iter().enumerate() {
                ys[k][c] = yq;
            }
        }
        B::tile(&mut m, &data.xa, &w, cols);
        let mut inv = [0.0; TILE_COLS];
        for c in 0..cols {
            let (top, sum) = B::softmax(&mut m[c], f, tau);
            out.lse[j0 + c] = top + sum.ln() - ln_n;
            inv[c] = 1.0 / sum;
        }
        if want_grad {
            B::accumulate(&mut out.qy, &mut out.rowsum, &m, &inv, &ys, cols);
        }
        j0 += cols;
    }
    out
}

fn has_avx2_fma() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        #[cfg(target_arch = "x86_64")]
        {
            std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
        }
        #[cfg(not(target_arch = "x86_64"))]
        {
            false
        }
    })
}

/// One pass over all columns. `tau = 2/ε`.
pub(crate) fn column_softmax_pass(
    data: &BilinearData,
    a: &nalgebra::DMatrix<f64>,
    f: &[f64],
    tau: f64,
    want_grad: bool,
) -> PassOutput {
    debug_assert_eq!(f.len(), data.n);
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        return pass_impl::<avx2::Avx2>(data, a, f, tau, want_grad);
    }
    let _ = has_avx2_fma;
    pass_impl::<Portable>(data, a, f, tau, want_grad)
}
