//! Inner loops of the ensemble score estimator, written so the compiler can
//! vectorize them across members.

/// `exp(s)` for `s <= 0`, branch-free. Arguments below -700 are clamped.
/// Cody-Waite reduction `s = n ln2 + r` and a degree-11 Taylor polynomial on
/// `|r| <= ln2 / 2`; relative error below 1e-14. Written with `mul_add` so the
/// feature-gated copies below compile to FMA instructions.
#[inline(always)]
pub(crate) fn exp_nonpositive(s: f64) -> f64 {
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    let s = if s < -700.0 { -700.0 } else { s };
    let t = s.mul_add(std::f64::consts::LOG2_E, SHIFT);
    let n = t - SHIFT;
    let r = (-n).mul_add(LN2_LO, (-n).mul_add(LN2_HI, s));
    let mut p: f64 = 1.0 / 39_916_800.0;
    for c in [
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p.mul_add(r, c);
    }
    let ni = (t.to_bits() as i64).wrapping_sub(SHIFT.to_bits() as i64);
    p * f64::from_bits(((ni + 1023) as u64) << 52)
}

/// Sum with four independent accumulators.
#[inline(always)]
pub(crate) fn sum4(v: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = v.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..4 {
            acc[i] += c[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest.iter().sum::<f64>()
}

#[inline(always)]
pub(crate) fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Members stored component-major, `cols[i * n + j]` = component `i` of
/// member `j`, with squared norms.
pub(crate) struct MemberColumns {
    pub n: usize,
    pub cols: Vec<f64>,
    pub sq: Vec<f64>,
}

/// Members per block of the fused weight pass; one block of logits plus
/// the matching slices of a few columns stay in L1.
const BLOCK: usize = 256;

impl MemberColumns {
    pub fn new(members: ndarray::ArrayView2<f64>) -> Self {
        let (n, d) = members.dim();
        let mut cols = vec![0.0; n * d];
        let mut sq = vec![0.0; n];
        for (j, row) in members.rows().into_iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                cols[i * n + j] = *v;
                sq[j] += v * v;
            }
        }
        MemberColumns { n, cols, sq }
    }

    pub fn col(&self, i: usize) -> &[f64] {
        &self.cols[i * self.n..(i + 1) * self.n]
    }

    /// Unnormalized weights `exp(k z.x_j - c |x_j|^2 - max)` into `w`;
    /// returns their sum.
    pub fn weights_into(&self, z: &[f64], k: f64, c: f64, w: &mut [f64]) -> f64 {
        dispatch!(weights_body(self, z, k, c, w))
    }

    /// Softmax-weighted mean of the members, written to `mix`, without
    /// materializing all weights: blocks are rescaled as the running maximum
    /// grows. Returns the unnormalized weight sum.
    pub fn weighted_mean(&self, z: &[f64], k: f64, c: f64, mix: &mut [f64]) -> f64 {
        dispatch!(mean_body(self, z, k, c, mix))
    }
}

macro_rules! dispatch {
    ($body:ident($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            #[target_feature(enable = "avx512f,avx2,fma")]
            unsafe fn wide(cols: &MemberColumns, z: &[f64], k: f64, c: f64, out: &mut [f64]) -> f64 {
                $body(cols, z, k, c, out)
            }
            #[target_feature(enable = "avx2,fma")]
            unsafe fn avx2(cols: &MemberColumns, z: &[f64], k: f64, c: f64, out: &mut [f64]) -> f64 {
                $body(cols, z, k, c, out)
            }
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: the required CPU features were detected at runtime.
                return unsafe { wide($($arg),*) };
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                // SAFETY: as above.
                return unsafe { avx2($($arg),*) };
            }
        }
        $body($($arg),*)
    }};
}
use dispatch;

#[inline(always)]
fn block_logits(cols: &MemberColumns, z: &[f64], k: f64, c: f64, lo: usize, out: &mut [f64]) -> f64 {
    let hi = lo + out.len();
    for (o, sq) in out.iter_mut().zip(&cols.sq[lo..hi]) {
        *o = -c * sq;
    }
    for (i, zi) in z.iter().enumerate() {
        let kz = k * zi;
        for (o, x) in out.iter_mut().zip(&cols.col(i)[lo..hi]) {
            *o = kz.mul_add(*x, *o);
        }
    }
    max4(out)
}

#[inline(always)]
fn weights_body(cols: &MemberColumns, z: &[f64], k: f64, c: f64, w: &mut [f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (b, chunk) in w.chunks_mut(BLOCK).enumerate() {
        let m = block_logits(cols, z, k, c, b * BLOCK, chunk);
        if m > max {
            max = m;
        }
    }
    for wj in w.iter_mut() {
        *wj = exp_nonpositive(*wj - max);
    }
    sum4(w)
}

#[inline(always)]
fn mean_body(cols: &MemberColumns, z: &[f64], k: f64, c: f64, mix: &mut [f64]) -> f64 {
    let mut buf = [0.0; BLOCK];
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    mix.iter_mut().for_each(|m| *m = 0.0);
    let mut lo = 0;
    while lo < cols.n {
        let len = BLOCK.min(cols.n - lo);
        let w = &mut buf[..len];
        let m = block_logits(cols, z, k, c, lo, w);
        if m > max {
            let scale = exp_nonpositive(max - m);
            sum *= scale;
            mix.iter_mut().for_each(|v| *v *= scale);
            max = m;
        }
        for wj in w.iter_mut() {
            *wj = exp_nonpositive(*wj - max);
        }
        sum += sum4(w);
        for (i, mi) in mix.iter_mut().enumerate() {
            *mi += dot4(w, &cols.col(i)[lo..lo + len]);
        }
        lo += len;
    }
    let inv = 1.0 / sum;
    mix.iter_mut().for_each(|v| *v *= inv);
    sum
}

#[inline(always)]
fn max4(v: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; 4];
    let chunks = v.chunks_exact(4);
    let rest = chunks.remainder();
    for c in chunks {
        for i in 0..4 {
            if c[i] > acc[i] {
                acc[i] = c[i];
            }
        }
    }
    let mut m = acc[0];
    for x in acc[1..].iter().chain(rest) {
        if *x > m {
            m = *x;
        }
    }
    m
}
