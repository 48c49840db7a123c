//! Branch-free `exp` for softmax inputs, written so the loop vectorises.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const SHIFTER: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
const INV_FACT: [f64; 14] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
    1.0 / 6_227_020_800.0,
];

/// `exp(x)` for `x <= ~0`; inputs below -708 flush toward zero.
#[inline(always)]
pub(crate) fn exp_nonpos(x: f64) -> f64 {
    let x = if x < -708.0 { -708.0 } else { x };
    let t = x * LOG2E + SHIFTER;
    let k = t - SHIFTER;
    let r = x - k * LN2_HI - k * LN2_LO;
    // the low mantissa bits of `t` hold the rounded exponent
    let scale = f64::from_bits(t.to_bits().wrapping_add(1023) << 52);
    // degree-13 Taylor series in Estrin form; |r| <= ln2 / 2 keeps the truncation below 1 ulp
    let c = &INV_FACT;
    let r2 = r * r;
    let r4 = r2 * r2;
    let r8 = r4 * r4;
    let q0 = (c[0] + c[1] * r) + (c[2] + c[3] * r) * r2;
    let q1 = (c[4] + c[5] * r) + (c[6] + c[7] * r) * r2;
    let q2 = (c[8] + c[9] * r) + (c[10] + c[11] * r) * r2;
    let q3 = c[12] + c[13] * r;
    (q0 + q1 * r4 + (q2 + q3 * r4) * r8) * scale
}

const LANES: usize = 8;

#[inline(always)]
fn max_body(row: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let mut chunks = row.chunks_exact(LANES);
    for c in &mut chunks {
        for j in 0..LANES {
            acc[j] = if c[j] > acc[j] { c[j] } else { acc[j] };
        }
    }
    chunks.remainder().iter().chain(&acc).copied().fold(f64::NEG_INFINITY, f64::max)
}

#[inline(always)]
fn exp_shift_body(row: &mut [f64], shift: f64) -> f64 {
    let mut acc = [0.0; LANES];
    let mut chunks = row.chunks_exact_mut(LANES);
    for c in &mut chunks {
        for j in 0..LANES {
            c[j] = exp_nonpos(c[j] - shift);
            acc[j] += c[j];
        }
    }
    let mut tail = 0.0;
    for v in chunks.into_remainder() {
        *v = exp_nonpos(*v - shift);
        tail += *v;
    }
    acc.iter().sum::<f64>() + tail
}

#[inline(always)]
fn scale_body(row: &mut [f64], s: f64) {
    for v in row {
        *v *= s;
    }
}

// Same arithmetic (no fused multiply-add) on both paths, so results do not depend on the CPU.
#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn max(row: &[f64]) -> f64 {
        super::max_body(row)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn exp_shift(row: &mut [f64], shift: f64) -> f64 {
        super::exp_shift_body(row, shift)
    }

    #[target_feature(enable = "avx2")]
    pub(super) unsafe fn scale(row: &mut [f64], s: f64) {
        super::scale_body(row, s)
    }
}

#[inline]
fn has_wide() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn row_max(row: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { wide::max(row) };
    }
    max_body(row)
}

/// `row[i] = exp(row[i] - shift)` for rows whose entries do not exceed `shift`; returns the sum.
pub(crate) fn exp_shift(row: &mut [f64], shift: f64) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { wide::exp_shift(row, shift) };
    }
    exp_shift_body(row, shift)
}

fn scale(row: &mut [f64], s: f64) {
    #[cfg(target_arch = "x86_64")]
    if has_wide() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { wide::scale(row, s) };
    }
    scale_body(row, s)
}

/// In-place softmax of one row; returns its log-sum-exp.
pub(crate) fn softmax_row(row: &mut [f64]) -> f64 {
    let m = row_max(row);
    let sum = exp_shift(row, m);
    scale(row, 1.0 / sum);
    m + sum.ln()
}
