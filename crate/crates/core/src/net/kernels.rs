//! Branch-free elementwise kernels the compiler can vectorise.

const LOG2E: f64 = std::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
/// Adding and subtracting this rounds to the nearest integer and leaves it in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;
/// tanh(±20) rounds to ±1.
const TANH_CLAMP: f64 = 20.0;

/// `exp(x) - 1` for |x| <= 40, accurate to a few ulp.
#[inline(always)]
fn expm1_bounded(x: f64) -> f64 {
    let shifted = x * LOG2E + ROUND_MAGIC;
    let k = shifted - ROUND_MAGIC;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of expm1 on |r| <= ln2 / 2
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
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
    ] {
        p = p * r + c;
    }
    let p = p * r;
    let two_k = f64::from_bits((shifted.to_bits().wrapping_add(1023)) << 52);
    (two_k - 1.0) + two_k * p
}

/// Hyperbolic tangent within 2 ulp of the correctly rounded value; NaN propagates.
#[inline(always)]
pub(crate) fn tanh(x: f64) -> f64 {
    let c = if x > TANH_CLAMP {
        TANH_CLAMP
    } else if x < -TANH_CLAMP {
        -TANH_CLAMP
    } else {
        x
    };
    let e = expm1_bounded(2.0 * c);
    e / (e + 2.0)
}

/// Replaces every element by its hyperbolic tangent, using the widest vector
/// unit the CPU offers. All paths perform the same IEEE operations.
pub(crate) fn tanh_in_place(v: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required feature was detected at runtime.
            return unsafe { tanh_avx512(v) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { tanh_avx2(v) };
        }
    }
    tanh_portable(v)
}

#[inline(always)]
fn tanh_portable(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = tanh(*x);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tanh_avx512(v: &mut [f64]) {
    tanh_portable(v)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tanh_avx2(v: &mut [f64]) {
    tanh_portable(v)
}
