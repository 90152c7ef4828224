//! 32-bit fixed-point requantization.
//!
//! A positive real multiplier M (a ratio of quantization scales, typically
//! well below 1) is represented as `m0 * 2^-shift` with `m0` a Q31 integer
//! in [2^30, 2^31). Applying it to an i32 accumulator uses only integer
//! arithmetic: a saturating rounding doubling high multiply followed by a
//! rounding right shift. A double-precision reference path exists for
//! testing and is flagged to the integer-purity guard.

use super::fp_guard;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedPointScale {
    pub multiplier: i32,
    /// Right-shift amount; negative means a left shift (multiplier > 1).
    pub shift: i32,
}

/// Decompose a positive real multiplier. Non-positive input yields the
/// all-zero scale (annihilates the accumulator), which only arises from
/// degenerate calibration ranges.
pub fn requantize_multiplier(real: f64) -> FixedPointScale {
    if !(real > 0.0) || !real.is_finite() {
        return FixedPointScale { multiplier: 0, shift: 0 };
    }
    let mut shift = 0i32;
    let mut r = real;
    while r < 0.5 {
        r *= 2.0;
        shift += 1;
    }
    while r >= 1.0 {
        r /= 2.0;
        shift -= 1;
    }
    let mut m0 = (r * 2147483648.0).round() as i64; // r * 2^31
    if m0 == 1 << 31 {
        m0 /= 2;
        shift -= 1;
    }
    FixedPointScale {
        multiplier: m0 as i32,
        shift,
    }
}

#[inline]
fn saturating_rounding_doubling_high_mul(a: i32, b: i32) -> i32 {
    if a == i32::MIN && b == i32::MIN {
        return i32::MAX;
    }
    let ab = i64::from(a) * i64::from(b);
    let nudge = if ab >= 0 { 1i64 << 30 } else { 1 - (1i64 << 30) };
    // Truncating division, not an arithmetic shift: the two differ on
    // negative products and the reference rounds toward the nearest.
    ((ab + nudge) / (1i64 << 31)) as i32
}

#[inline]
fn rounding_shift_right(x: i32, exponent: i32) -> i32 {
    debug_assert!(exponent >= 0);
    if exponent == 0 {
        return x;
    }
    let mask = (1i64 << exponent) - 1;
    let remainder = i64::from(x) & mask;
    let threshold = (mask >> 1) + i64::from(x < 0);
    let mut result = i64::from(x) >> exponent;
    if remainder > threshold {
        result += 1;
    }
    result as i32
}

impl FixedPointScale {
    /// Integer-only application: round(acc * M) up to one ulp of rounding
    /// difference against the real-arithmetic reference.
    #[inline]
    pub fn apply(&self, acc: i32) -> i32 {
        if self.shift >= 0 {
            let high = saturating_rounding_doubling_high_mul(acc, self.multiplier);
            rounding_shift_right(high, self.shift)
        } else {
            // Multiplier above one: pre-shift the accumulator (widened so
            // the product cannot wrap) and clamp once at the end. Shifting
            // the high-mul output instead would amplify its rounding error
            // by 2^|shift|.
            let ab = (i128::from(acc) << (-self.shift)) * i128::from(self.multiplier);
            let nudge = if ab >= 0 { 1i128 << 30 } else { 1 - (1i128 << 30) };
            let v = (ab + nudge) / (1i128 << 31);
            v.clamp(i128::from(i32::MIN), i128::from(i32::MAX)) as i32
        }
    }
}

/// Double-precision reference requantization. Deliberately performs float
/// work so the purity guard can prove the production path never calls it.
pub fn requantize_reference(acc: i32, real: f64) -> i32 {
    fp_guard::note_float_op();
    let v = (f64::from(acc) * real).round();
    v.clamp(f64::from(i32::MIN), f64::from(i32::MAX)) as i32
}
