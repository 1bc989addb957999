//! Software emulation of IEEE-754 binary16 rounding.
//!
//! Values stay widened to `f32`; quantizing snaps them onto the binary16 grid
//! with round-to-nearest-even, which is all the mixed-precision path needs.

/// Largest finite binary16 value.
pub const FP16_MAX: f32 = 65504.0;

/// Smallest magnitude that rounds to infinity (midpoint between 65504 and 2^16).
const OVERFLOW_BOUNDARY: f32 = 65520.0;

/// Smallest positive normal binary16 value, 2^-14.
const MIN_NORMAL: f32 = 6.103_515_6e-5;

/// Spacing of the subnormal grid, 2^-24.
const SUBNORMAL_QUANTUM: f32 = 5.960_464_5e-8;

/// Rounds `x` to the nearest binary16 value (ties to even) and widens it back.
///
/// Overflowing magnitudes become signed infinity, magnitudes at or below half the
/// smallest subnormal become signed zero, NaN stays NaN.
pub fn quantize_fp16(x: f32) -> f32 {
    if !x.is_finite() {
        return x;
    }
    let a = x.abs();
    if a >= OVERFLOW_BOUNDARY {
        return f32::INFINITY.copysign(x);
    }
    let quantum = if a < MIN_NORMAL {
        SUBNORMAL_QUANTUM
    } else {
        // 2^(e - 10) where e is the unbiased f32 exponent of `a`
        let exp = ((a.to_bits() >> 23) & 0xff) as i32 - 127;
        f32::from_bits(((exp - 10 + 127) as u32) << 23)
    };
    // scaling by a power of two is exact, so one rounding happens here
    let snapped = (a / quantum).round_ties_even() * quantum;
    snapped.copysign(x)
}

/// Quantizes every element in place.
pub fn quantize_slice(values: &mut [f32]) {
    for v in values {
        *v = quantize_fp16(*v);
    }
}

pub fn is_on_fp16_grid(x: f32) -> bool {
    let q = quantize_fp16(x);
    q.to_bits() == x.to_bits() || (q.is_nan() && x.is_nan())
}
