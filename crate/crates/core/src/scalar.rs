//! Floating-point scalar abstraction shared by the tensor, network, trainer and
//! float inference paths.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use rand::distributions::uniform::SampleUniform;

/// Real scalar usable as tensor element type.
///
/// Implemented for `f32` (the deployment type, bit-exact contracts are stated
/// against it) and `f64` (handy for gradient checks).
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum
    + SampleUniform
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Bits in the IEEE-754 encoding.
    const BITS: u32;

    /// Multiply by `2^exp` by adjusting the exponent field.
    ///
    /// Exact whenever the result is a normal number. Falls back to a
    /// multiplication only for zero, subnormal, infinite or NaN operands or
    /// results, which never occur on the weight path for finite activations.
    fn scale_pow2(self, exp: i32) -> Self;

    /// Lossless widening to `f64`.
    fn widen(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    /// Nearest representable value of an `f64`.
    fn narrow(v: f64) -> Self {
        Self::from_f64(v).expect("f64 to float")
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    fn scale_pow2(self, exp: i32) -> Self {
        let bits = self.to_bits();
        let field = ((bits >> 23) & 0xff) as i32;
        let adjusted = field + exp;
        if field == 0 || field == 0xff || adjusted <= 0 || adjusted >= 0xff {
            return self * (exp as f32).exp2();
        }
        f32::from_bits((bits & !(0xff << 23)) | ((adjusted as u32) << 23))
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    fn scale_pow2(self, exp: i32) -> Self {
        let bits = self.to_bits();
        let field = ((bits >> 52) & 0x7ff) as i64;
        let adjusted = field + exp as i64;
        if field == 0 || field == 0x7ff || adjusted <= 0 || adjusted >= 0x7ff {
            return self * (exp as f64).exp2();
        }
        f64::from_bits((bits & !(0x7ff << 52)) | ((adjusted as u64) << 52))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_pow2_matches_multiplication() {
        for &x in &[1.0f32, -3.5, 0.1, 1e-30, 7.25e20, -0.0, 0.0] {
            for e in -10..=10 {
                assert_eq!(x.scale_pow2(e).to_bits(), (x * (e as f32).exp2()).to_bits(), "{x} {e}");
            }
        }
        assert_eq!(8.0f64.scale_pow2(-3), 1.0);
    }

    #[test]
    fn scale_pow2_handles_underflow() {
        let tiny = f32::MIN_POSITIVE;
        assert_eq!(tiny.scale_pow2(-1), tiny / 2.0);
        assert!(f32::NAN.scale_pow2(2).is_nan());
    }
}
