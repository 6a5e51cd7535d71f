use std::fmt;

use serde::{Deserialize, Serialize};

pub const FRACTION_BITS: u32 = 7;
pub const EXPONENT_BIAS: i32 = 127;
/// Smallest normal exponent.
pub const MIN_EXP: i32 = -126;
/// Largest finite exponent.
pub const MAX_EXP: i32 = 127;

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7F80;
const FRAC_MASK: u16 = 0x007F;

/// A bfloat16 bit pattern: 1 sign, 8 exponent and 7 fraction bits.
///
/// Arithmetic is never performed on this type directly; values are decoded
/// to `f64` (exactly) or produced by [`encode_b16`] and the bit-level adder.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct B16(u16);

impl B16 {
    pub const ZERO: B16 = B16(0);
    pub const NEG_ZERO: B16 = B16(SIGN_MASK);
    pub const ONE: B16 = B16(0x3F80);
    pub const INFINITY: B16 = B16(0x7F80);
    pub const NEG_INFINITY: B16 = B16(0xFF80);
    pub const NAN: B16 = B16(0x7FC0);
    pub const MAX: B16 = B16(0x7F7F);
    pub const MIN_POSITIVE_SUBNORMAL: B16 = B16(0x0001);

    #[inline]
    pub const fn from_bits(bits: u16) -> Self {
        B16(bits)
    }

    #[inline]
    pub const fn to_bits(self) -> u16 {
        self.0
    }

    /// Builds a pattern from its three fields. Out-of-range fields are masked.
    pub const fn from_fields(negative: bool, exponent: u16, fraction: u16) -> Self {
        let sign = if negative { SIGN_MASK } else { 0 };
        B16(sign | ((exponent & 0xFF) << 7) | (fraction & FRAC_MASK))
    }

    #[inline]
    pub fn from_f64(x: f64) -> Self {
        encode_b16(x)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        decode_b16(self)
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        f32::from_bits((self.0 as u32) << 16)
    }

    #[inline]
    pub const fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }

    /// Biased exponent field.
    #[inline]
    pub const fn exponent_field(self) -> u16 {
        (self.0 & EXP_MASK) >> 7
    }

    #[inline]
    pub const fn fraction_field(self) -> u16 {
        self.0 & FRAC_MASK
    }

    pub const fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & FRAC_MASK != 0
    }

    pub const fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    pub const fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    pub const fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    pub const fn is_subnormal(self) -> bool {
        self.0 & EXP_MASK == 0 && self.0 & FRAC_MASK != 0
    }

    /// Unit in the last place of this value's binade.
    pub fn ulp(self) -> f64 {
        ulp_b16(self.to_f64())
    }

    /// The pattern written as `s eeeeeeee fffffff`.
    pub fn bit_string(self) -> String {
        let b = self.0;
        format!(
            "{} {:08b} {:07b}",
            b >> 15,
            (b & EXP_MASK) >> 7,
            b & FRAC_MASK
        )
    }

    /// Parses a `s eeeeeeee fffffff` bit string (whitespace optional).
    pub fn parse_bit_string(s: &str) -> Option<Self> {
        let digits: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if digits.len() != 16 {
            return None;
        }
        u16::from_str_radix(&digits, 2).ok().map(B16)
    }
}

impl fmt::Debug for B16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "B16({:#06x} = {})", self.0, self.to_f64())
    }
}

impl fmt::Display for B16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.to_f64(), f)
    }
}

impl From<B16> for f64 {
    fn from(b: B16) -> f64 {
        b.to_f64()
    }
}

/// Rounds an `f64` to the nearest bfloat16, ties to even.
///
/// Every bit below the rounding position takes part in the sticky test, so
/// there is no double rounding through `f32`. Subnormal results are kept;
/// overflow produces a signed infinity and NaN maps to the canonical quiet NaN
/// with the input's sign.
pub fn encode_b16(x: f64) -> B16 {
    let bits = x.to_bits();
    let sign: u16 = if bits >> 63 != 0 { SIGN_MASK } else { 0 };
    let exp_field = ((bits >> 52) & 0x7FF) as i32;
    let frac = bits & ((1u64 << 52) - 1);

    if exp_field == 0x7FF {
        return if frac != 0 {
            B16(sign | 0x7FC0)
        } else {
            B16(sign | EXP_MASK)
        };
    }
    // f64 subnormals are far below half the smallest bf16 subnormal.
    if exp_field == 0 {
        return B16(sign);
    }

    let e = exp_field - 1023;
    if e > MAX_EXP {
        return B16(sign | EXP_MASK);
    }
    let significand = (1u64 << 52) | frac;

    // Number of low bits dropped so that the kept integer has the bf16 LSB weight.
    let shift: u32 = if e >= MIN_EXP {
        52 - FRACTION_BITS
    } else {
        let extra = (MIN_EXP - e) as u32;
        if extra > 9 {
            // below a quarter of the smallest subnormal
            return B16(sign);
        }
        52 - FRACTION_BITS + extra
    };

    let mut kept = significand >> shift;
    let rem = significand & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    if rem > half || (rem == half && kept & 1 == 1) {
        kept += 1;
    }

    if e >= MIN_EXP {
        // kept is in [128, 256]; a carry out of the fraction bumps the exponent.
        let biased = (e + EXPONENT_BIAS) as u64;
        let pattern = (biased << 7) + kept - 128;
        if pattern >= EXP_MASK as u64 {
            B16(sign | EXP_MASK)
        } else {
            B16(sign | pattern as u16)
        }
    } else {
        // kept is in [0, 128]; 128 is exactly the smallest normal pattern.
        B16(sign | kept as u16)
    }
}

/// Exact real value of a pattern. Subnormals and specials included.
#[inline]
pub fn decode_b16(b: B16) -> f64 {
    b.to_f32() as f64
}

/// Spacing of bfloat16 values in the binade containing `x`.
pub fn ulp_b16(x: f64) -> f64 {
    let a = x.abs();
    if a == 0.0 || !a.is_finite() {
        return 2f64.powi(MIN_EXP - FRACTION_BITS as i32);
    }
    let e = (a.log2().floor() as i32).clamp(MIN_EXP, MAX_EXP);
    // log2 can be off by one right at powers of two
    let e = if 2f64.powi(e) > a {
        (e - 1).max(MIN_EXP)
    } else if 2f64.powi(e + 1) <= a {
        e + 1
    } else {
        e
    };
    2f64.powi(e - FRACTION_BITS as i32)
}

/// `decode(encode(x)) == x`.
#[inline]
pub fn is_b16_exact(x: f64) -> bool {
    x.is_nan() || decode_b16(encode_b16(x)) == x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bits(s: &str) -> B16 {
        B16::parse_bit_string(s).unwrap()
    }

    #[test]
    fn worked_example_patterns() {
        assert_eq!(encode_b16(-4.703990459442139), bits("1 10000001 0010111"));
        assert_eq!(decode_b16(bits("1 10000001 0010111")), -4.71875);
        assert_eq!(decode_b16(bits("1 10000000 0010011")), -2.296875);
        assert_eq!(encode_b16(2.40625), bits("0 10000000 0011010"));
        assert_eq!(encode_b16(1.0), bits("0 01111111 0000000"));
        assert_eq!(decode_b16(B16::ZERO), 0.0);
    }

    #[test]
    fn specials_propagate() {
        assert_eq!(encode_b16(f64::INFINITY), B16::INFINITY);
        assert_eq!(encode_b16(f64::NEG_INFINITY), B16::NEG_INFINITY);
        assert!(encode_b16(f64::NAN).is_nan());
        assert!(encode_b16(-f64::NAN).is_sign_negative());
        assert_eq!(encode_b16(1e39), B16::INFINITY);
        assert_eq!(encode_b16(-0.0), B16::NEG_ZERO);
    }

    #[test]
    fn overflow_boundary_ties_to_infinity() {
        let max = B16::MAX.to_f64();
        let half_ulp = 2f64.powi(127 - 8);
        assert_eq!(encode_b16(max + half_ulp * 0.999), B16::MAX);
        // midpoint: MAX has an odd fraction, so the tie goes up to infinity
        assert_eq!(encode_b16(max + half_ulp), B16::INFINITY);
    }

    #[test]
    fn subnormal_rounding() {
        let tiny = B16::MIN_POSITIVE_SUBNORMAL.to_f64();
        assert_eq!(tiny, 2f64.powi(-133));
        assert_eq!(encode_b16(tiny * 0.5), B16::ZERO); // tie to even (0)
        assert_eq!(encode_b16(tiny * 0.5000001), B16::MIN_POSITIVE_SUBNORMAL);
        assert_eq!(encode_b16(tiny * 1.5), B16::from_bits(2)); // tie to even (2)
                                                               // largest subnormal rounds up into the smallest normal
        let largest_sub = B16::from_bits(0x007F).to_f64();
        assert_eq!(
            encode_b16(largest_sub + tiny * 0.75),
            B16::from_bits(0x0080)
        );
    }

    #[test]
    fn ulp_at_binade_edges() {
        assert_eq!(ulp_b16(1.0), 2f64.powi(-7));
        assert_eq!(ulp_b16(1.99), 2f64.powi(-7));
        assert_eq!(ulp_b16(2.0), 2f64.powi(-6));
        assert_eq!(ulp_b16(-4.71875), 2f64.powi(-5));
        assert_eq!(ulp_b16(1e-45), 2f64.powi(-133));
    }

    #[test]
    fn bit_string_round_trip() {
        let b = B16::from_bits(0xC097);
        assert_eq!(b.bit_string(), "1 10000001 0010111");
        assert_eq!(B16::parse_bit_string(&b.bit_string()), Some(b));
        assert_eq!(B16::parse_bit_string("0101"), None);
    }
}
