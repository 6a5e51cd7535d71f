//! Bit-level floating-point addition with a bfloat16 result.
//!
//! The adder follows the textbook four steps: align exponents, add the
//! significands, normalize, round to nearest with ties to even. Operands
//! may carry more fraction bits than the result (an `f32` accumulator plus a
//! bf16 term, for instance), which is how a sticky residual enters the final
//! rounding.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::b16::{B16, FRACTION_BITS, MIN_EXP};

const BIAS: i32 = 127;
/// Exponent distance beyond which the smaller operand only contributes a sticky bit.
const STICKY_ONLY_DISTANCE: i32 = 64;

/// An operand as `(-1)^negative * significand * 2^lsb_exp`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operand {
    pub negative: bool,
    pub significand: u64,
    pub lsb_exp: i32,
    /// Width of the stored fraction (7 for bf16, 23 for f32).
    pub fraction_bits: u32,
    /// Raw encoding, for display.
    pub bits: u32,
}

impl Operand {
    pub fn from_b16(b: B16) -> Self {
        Self::unpack(b.to_bits() as u32, 8, FRACTION_BITS)
    }

    pub fn from_f32(x: f32) -> Self {
        Self::unpack(x.to_bits(), 8, 23)
    }

    fn unpack(bits: u32, exp_bits: u32, frac_bits: u32) -> Self {
        let total = 1 + exp_bits + frac_bits;
        let negative = (bits >> (total - 1)) & 1 == 1;
        let exp_field = ((bits >> frac_bits) & ((1 << exp_bits) - 1)) as i32;
        let frac = (bits & ((1 << frac_bits) - 1)) as u64;
        let (significand, lsb_exp) = if exp_field == 0 {
            (frac, 1 - BIAS - frac_bits as i32)
        } else {
            (frac | (1 << frac_bits), exp_field - BIAS - frac_bits as i32)
        };
        Operand {
            negative,
            significand,
            lsb_exp,
            fraction_bits: frac_bits,
            bits,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.significand == 0
    }

    fn is_special(&self) -> bool {
        let exp_field = (self.bits >> self.fraction_bits) & 0xFF;
        exp_field == 0xFF
    }

    /// Exponent of the leading one.
    fn top_exp(&self) -> i32 {
        self.lsb_exp + 63 - self.significand.leading_zeros() as i32
    }

    pub fn to_f64(&self) -> f64 {
        if self.fraction_bits == 23 {
            f32::from_bits(self.bits) as f64
        } else {
            B16::from_bits(self.bits as u16).to_f64()
        }
    }

    pub fn bit_string(&self) -> String {
        let fb = self.fraction_bits;
        format!(
            "{} {:08b} {:0width$b}",
            self.bits >> (fb + 8),
            (self.bits >> fb) & 0xFF,
            self.bits & ((1 << fb) - 1),
            width = fb as usize
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    /// Significand overflow, e.g. `1.x + 1.y = 10.z`.
    RightShift(u32),
    /// Cancellation.
    LeftShift(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundDecision {
    /// Nothing below the kept LSB.
    Exact,
    Down,
    Up,
    /// Exactly half an ULP; resolved toward the even neighbour.
    TieToEven {
        up: bool,
    },
}

impl RoundDecision {
    pub fn rounded_up(self) -> bool {
        matches!(
            self,
            RoundDecision::Up | RoundDecision::TieToEven { up: true }
        )
    }
}

/// Every intermediate of one bit-level addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdditionTrace {
    pub lhs: Operand,
    pub rhs: Operand,
    /// Right shift applied to the operand with the smaller exponent.
    pub alignment_shift: u32,
    pub aligned_lhs: String,
    pub aligned_rhs: String,
    pub raw_sum: String,
    pub normalization: Normalization,
    /// `1.fffffff` followed by the rounding bit and the sticky tail, `|`-separated.
    pub normalized: String,
    pub kept_fraction: u16,
    pub round_bit: bool,
    pub sticky: bool,
    pub decision: RoundDecision,
    pub result: B16,
    pub exact: f64,
    pub error: f64,
}

impl AdditionTrace {
    pub fn overflow_shift(&self) -> bool {
        matches!(self.normalization, Normalization::RightShift(_))
    }

    pub fn rounded_up(&self) -> bool {
        self.decision.rounded_up()
    }
}

impl fmt::Display for AdditionTrace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "operand a  {}  ({})",
            self.lhs.bit_string(),
            self.lhs.to_f64()
        )?;
        writeln!(
            f,
            "operand b  {}  ({})",
            self.rhs.bit_string(),
            self.rhs.to_f64()
        )?;
        writeln!(
            f,
            "1. exponent alignment: shift smaller operand right by {}",
            self.alignment_shift
        )?;
        writeln!(f, "     {}", self.aligned_lhs)?;
        writeln!(f, "   + {}", self.aligned_rhs)?;
        writeln!(f, "2. significand sum:  {}", self.raw_sum)?;
        let norm = match self.normalization {
            Normalization::None => "already normalized".to_string(),
            Normalization::RightShift(k) => format!("overflow, shift right by {k}, exponent +{k}"),
            Normalization::LeftShift(k) => {
                format!("cancellation, shift left by {k}, exponent -{k}")
            }
        };
        writeln!(f, "3. normalization: {norm}")?;
        writeln!(f, "     significand {}", self.normalized)?;
        let decision = match self.decision {
            RoundDecision::Exact => "exact, no rounding".to_string(),
            RoundDecision::Down => "round down (truncate)".to_string(),
            RoundDecision::Up => "round up (add 1 to the last fraction bit)".to_string(),
            RoundDecision::TieToEven { up } => {
                format!("tie, resolved to even ({})", if up { "up" } else { "down" })
            }
        };
        writeln!(
            f,
            "4. rounding: round bit {}, sticky {} -> {}",
            self.round_bit as u8, self.sticky as u8, decision
        )?;
        writeln!(
            f,
            "result     {}  ({})",
            self.result.bit_string(),
            self.result.to_f64()
        )?;
        writeln!(f, "exact sum  {}", self.exact)?;
        write!(f, "error      {}", self.error)
    }
}

fn bit_len(x: u128) -> i32 {
    128 - x.leading_zeros() as i32
}

/// `x` in binary with a point after `point` fractional digits.
fn fixed_point(x: u128, point: i32, min_int_digits: usize) -> String {
    let digits = format!("{:b}", x);
    let point = point.max(0) as usize;
    let padded = if digits.len() < point + min_int_digits {
        format!(
            "{}{}",
            "0".repeat(point + min_int_digits - digits.len()),
            digits
        )
    } else {
        digits
    };
    let (int, frac) = padded.split_at(padded.len() - point);
    if frac.is_empty() {
        int.to_string()
    } else {
        format!("{int}.{frac}")
    }
}

/// Adds two operands and rounds the exact sum once to bfloat16.
pub fn add_to_b16(a: Operand, b: Operand) -> AdditionTrace {
    if a.is_special() || b.is_special() {
        let exact = a.to_f64() + b.to_f64();
        let result = super::b16::encode_b16(exact);
        return AdditionTrace {
            lhs: a,
            rhs: b,
            alignment_shift: 0,
            aligned_lhs: String::new(),
            aligned_rhs: String::new(),
            raw_sum: String::new(),
            normalization: Normalization::None,
            normalized: String::new(),
            kept_fraction: result.fraction_field(),
            round_bit: false,
            sticky: false,
            decision: RoundDecision::Exact,
            result,
            exact,
            error: if result.to_f64() == exact {
                0.0
            } else {
                f64::NAN
            },
        };
    }

    if a.is_zero() || b.is_zero() {
        return add_with_zero(a, b);
    }

    // Order by magnitude of the leading bit.
    let (big, small) = if a.top_exp() >= b.top_exp() {
        (a, b)
    } else {
        (b, a)
    };
    let mut small_eff = small;
    if big.top_exp() - small.top_exp() > STICKY_ONLY_DISTANCE {
        small_eff.significand = 1;
        small_eff.lsb_exp = big.lsb_exp - STICKY_ONLY_DISTANCE;
    }

    let e0 = big.lsb_exp.min(small_eff.lsb_exp);
    let big_int = (big.significand as u128) << (big.lsb_exp - e0);
    let small_int = (small_eff.significand as u128) << (small_eff.lsb_exp - e0);
    let alignment_shift = (big.top_exp() - small.top_exp()).max(0) as u32;

    let (sum, negative) = if big.negative == small.negative {
        (big_int + small_int, big.negative)
    } else if big_int >= small_int {
        (big_int - small_int, big.negative)
    } else {
        (small_int - big_int, small.negative)
    };

    let reference = big.top_exp() - e0;
    let a_is_big = a.top_exp() >= b.top_exp();
    let (a_int, b_int) = if a_is_big {
        (big_int, small_int)
    } else {
        (small_int, big_int)
    };
    let sign_char = |neg: bool| if neg { "-" } else { "+" };
    let aligned_lhs = format!(
        "{}{}",
        sign_char(a.negative),
        fixed_point(a_int, reference, 1)
    );
    let aligned_rhs = format!(
        "{}{}",
        sign_char(b.negative),
        fixed_point(b_int, reference, 1)
    );

    let exact = {
        let v = sum as f64 * 2f64.powi(e0);
        if negative {
            -v
        } else {
            v
        }
    };

    if sum == 0 {
        return AdditionTrace {
            lhs: a,
            rhs: b,
            alignment_shift,
            aligned_lhs,
            aligned_rhs,
            raw_sum: fixed_point(0, reference, 1),
            normalization: Normalization::None,
            normalized: "0".into(),
            kept_fraction: 0,
            round_bit: false,
            sticky: false,
            decision: RoundDecision::Exact,
            result: B16::ZERO,
            exact: 0.0,
            error: 0.0,
        };
    }

    let raw_sum = format!("{}{}", sign_char(negative), fixed_point(sum, reference, 1));
    let msb = bit_len(sum) - 1;
    let normalization = match msb.cmp(&reference) {
        std::cmp::Ordering::Greater => Normalization::RightShift((msb - reference) as u32),
        std::cmp::Ordering::Less => Normalization::LeftShift((reference - msb) as u32),
        std::cmp::Ordering::Equal => Normalization::None,
    };

    let frac_bits = FRACTION_BITS as i32;
    let lsb_out = (e0 + msb - frac_bits).max(MIN_EXP - frac_bits);
    let drop = lsb_out - e0;

    let (mut kept, round_bit, sticky) = if drop <= 0 {
        (sum << (-drop) as u32, false, false)
    } else {
        let d = drop as u32;
        let kept = sum >> d;
        let round_bit = (sum >> (d - 1)) & 1 == 1;
        let sticky = d >= 2 && sum & ((1u128 << (d - 1)) - 1) != 0;
        (kept, round_bit, sticky)
    };
    let kept_fraction = (kept & 0x7F) as u16;

    let normalized = {
        let all = format!("{:b}", sum);
        let lead = &all[..1];
        let rest = &all[1..];
        if rest.len() <= frac_bits as usize {
            format!("{lead}.{rest}")
        } else {
            let (frac, tail) = rest.split_at(frac_bits as usize);
            let (r, s) = tail.split_at(1);
            if s.is_empty() {
                format!("{lead}.{frac}|{r}")
            } else {
                format!("{lead}.{frac}|{r}|{s}")
            }
        }
    };

    let decision = if !round_bit && !sticky {
        RoundDecision::Exact
    } else if !round_bit {
        RoundDecision::Down
    } else if sticky {
        RoundDecision::Up
    } else {
        RoundDecision::TieToEven { up: kept & 1 == 1 }
    };
    let mut lsb = lsb_out;
    if decision.rounded_up() {
        kept += 1;
    }
    if kept == 1 << (frac_bits + 1) {
        kept >>= 1;
        lsb += 1;
    }

    let result = pack(negative, kept as u64, lsb);
    let error = result.to_f64() - exact;

    AdditionTrace {
        lhs: a,
        rhs: b,
        alignment_shift,
        aligned_lhs,
        aligned_rhs,
        raw_sum,
        normalization,
        normalized,
        kept_fraction,
        round_bit,
        sticky,
        decision,
        result,
        exact,
        error,
    }
}

/// Packs `kept * 2^lsb` (kept < 256) into a bf16 pattern.
fn pack(negative: bool, kept: u64, lsb: i32) -> B16 {
    let sign = if negative { 0x8000u16 } else { 0 };
    if kept < 128 {
        // subnormal: only reachable at the floor exponent
        return B16::from_bits(sign | kept as u16);
    }
    let biased = lsb + FRACTION_BITS as i32 + BIAS;
    if biased >= 255 {
        return B16::from_bits(sign | 0x7F80);
    }
    B16::from_bits(sign | ((biased as u16) << 7) | (kept as u16 - 128))
}

fn add_with_zero(a: Operand, b: Operand) -> AdditionTrace {
    let (nonzero, negative) = match (a.is_zero(), b.is_zero()) {
        (true, true) => (None, a.negative && b.negative),
        (true, false) => (Some(b), b.negative),
        (false, true) => (Some(a), a.negative),
        (false, false) => unreachable!(),
    };
    let exact = nonzero.map_or(if negative { -0.0 } else { 0.0 }, |op| op.to_f64());
    // A wider operand still has to be rounded once.
    let result = super::b16::encode_b16(exact);
    let decision = if result.to_f64() == exact {
        RoundDecision::Exact
    } else if result.to_f64().abs() > exact.abs() {
        RoundDecision::Up
    } else {
        RoundDecision::Down
    };
    AdditionTrace {
        lhs: a,
        rhs: b,
        alignment_shift: 0,
        aligned_lhs: String::new(),
        aligned_rhs: String::new(),
        raw_sum: String::new(),
        normalization: Normalization::None,
        normalized: String::new(),
        kept_fraction: result.fraction_field(),
        round_bit: false,
        sticky: false,
        decision,
        result,
        exact,
        error: result.to_f64() - exact,
    }
}
