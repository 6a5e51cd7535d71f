//! Scalar arithmetic on the three grids the lab works with: emulated
//! bfloat16, host IEEE-754 binary32, and `f64` as the reference.
//!
//! All accumulation runs in ascending index order. That order is part of
//! the contract: the rounding bias under study depends on which terms reach
//! the accumulator first.

mod adder;
mod b16;

use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adder::{add_to_b16, AdditionTrace, Normalization, Operand, RoundDecision};
pub use b16::{
    decode_b16, encode_b16, is_b16_exact, ulp_b16, B16, EXPONENT_BIAS, FRACTION_BITS, MAX_EXP,
    MIN_EXP,
};

/// The set of values an element is asserted to lie on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    B16,
    F32,
    F64,
}

impl Grid {
    /// Rounds to the nearest grid value, ties to even.
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Grid::B16 => decode_b16(encode_b16(x)),
            Grid::F32 => x as f32 as f64,
            Grid::F64 => x,
        }
    }

    #[inline]
    pub fn contains(self, x: f64) -> bool {
        x.is_nan() || self.round(x) == x
    }

    /// `self` is a subset of `other`.
    pub fn within(self, other: Grid) -> bool {
        self <= other
    }

    pub fn tag(self) -> u8 {
        match self {
            Grid::B16 => 0,
            Grid::F32 => 1,
            Grid::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Grid> {
        match tag {
            0 => Some(Grid::B16),
            1 => Some(Grid::F32),
            2 => Some(Grid::F64),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Grid::B16 => "b16",
            Grid::F32 => "f32",
            Grid::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Grid> {
        match s.to_ascii_lowercase().as_str() {
            "b16" | "bf16" => Some(Grid::B16),
            "f32" | "fp32" => Some(Grid::F32),
            "f64" | "fp64" => Some(Grid::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Grid::B16 => "B16",
            Grid::F32 => "F32",
            Grid::F64 => "F64",
        })
    }
}

/// Precision of one computation.
///
/// * `Lp`: f32 products and accumulation, result rounded once to bf16.
/// * `Hp`: f32 throughout.
/// * `Exact`: f64 reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Lp,
    Hp,
    Exact,
}

impl Precision {
    pub fn result_grid(self) -> Grid {
        match self {
            Precision::Lp => Grid::B16,
            Precision::Hp => Grid::F32,
            Precision::Exact => Grid::F64,
        }
    }

    /// Grid of the running accumulator.
    pub fn accumulator_grid(self) -> Grid {
        match self {
            Precision::Lp | Precision::Hp => Grid::F32,
            Precision::Exact => Grid::F64,
        }
    }

    /// Grid the operands of a product must lie on.
    pub fn operand_grid(self) -> Grid {
        match self {
            Precision::Lp => Grid::B16,
            Precision::Hp => Grid::F32,
            Precision::Exact => Grid::F64,
        }
    }

    /// The next precision up, never lower than `Hp`.
    pub fn promoted(self) -> Precision {
        match self {
            Precision::Lp | Precision::Hp => Precision::Hp,
            Precision::Exact => Precision::Exact,
        }
    }

    #[inline]
    pub fn mul(self, a: f64, b: f64) -> f64 {
        match self {
            Precision::Lp | Precision::Hp => (a as f32 * b as f32) as f64,
            Precision::Exact => a * b,
        }
    }

    #[inline]
    pub fn add(self, a: f64, b: f64) -> f64 {
        match self {
            Precision::Lp | Precision::Hp => (a as f32 + b as f32) as f64,
            Precision::Exact => a + b,
        }
    }

    #[inline]
    pub fn sub(self, a: f64, b: f64) -> f64 {
        match self {
            Precision::Lp | Precision::Hp => (a as f32 - b as f32) as f64,
            Precision::Exact => a - b,
        }
    }

    #[inline]
    pub fn div(self, a: f64, b: f64) -> f64 {
        match self {
            Precision::Lp | Precision::Hp => (a as f32 / b as f32) as f64,
            Precision::Exact => a / b,
        }
    }

    /// Rounds an accumulator value to the result grid.
    #[inline]
    pub fn finish(self, acc: f64) -> f64 {
        self.result_grid().round(acc)
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Lp => "lp",
            Precision::Hp => "hp",
            Precision::Exact => "exact",
        }
    }

    pub fn parse(s: &str) -> Option<Precision> {
        match s.to_ascii_lowercase().as_str() {
            "lp" => Some(Precision::Lp),
            "hp" => Some(Precision::Hp),
            "exact" => Some(Precision::Exact),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A running sum in a given precision.
///
/// Starts at `-0.0`, the additive identity for every IEEE value, so that a
/// fold split across tiles gives the same bits as one uninterrupted fold.
#[derive(Debug, Clone, Copy)]
pub struct Accum {
    precision: Precision,
    value: f64,
}

impl Accum {
    #[inline]
    pub fn new(precision: Precision) -> Self {
        Accum {
            precision,
            value: -0.0,
        }
    }

    #[inline]
    pub fn push(&mut self, x: f64) {
        self.value = self.precision.add(self.value, x);
    }

    #[inline]
    pub fn push_product(&mut self, a: f64, b: f64) {
        let p = self.precision.mul(a, b);
        self.push(p);
    }

    /// Multiplies the running value in accumulator precision (online-softmax rescale).
    #[inline]
    pub fn scale(&mut self, factor: f64) {
        self.value = self.precision.mul(self.value, factor);
    }

    /// Unrounded accumulator contents.
    #[inline]
    pub fn raw(&self) -> f64 {
        self.value
    }

    #[inline]
    pub fn finish(&self) -> f64 {
        self.precision.finish(self.value)
    }
}

/// Dot product of two `f64` slices under `precision`.
///
/// Operands are assumed to lie on `precision.operand_grid()` already.
#[inline]
pub fn dot_with(precision: Precision, a: &[f64], b: &[f64]) -> f64 {
    let mut acc = Accum::new(precision);
    for (&x, &y) in a.iter().zip(b) {
        acc.push_product(x, y);
    }
    acc.finish()
}

/// When the low-precision dot product rounds its running sum to bf16.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpRounding {
    /// f32 accumulation, a single rounding of the final sum.
    #[default]
    Final,
    /// The running sum is rounded to bf16 after every addition.
    EveryStep,
}

/// A single rounding of an exact (f32 or f64) value to bf16.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingEvent {
    pub position: usize,
    /// Value before rounding.
    pub exact: f64,
    pub rounded: B16,
    /// `decode(rounded) - exact`.
    pub error: f64,
    pub rounded_up: bool,
    /// The step that produced `exact` overflowed the significand and had to
    /// renormalize to a larger exponent.
    pub overflow_shift: bool,
}

impl RoundingEvent {
    pub fn of(position: usize, exact: f64, overflow_shift: bool) -> Self {
        let rounded = encode_b16(exact);
        let r = rounded.to_f64();
        RoundingEvent {
            position,
            exact,
            rounded,
            error: r - exact,
            rounded_up: exact != 0.0 && r.abs() > exact.abs(),
            overflow_shift,
        }
    }
}

/// Bit-level bf16 addition of two bf16 values.
pub fn add_b16_pair(a: B16, b: B16) -> (B16, RoundingEvent) {
    let trace = add_to_b16(Operand::from_b16(a), Operand::from_b16(b));
    let event = RoundingEvent {
        position: 0,
        exact: trace.exact,
        rounded: trace.result,
        error: trace.error,
        rounded_up: trace.rounded_up(),
        overflow_shift: trace.overflow_shift(),
    };
    (trace.result, event)
}

fn check_lengths(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { op, left, right });
    }
    if left == 0 {
        return Err(Error::Empty { op });
    }
    Ok(())
}

/// Low-precision dot product: f32 products, f32 ascending accumulation,
/// final sum rounded to bf16. Also returns the unrounded f32 sum.
pub fn dot_lp(p: &[B16], v: &[B16]) -> Result<(B16, f64)> {
    dot_lp_with(p, v, LpRounding::Final)
}

pub fn dot_lp_with(p: &[B16], v: &[B16], rounding: LpRounding) -> Result<(B16, f64)> {
    check_lengths("dot_lp", p.len(), v.len())?;
    let mut acc = -0.0f32;
    for (a, b) in p.iter().zip(v) {
        acc += a.to_f32() * b.to_f32();
        if rounding == LpRounding::EveryStep {
            acc = encode_b16(acc as f64).to_f32();
        }
    }
    Ok((encode_b16(acc as f64), acc as f64))
}

/// High-precision dot product: f32 throughout, no final rounding.
pub fn dot_hp(p: &[f32], v: &[f32]) -> Result<f32> {
    check_lengths("dot_hp", p.len(), v.len())?;
    Ok(p.iter().zip(v).fold(-0.0f32, |acc, (a, b)| acc + a * b))
}

fn f32_exponent(x: f32) -> u32 {
    (x.to_bits() >> 23) & 0xFF
}

/// Rounding error of every prefix of the low-precision dot product.
///
/// Entry `t` compares the bf16 rounding of the f32 prefix sum over terms
/// `0..=t` against the prefix itself.
pub fn prefix_error_trace(p: &[B16], v: &[B16]) -> Result<Vec<RoundingEvent>> {
    check_lengths("prefix_error_trace", p.len(), v.len())?;
    let mut acc = -0.0f32;
    let mut out = Vec::with_capacity(p.len());
    for (t, (a, b)) in p.iter().zip(v).enumerate() {
        let term = a.to_f32() * b.to_f32();
        let next = acc + term;
        let same_sign =
            acc != 0.0 && term != 0.0 && acc.is_sign_negative() == term.is_sign_negative();
        let overflow = same_sign && f32_exponent(next) > f32_exponent(acc).max(f32_exponent(term));
        acc = next;
        out.push(RoundingEvent::of(t, acc as f64, overflow));
    }
    Ok(out)
}

/// The single addition behind the bias walkthrough.
///
/// The f32 running sum `1·(−2.40625) + 0.515625·(−55·2⁻¹⁵) = −2.4071154594421387`
/// receives the bf16 term `−2.296875`; the significand sum overflows, the
/// shifted-out bit is 1 and the residual of the second token sets the sticky
/// bit, so the result rounds away from zero. Without the residual the same
/// addition is an exact tie and rounds to even.
pub fn worked_example(with_residual: bool) -> AdditionTrace {
    let first = B16::from_fields(true, 128, 0b0011010);
    let acc = if with_residual {
        let tiny = B16::from_f64(-55.0 * 2f64.powi(-15));
        Operand::from_f32(first.to_f32() + B16::from_f64(0.515625).to_f32() * tiny.to_f32())
    } else {
        Operand::from_b16(first)
    };
    add_to_b16(
        acc,
        Operand::from_b16(B16::from_fields(true, 128, 0b0010011)),
    )
}

/// One entry of the two-bit overflow table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingBitEntry {
    pub lhs: u8,
    pub rhs: u8,
    /// Significand bits that survive the normalizing right shift.
    pub kept: u8,
    /// The bit shifted out.
    pub rounding_bit: u8,
}

impl fmt::Display for RoundingBitEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02b} + {:02b} = {:b}|{}",
            self.lhs, self.rhs, self.kept, self.rounding_bit
        )
    }
}

/// All unordered additions of two trailing 2-bit groups, with the rounding
/// bit that the overflow shift pushes out.
///
/// Each entry is produced by the bit-level adder on two negative bf16 values
/// `-1.00000ab` sharing an exponent, so the significand sum always overflows.
pub fn rounding_bit_table() -> Vec<RoundingBitEntry> {
    let mut table = Vec::with_capacity(10);
    for lhs in 0u8..4 {
        for rhs in lhs..4 {
            let a = B16::from_fields(true, 127, lhs as u16);
            let b = B16::from_fields(true, 127, rhs as u16);
            let trace = add_to_b16(Operand::from_b16(a), Operand::from_b16(b));
            debug_assert!(trace.overflow_shift());
            // sum of significands before the shift: 2^8 + lhs + rhs
            let digits: String = trace
                .raw_sum
                .chars()
                .filter(|c| *c == '0' || *c == '1')
                .collect();
            let sum = u32::from_str_radix(&digits, 2).expect("binary digits") - 256;
            table.push(RoundingBitEntry {
                lhs,
                rhs,
                kept: (sum >> 1) as u8,
                rounding_bit: trace.round_bit as u8,
            });
        }
    }
    table
}

/// Checks that host `f32` arithmetic is IEEE-754 binary32 with round to
/// nearest, ties to even, and gradual underflow.
pub fn fp32_conformance() -> Result<()> {
    fn check(name: &str, got: f32, want_bits: u32) -> Result<()> {
        if got.to_bits() == want_bits {
            Ok(())
        } else {
            Err(Error::Conformance(format!(
                "{name}: got {:#010x}, expected {:#010x}",
                got.to_bits(),
                want_bits
            )))
        }
    }
    use std::hint::black_box as bb;
    let one = bb(1.0f32);
    let half_ulp = bb(f32::EPSILON / 2.0);
    check("tie rounds to even (down)", one + half_ulp, 0x3F80_0000)?;
    check(
        "tie rounds to even (up)",
        bb(1.0 + f32::EPSILON) + half_ulp,
        0x3F80_0002,
    )?;
    check(
        "above half rounds up",
        one + bb(half_ulp * 1.5),
        0x3F80_0001,
    )?;
    check("0.1 + 0.2", bb(0.1f32) + bb(0.2f32), 0x3E99_999A)?;
    check(
        "subnormal halving",
        bb(f32::MIN_POSITIVE) / bb(2.0),
        0x0040_0000,
    )?;
    check(
        "smallest subnormal",
        bb(f32::from_bits(1)) * bb(1.0),
        0x0000_0001,
    )?;
    check(
        "product rounding",
        bb(1.0f32 / 3.0) * bb(3.0f32),
        0x3F80_0000,
    )?;
    check("negative tie", -one - half_ulp, 0xBF80_0000)?;
    check(
        "f64 to f32 tie",
        bb(1.0f64 + 2f64.powi(-24)) as f32,
        0x3F80_0000,
    )?;
    Ok(())
}

/// Runs [`fp32_conformance`] once per process.
pub fn ensure_fp32_conformance() -> Result<()> {
    static RESULT: OnceLock<std::result::Result<(), String>> = OnceLock::new();
    RESULT
        .get_or_init(|| fp32_conformance().map_err(|e| e.to_string()))
        .clone()
        .map_err(Error::Conformance)
}
