//! Software emulation of IEEE 754 binary16.
//!
//! Values are carried as raw bit patterns ([`Fp16Bits`]). Every arithmetic
//! primitive decodes its operands to `f64`, performs the operation there and
//! rounds the result back with round-to-nearest-even. For binary16 operands
//! this is exact: `f64` carries more than twice the significand bits plus two,
//! so the intermediate rounding of add/mul/div/sqrt can never change the final
//! binary16 result.
//!
//! Subnormals are produced and consumed, never flushed. Every NaN produced by
//! this module is the canonical quiet pattern `0x7E00`.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum Fp16Error {
    #[error("empty vector")]
    EmptyVector,
    #[error("expected a rank-1 tensor, got shape {0:?}")]
    NotRank1(Vec<usize>),
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
}

const SIGN_MASK: u16 = 0x8000;
const EXP_MASK: u16 = 0x7C00;
const MANT_MASK: u16 = 0x03FF;

/// A binary16 value stored as its bit pattern (1 sign, 5 exponent, 10 mantissa bits).
#[repr(transparent)]
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct Fp16Bits(pub u16);

impl Fp16Bits {
    pub const ZERO: Self = Self(0x0000);
    pub const NEG_ZERO: Self = Self(0x8000);
    pub const ONE: Self = Self(0x3C00);
    pub const INFINITY: Self = Self(0x7C00);
    pub const NEG_INFINITY: Self = Self(0xFC00);
    pub const NAN: Self = Self(0x7E00);
    /// 65504.
    pub const MAX: Self = Self(0x7BFF);
    /// 2^-14.
    pub const MIN_POSITIVE_NORMAL: Self = Self(0x0400);
    /// 2^-24.
    pub const MIN_POSITIVE_SUBNORMAL: Self = Self(0x0001);

    pub const MAX_VALUE: f64 = 65504.0;
    pub const MIN_NORMAL_VALUE: f64 = 6.103515625e-5;
    pub const MIN_SUBNORMAL_VALUE: f64 = 5.960464477539063e-8;

    #[inline]
    pub fn from_f64(x: f64) -> Self {
        encode(x)
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        decode(self)
    }

    #[inline]
    pub fn is_nan(self) -> bool {
        self.0 & EXP_MASK == EXP_MASK && self.0 & MANT_MASK != 0
    }

    #[inline]
    pub fn is_infinite(self) -> bool {
        self.0 & !SIGN_MASK == EXP_MASK
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.0 & EXP_MASK != EXP_MASK
    }

    #[inline]
    pub fn is_zero(self) -> bool {
        self.0 & !SIGN_MASK == 0
    }

    #[inline]
    pub fn is_subnormal(self) -> bool {
        self.0 & EXP_MASK == 0 && self.0 & MANT_MASK != 0
    }

    #[inline]
    pub fn is_sign_negative(self) -> bool {
        self.0 & SIGN_MASK != 0
    }
}

impl fmt::Debug for Fp16Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp16Bits({:#06x} = {})", self.0, decode(*self))
    }
}

impl fmt::Display for Fp16Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&decode(*self), f)
    }
}

/// Shift `m` right by `shift` bits, rounding to nearest with ties to even.
#[inline]
fn shift_right_rne(m: u64, shift: u32) -> u64 {
    if shift == 0 {
        return m;
    }
    if shift >= 64 {
        // m < 2^53 so the discarded value is below one half.
        return 0;
    }
    let q = m >> shift;
    let rem = m & ((1u64 << shift) - 1);
    let half = 1u64 << (shift - 1);
    if rem > half || (rem == half && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Round a double to the nearest binary16, ties to even.
pub fn encode(x: f64) -> Fp16Bits {
    if x.is_nan() {
        return Fp16Bits::NAN;
    }
    let bits = x.to_bits();
    let sign = ((bits >> 48) as u16) & SIGN_MASK;
    let biased = ((bits >> 52) & 0x7FF) as i32;
    let frac = bits & ((1u64 << 52) - 1);

    if biased == 0x7FF {
        return Fp16Bits(sign | EXP_MASK);
    }
    if biased == 0 {
        // f64 zero or subnormal: far below 2^-25, rounds to a signed zero.
        return Fp16Bits(sign);
    }

    let exp = biased - 1023;
    if exp > 15 {
        return Fp16Bits(sign | EXP_MASK);
    }
    let sig = frac | (1u64 << 52);

    if exp >= -14 {
        // Normal target: keep 11 significant bits.
        let rounded = shift_right_rne(sig, 42);
        // A carry out of the significand bumps the exponent; 0x7C00 is infinity.
        let mag = (((exp + 15) as u64) << 10) + rounded - (1 << 10);
        if mag >= EXP_MASK as u64 {
            return Fp16Bits(sign | EXP_MASK);
        }
        return Fp16Bits(sign | mag as u16);
    }

    // Subnormal target, in units of 2^-24: value = sig * 2^(exp - 52).
    let shift = (28 - exp) as u32;
    let units = shift_right_rne(sig, shift);
    // units may reach 0x400, which is exactly the smallest normal pattern.
    Fp16Bits(sign | units as u16)
}

/// Exact value of a binary16 pattern.
pub fn decode(b: Fp16Bits) -> f64 {
    let sign = if b.0 & SIGN_MASK != 0 { -1.0 } else { 1.0 };
    let exp = ((b.0 & EXP_MASK) >> 10) as i32;
    let mant = (b.0 & MANT_MASK) as f64;
    match exp {
        0 => sign * mant * 2f64.powi(-24),
        31 if mant == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1.0 + mant / 1024.0) * 2f64.powi(exp - 15),
    }
}

/// Round a double through binary16 and back.
#[inline]
pub fn round_trip(x: f64) -> f64 {
    decode(encode(x))
}

#[inline]
pub fn add(a: Fp16Bits, b: Fp16Bits) -> Fp16Bits {
    encode(decode(a) + decode(b))
}

#[inline]
pub fn sub(a: Fp16Bits, b: Fp16Bits) -> Fp16Bits {
    encode(decode(a) - decode(b))
}

#[inline]
pub fn mul(a: Fp16Bits, b: Fp16Bits) -> Fp16Bits {
    encode(decode(a) * decode(b))
}

#[inline]
pub fn div(a: Fp16Bits, b: Fp16Bits) -> Fp16Bits {
    encode(decode(a) / decode(b))
}

#[inline]
pub fn sqrt(a: Fp16Bits) -> Fp16Bits {
    encode(decode(a).sqrt())
}

/// Dense row-major tensor of binary16 values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fp16Tensor {
    shape: Vec<usize>,
    data: Vec<Fp16Bits>,
}

impl Fp16Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Fp16Bits>) -> Result<Self, Fp16Error> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Fp16Error::ShapeMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Rank-1 tensor rounded from doubles.
    pub fn from_f64_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.iter().copied().map(encode).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Fp16Bits] {
        &self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().copied().map(decode).collect()
    }
}

/// Result of a sequential binary16 sum of squares.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccumulationTrace {
    pub final_sum: Fp16Bits,
    /// The emulated sum ended as infinity or NaN.
    pub overflowed: bool,
    /// Every square rounded to zero although some input was nonzero.
    pub underflowed_to_zero: bool,
    /// Largest exact (double precision) partial sum. Reporting only.
    pub max_partial: f64,
    /// Exact (double precision) sum of the squares of the inputs.
    pub exact_sum: f64,
    pub count: usize,
}

/// Sum of squares of a rank-1 tensor, accumulated left to right in binary16.
pub fn accumulate_sum_of_squares(v: &Fp16Tensor) -> Result<AccumulationTrace, Fp16Error> {
    if v.shape.len() != 1 {
        return Err(Fp16Error::NotRank1(v.shape.clone()));
    }
    accumulate_squares(&v.data)
}

/// Slice form of [`accumulate_sum_of_squares`].
///
/// Each step is `s = add(s, mul(v, v))` with both operations rounded; there
/// is no fused multiply-add.
pub fn accumulate_squares(values: &[Fp16Bits]) -> Result<AccumulationTrace, Fp16Error> {
    if values.is_empty() {
        return Err(Fp16Error::EmptyVector);
    }
    let mut sum = Fp16Bits::ZERO;
    let mut exact = 0.0f64;
    let mut max_partial = 0.0f64;
    let mut any_nonzero = false;
    let mut any_square_nonzero = false;
    for &v in values {
        let sq = mul(v, v);
        any_nonzero |= !v.is_zero();
        any_square_nonzero |= !sq.is_zero();
        sum = add(sum, sq);

        let x = decode(v);
        exact += x * x;
        if exact > max_partial || exact.is_nan() {
            max_partial = exact;
        }
    }
    Ok(AccumulationTrace {
        final_sum: sum,
        overflowed: sum.is_infinite() || sum.is_nan(),
        underflowed_to_zero: any_nonzero && !any_square_nonzero,
        max_partial,
        exact_sum: exact,
        count: values.len(),
    })
}
