//! Exact rational arithmetic helpers.
//!
//! Byte counts and FLOPs are computed as `u128` rationals and only floored at
//! the reporting boundary.

use num_rational::Ratio;
use num_traits::{CheckedAdd, CheckedMul, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Exact = Ratio<u128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("arithmetic overflow")]
pub struct Overflow;

/// Product of all factors, or `Overflow`.
pub fn product(factors: &[u64]) -> Result<u128, Overflow> {
    factors
        .iter()
        .try_fold(1u128, |acc, &f| acc.checked_mul(u128::from(f)))
        .ok_or(Overflow)
}

pub fn mul(a: &Exact, b: &Exact) -> Result<Exact, Overflow> {
    a.checked_mul(b).ok_or(Overflow)
}

pub fn add(a: &Exact, b: &Exact) -> Result<Exact, Overflow> {
    a.checked_add(b).ok_or(Overflow)
}

pub fn scale(a: &Exact, k: u64) -> Result<Exact, Overflow> {
    mul(a, &Exact::from_integer(u128::from(k)))
}

/// Floors `value` into a `u64`.
pub fn floor_u64(value: &Exact) -> Result<u64, Overflow> {
    u64::try_from(value.to_integer()).map_err(|_| Overflow)
}

/// Ceiling into a `u64`.
pub fn ceil_u64(value: &Exact) -> Result<u64, Overflow> {
    u64::try_from(value.ceil().to_integer()).map_err(|_| Overflow)
}

pub fn to_f64(value: &Exact) -> f64 {
    if value.is_zero() {
        return 0.0;
    }
    value.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("`{0}` is not a non-negative decimal number")]
pub struct DecimalParseError(pub String);

/// Parses a plain decimal such as `13.75` into an exact rational.
pub fn parse_decimal(text: &str) -> Result<Exact, DecimalParseError> {
    let err = || DecimalParseError(text.to_owned());
    let t = text.trim();
    let (int_part, frac_part) = match t.split_once('.') {
        Some((i, f)) => (i, f),
        None => (t, ""),
    };
    if int_part.is_empty() && frac_part.is_empty() {
        return Err(err());
    }
    let all_digits = |s: &str| s.bytes().all(|c| c.is_ascii_digit());
    if !all_digits(int_part) || !all_digits(frac_part) || frac_part.len() > 30 {
        return Err(err());
    }
    let digits = format!("{int_part}{frac_part}");
    let numer: u128 = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
    let denom = 10u128.checked_pow(frac_part.len() as u32).ok_or_else(err)?;
    Ok(Exact::new(numer, denom))
}

/// JSON form of an exact rational: numerator, denominator and a float for convenience.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RationalValue {
    pub numer: u128,
    pub denom: u128,
    pub value: f64,
}

impl From<&Exact> for RationalValue {
    fn from(r: &Exact) -> Self {
        Self { numer: *r.numer(), denom: *r.denom(), value: to_f64(r) }
    }
}

impl From<Exact> for RationalValue {
    fn from(r: Exact) -> Self {
        Self::from(&r)
    }
}
