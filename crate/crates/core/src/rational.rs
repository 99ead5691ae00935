//! Exact rational helpers on top of `num::BigRational`.
//!
//! Every mass and every martingale value in the crate is a `Rational`. The
//! wire format is the string `"a/b"` (or a bare integer `"a"`), always in
//! lowest terms with a positive denominator.

use num::bigint::{BigInt, BigUint};
use num::{One, Signed, ToPrimitive, Zero};

use crate::error::{Error, Result};

pub type Rational = num::BigRational;

/// Parses `"a/b"`, `"-a/b"` or `"a"`. Rejects zero or negative denominators.
pub fn parse(text: &str) -> Result<Rational> {
    let text = text.trim();
    let bad = || Error::Parse(format!("malformed rational {text:?}"));
    let (num, den) = match text.split_once('/') {
        Some((n, d)) => (n.trim(), d.trim()),
        None => (text, "1"),
    };
    let num: BigInt = num.parse().map_err(|_| bad())?;
    let den: BigInt = den.parse().map_err(|_| bad())?;
    if !den.is_positive() {
        return Err(Error::Parse(format!(
            "rational {text:?} must have a positive denominator"
        )));
    }
    Ok(Rational::new(num, den))
}

/// Formats as `"a/b"`, or `"a"` when the denominator is one.
pub fn format(value: &Rational) -> String {
    if value.denom().is_one() {
        value.numer().to_string()
    } else {
        format!("{}/{}", value.numer(), value.denom())
    }
}

pub fn int(n: i64) -> Rational {
    Rational::from_integer(BigInt::from(n))
}

pub fn ratio(n: i64, d: i64) -> Rational {
    Rational::new(BigInt::from(n), BigInt::from(d))
}

/// `2^{-k}`.
pub fn pow2_neg(k: u32) -> Rational {
    Rational::new(BigInt::one(), BigInt::one() << k as usize)
}

pub fn pow(value: &Rational, exp: u32) -> Rational {
    num::pow::pow(value.clone(), exp as usize)
}

pub fn min(a: &Rational, b: &Rational) -> Rational {
    if a <= b {
        a.clone()
    } else {
        b.clone()
    }
}

pub fn max(a: &Rational, b: &Rational) -> Rational {
    if a >= b {
        a.clone()
    } else {
        b.clone()
    }
}

/// `max(x, 0)`.
pub fn positive_part(value: &Rational) -> Rational {
    if value.is_positive() {
        value.clone()
    } else {
        Rational::zero()
    }
}

/// Nearest `f64`, for display only. Huge numerators/denominators are scaled
/// down by their bit lengths first so the result does not overflow to NaN.
pub fn to_f64(value: &Rational) -> f64 {
    if let Some(v) = value.to_f64() {
        if v.is_finite() && (v != 0.0 || value.is_zero()) {
            return v;
        }
    }
    let num_bits = value.numer().bits() as i64;
    let den_bits = value.denom().bits() as i64;
    let shift_n = (num_bits - 60).max(0) as usize;
    let shift_d = (den_bits - 60).max(0) as usize;
    let n = (value.numer().abs() >> shift_n).to_f64().unwrap_or(0.0);
    let d = (value.denom() >> shift_d).to_f64().unwrap_or(1.0);
    let mag = n / d * 2f64.powi((shift_n as i64 - shift_d as i64) as i32);
    if value.is_negative() {
        -mag
    } else {
        mag
    }
}

/// Decimal rendering with a fixed number of digits after the point,
/// truncated toward zero. Used for tagged approximate output.
pub fn to_decimal(value: &Rational, digits: usize) -> String {
    let scale = BigInt::from(10u32).pow(digits as u32);
    let scaled = (value.abs() * Rational::from_integer(scale.clone())).to_integer();
    let int_part = &scaled / &scale;
    let frac_part = &scaled % &scale;
    let sign = if value.is_negative() && !scaled.is_zero() {
        "-"
    } else {
        ""
    };
    if digits == 0 {
        format!("{sign}{int_part}")
    } else {
        format!("{sign}{int_part}.{:0>width$}", frac_part.to_string(), width = digits)
    }
}

/// Uniform integer in `[0, bound)` drawn by rejection on raw bits, so the
/// law is exact for any bound.
pub fn uniform_below<R: rand::RngCore>(rng: &mut R, bound: &BigUint) -> BigUint {
    assert!(!bound.is_zero(), "empty range");
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64 * 8 - bits) as u32;
    loop {
        let mut buf = vec![0u8; bytes];
        rng.fill_bytes(&mut buf);
        if excess > 0 {
            buf[0] &= 0xffu8 >> excess;
        }
        let candidate = BigUint::from_bytes_be(&buf);
        if &candidate < bound {
            return candidate;
        }
    }
}

/// Numerator of a non-negative rational as an unsigned integer.
pub(crate) fn numer_unsigned(value: &Rational) -> BigUint {
    match value.numer().to_biguint() {
        Some(n) => n,
        None => BigUint::zero(),
    }
}

pub(crate) fn denom_unsigned(value: &Rational) -> BigUint {
    value
        .denom()
        .to_biguint()
        .unwrap_or_else(|| BigUint::one())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format() {
        assert_eq!(parse("2/4").unwrap(), ratio(1, 2));
        assert_eq!(parse("-3").unwrap(), int(-3));
        assert_eq!(format(&ratio(-6, 4)), "-3/2");
        assert_eq!(format(&int(7)), "7");
        assert!(matches!(parse("3/0"), Err(Error::Parse(_))));
        assert!(matches!(parse("1/-2"), Err(Error::Parse(_))));
        assert!(matches!(parse("x/2"), Err(Error::Parse(_))));
    }

    #[test]
    fn decimal_rendering() {
        assert_eq!(to_decimal(&ratio(1, 3), 4), "0.3333");
        assert_eq!(to_decimal(&ratio(-5, 4), 2), "-1.25");
        assert_eq!(to_decimal(&int(2), 0), "2");
    }

    #[test]
    fn tiny_values_do_not_collapse() {
        let tiny = pow2_neg(2000);
        let approx = to_f64(&(tiny * int(3)));
        assert!(approx == 0.0 || approx.is_finite());
        let big = Rational::from_integer(BigInt::one() << 3000usize);
        assert!(to_f64(&big).is_infinite() || to_f64(&big) > 1e300);
    }

    #[test]
    fn uniform_below_stays_in_range() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let bound = BigUint::from(3u32);
        for _ in 0..200 {
            assert!(uniform_below(&mut rng, &bound) < bound);
        }
    }
}
