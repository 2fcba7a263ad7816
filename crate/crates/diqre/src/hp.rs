//! Fixed 256-bit (about 77 significant digits) floating point for certification arithmetic.
//!
//! Solvers run in `f64`; every quantity that carries a security claim (constraint values,
//! dual bounds, rescaling factors, the running log-factor sum) is re-evaluated here.

use astro_float::{BigFloat, Consts, Radix, RoundingMode};
use std::cell::RefCell;
use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// Mantissa bits used for every operation.
pub const PREC: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

thread_local! {
    static CONSTS: RefCell<Consts> = RefCell::new(Consts::new().expect("astro-float constant cache"));
}

fn with_cc<T>(f: impl FnOnce(&mut Consts) -> T) -> T {
    CONSTS.with(|c| f(&mut c.borrow_mut()))
}

/// High-precision real number.
#[derive(Clone, Debug)]
pub struct Hp(BigFloat);

impl Hp {
    pub fn zero() -> Self {
        Hp(BigFloat::from_f64(0.0, PREC))
    }

    pub fn one() -> Self {
        Hp(BigFloat::from_f64(1.0, PREC))
    }

    /// Exact conversion: every `f64` is representable.
    pub fn from_f64(x: f64) -> Self {
        Hp(BigFloat::from_f64(x, PREC))
    }

    pub fn from_i64(x: i64) -> Self {
        Hp(BigFloat::from_i64(x, PREC))
    }

    pub fn from_u64(x: u64) -> Self {
        Hp(BigFloat::from_u64(x, PREC))
    }

    /// Parses a decimal string such as `0.0625`, `-1.5e-9` or `3`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        let ok = !t.is_empty()
            && t.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | 'e' | 'E' | '+' | '-'));
        if !ok {
            return Err(Error::Parameter(format!("not a decimal number: {s:?}")));
        }
        let v = with_cc(|cc| BigFloat::parse(t, Radix::Dec, PREC, RM, cc));
        if v.is_nan() || v.is_inf() {
            return Err(Error::Parameter(format!("not a decimal number: {s:?}")));
        }
        Ok(Hp(v))
    }

    pub fn ln(&self) -> Self {
        Hp(with_cc(|cc| self.0.ln(PREC, RM, cc)))
    }

    pub fn exp(&self) -> Self {
        Hp(with_cc(|cc| self.0.exp(PREC, RM, cc)))
    }

    pub fn sqrt(&self) -> Self {
        Hp(self.0.sqrt(PREC, RM))
    }

    /// `self^y` for `self >= 0`, with `0^y = 0` for `y > 0`.
    pub fn powf(&self, y: &Hp) -> Self {
        if self.is_zero() {
            return if y.is_zero() { Hp::one() } else { Hp::zero() };
        }
        (&self.ln() * y).exp()
    }

    pub fn ln2() -> Self {
        Hp::from_f64(2.0).ln()
    }

    pub fn log2(&self) -> Self {
        &self.ln() / &Hp::ln2()
    }

    pub fn abs(&self) -> Self {
        Hp(self.0.abs())
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_zero()
    }

    pub fn is_negative(&self) -> bool {
        self.0.is_negative() && !self.0.is_zero()
    }

    pub fn max(self, other: Hp) -> Hp {
        if other > self {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: Hp) -> Hp {
        if other < self {
            other
        } else {
            self
        }
    }

    /// Nearest `f64`.
    pub fn to_f64(&self) -> f64 {
        if self.is_zero() {
            return 0.0;
        }
        let s = with_cc(|cc| self.0.format(Radix::Dec, RM, cc)).unwrap_or_else(|_| "NaN".into());
        match s.as_str() {
            "Inf" => f64::INFINITY,
            "-Inf" => f64::NEG_INFINITY,
            _ => s.parse().unwrap_or(f64::NAN),
        }
    }

    /// Scientific notation truncated (toward zero) to `digits` significant digits.
    ///
    /// Truncation never increases magnitude, so a stored nonnegative factor is never
    /// made larger by serialization.
    pub fn to_sci(&self, digits: usize) -> String {
        if self.is_zero() {
            return "0".into();
        }
        let s = with_cc(|cc| self.0.format(Radix::Dec, RM, cc)).unwrap_or_else(|_| "NaN".into());
        let (neg, body) = match s.strip_prefix('-') {
            Some(b) => (true, b),
            None => (false, s.as_str()),
        };
        let (mant, exp) = match body.split_once('e') {
            Some((m, e)) => (m, e.parse::<i64>().unwrap_or(0)),
            None => (body, 0),
        };
        // Normalize to d.ddd with the exponent adjusted, whatever layout the formatter used.
        let (int_part, frac_part) = mant.split_once('.').unwrap_or((mant, ""));
        let all: String = format!("{int_part}{frac_part}");
        let lead = all.find(|c: char| c != '0');
        let Some(lead) = lead else { return "0".into() };
        let digits_str = &all[lead..];
        let e10 = exp + int_part.len() as i64 - 1 - lead as i64;
        let take = digits.max(1).min(digits_str.len());
        let d = &digits_str[..take];
        let tail = d[1..].trim_end_matches('0');
        let sign = if neg { "-" } else { "" };
        if tail.is_empty() {
            format!("{sign}{}e{e10}", &d[..1])
        } else {
            format!("{sign}{}.{tail}e{e10}", &d[..1])
        }
    }
}

impl fmt::Display for Hp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_sci(40))
    }
}

impl PartialEq for Hp {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl PartialOrd for Hp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.0.partial_cmp(&other.0)
    }
}

macro_rules! binop {
    ($tr:ident, $m:ident, $inner:ident) => {
        impl $tr<&Hp> for &Hp {
            type Output = Hp;
            fn $m(self, rhs: &Hp) -> Hp {
                Hp(self.0.$inner(&rhs.0, PREC, RM))
            }
        }
        impl $tr<Hp> for Hp {
            type Output = Hp;
            fn $m(self, rhs: Hp) -> Hp {
                Hp(self.0.$inner(&rhs.0, PREC, RM))
            }
        }
        impl $tr<&Hp> for Hp {
            type Output = Hp;
            fn $m(self, rhs: &Hp) -> Hp {
                Hp(self.0.$inner(&rhs.0, PREC, RM))
            }
        }
        impl $tr<Hp> for &Hp {
            type Output = Hp;
            fn $m(self, rhs: Hp) -> Hp {
                Hp(self.0.$inner(&rhs.0, PREC, RM))
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl Neg for Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(self.0.neg())
    }
}

impl Neg for &Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(self.0.clone().neg())
    }
}

impl AddAssign<&Hp> for Hp {
    fn add_assign(&mut self, rhs: &Hp) {
        self.0 = self.0.add(&rhs.0, PREC, RM);
    }
}

impl AddAssign<Hp> for Hp {
    fn add_assign(&mut self, rhs: Hp) {
        self.0 = self.0.add(&rhs.0, PREC, RM);
    }
}

impl Sum for Hp {
    fn sum<I: Iterator<Item = Hp>>(iter: I) -> Hp {
        iter.fold(Hp::zero(), |a, b| a + b)
    }
}

impl<'a> Sum<&'a Hp> for Hp {
    fn sum<I: Iterator<Item = &'a Hp>>(iter: I) -> Hp {
        iter.fold(Hp::zero(), |a, b| a + b)
    }
}

impl serde::Serialize for Hp {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_sci(45))
    }
}

impl<'de> serde::Deserialize<'de> for Hp {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Hp::parse(&s).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_format_round_trip() {
        let x = Hp::parse("0.92372918497532785497").unwrap();
        assert_eq!(x.to_sci(20), "9.2372918497532785497e-1");
        assert_eq!(Hp::parse(&x.to_sci(45)).unwrap().to_sci(20), x.to_sci(20));
        assert_eq!(Hp::from_f64(1500.0).to_sci(10), "1.5e3");
        assert_eq!(Hp::from_f64(-0.25).to_sci(10), "-2.5e-1");
        assert_eq!(Hp::zero().to_sci(5), "0");
    }

    #[test]
    fn rejects_garbage() {
        assert!(Hp::parse("abc").is_err());
        assert!(Hp::parse("").is_err());
    }

    #[test]
    fn truncation_never_rounds_up() {
        let x = Hp::parse("0.123456789").unwrap();
        assert_eq!(x.to_sci(3), "1.23e-1");
        let y = Hp::parse("0.99999").unwrap();
        assert!(Hp::parse(&y.to_sci(2)).unwrap() <= y);
    }

    #[test]
    fn elementary_functions() {
        let two = Hp::from_f64(2.0);
        assert!((two.ln().to_f64() - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((two.sqrt().to_f64() - std::f64::consts::SQRT_2).abs() < 1e-16);
        assert!((Hp::one().exp().to_f64() - std::f64::consts::E).abs() < 1e-15);
        assert_eq!(Hp::zero().powf(&Hp::from_f64(1e-6)), Hp::zero());
        assert_eq!(Hp::from_f64(8.0).log2().to_f64(), 3.0);
    }

    #[test]
    fn resolves_tiny_offsets_beyond_f64() {
        let eps = Hp::parse("1e-40").unwrap();
        let x = &Hp::one() + &eps;
        assert!(x > Hp::one());
        assert!(((&x - &Hp::one()) / eps).to_f64() - 1.0 < 1e-30);
        // ln(1 + 1e-40) = 1e-40 to working precision
        let l = x.ln();
        assert!((l.to_f64() / 1e-40 - 1.0).abs() < 1e-12);
    }
}
