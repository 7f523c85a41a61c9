//! Signed 124-bit binary fixed point.
//!
//! Orbits of circle maps live on `[0, 1)` once the integer winding is carried
//! separately, so an absolute-precision format is a natural fit: every
//! operation is a handful of 64-bit multiplies and `sin`/`cos` of a turn
//! fraction is a table lookup followed by a short Taylor polynomial. This is
//! the engine behind [`Precision::Ext`](crate::real::Precision::Ext); it is
//! roughly thirty times faster than an MPFR evaluation at comparable width.
//!
//! The representable range is `[-8, 8)` with resolution `2^-124`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::sync::OnceLock;

use rug::float::{Constant, Round};
use rug::ops::Pow;
use rug::{Float, Integer};

/// Number of fractional bits.
pub const FRAC_BITS: u32 = 124;
const ONE_RAW: i128 = 1 << FRAC_BITS;
const FRAC_MASK: i128 = ONE_RAW - 1;
const MASK64: u128 = u64::MAX as u128;

const TABLE_BITS: u32 = 10;
const TABLE_SHIFT: u32 = FRAC_BITS - TABLE_BITS;
const REM_MASK: i128 = (1 << TABLE_SHIFT) - 1;

/// Working precision of the MPFR values used to seed constants and to convert
/// to and from decimal.
const SEED_PREC: u32 = 200;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fx(i128);

struct Tables {
    two_pi: i128,
    inv_two_pi: i128,
    sin_cos: Vec<(i128, i128)>,
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let two_pi = Float::with_val(SEED_PREC, Constant::Pi) * 2u32;
        let inv = Float::with_val(SEED_PREC, 1u32) / &two_pi;
        let n = 1usize << TABLE_BITS;
        let sin_cos = (0..n)
            .map(|k| {
                let angle = Float::with_val(SEED_PREC, &two_pi * k as u32) / n as u32;
                let (s, c) = angle.sin_cos(Float::new(SEED_PREC));
                (float_to_raw(&s).unwrap(), float_to_raw(&c).unwrap())
            })
            .collect();
        Tables {
            two_pi: float_to_raw(&two_pi).unwrap(),
            inv_two_pi: float_to_raw(&inv).unwrap(),
            sin_cos,
        }
    })
}

fn float_to_raw(v: &Float) -> Option<i128> {
    let scaled = Float::with_val(v.prec().max(SEED_PREC), v << FRAC_BITS);
    let (int, _) = scaled.to_integer_round(Round::Nearest)?;
    int.to_i128()
}

// Inverse factorials 1/n! in raw form.
const fn inv_fact(n: u32) -> i128 {
    let mut f: i128 = 1;
    let mut k = 2;
    while k <= n {
        f *= k as i128;
        k += 1;
    }
    ONE_RAW / f
}

const SIN_COEFFS: [i128; 6] = [
    ONE_RAW,
    -inv_fact(3),
    inv_fact(5),
    -inv_fact(7),
    inv_fact(9),
    -inv_fact(11),
];
const COS_COEFFS: [i128; 7] = [
    ONE_RAW,
    -inv_fact(2),
    inv_fact(4),
    -inv_fact(6),
    inv_fact(8),
    -inv_fact(10),
    inv_fact(12),
];

#[inline]
fn mul_raw(a: i128, b: i128) -> i128 {
    let neg = (a < 0) != (b < 0);
    let (ua, ub) = (a.unsigned_abs(), b.unsigned_abs());
    let (a1, a0) = (ua >> 64, ua & MASK64);
    let (b1, b0) = (ub >> 64, ub & MASK64);
    let ll = a0 * b0;
    let lh = a0 * b1;
    let hl = a1 * b0;
    let hh = a1 * b1;
    let mid = (ll >> 64) + (lh & MASK64) + (hl & MASK64);
    let lo = (ll & MASK64) | ((mid & MASK64) << 64);
    let hi = hh + (lh >> 64) + (hl >> 64) + (mid >> 64);
    debug_assert!(hi >> (FRAC_BITS - 1) == 0, "fixed-point product out of range");
    let mag = ((hi << (128 - FRAC_BITS)) | (lo >> FRAC_BITS)) + ((lo >> (FRAC_BITS - 1)) & 1);
    if neg {
        -(mag as i128)
    } else {
        mag as i128
    }
}

#[inline]
fn horner(coeffs: &[i128], t2: i128) -> i128 {
    let mut acc = *coeffs.last().unwrap();
    for &c in coeffs.iter().rev().skip(1) {
        acc = c + mul_raw(acc, t2);
    }
    acc
}

impl Fx {
    pub const ZERO: Fx = Fx(0);
    pub const ONE: Fx = Fx(ONE_RAW);
    /// Smallest positive increment, `2^-124`.
    pub const ULP: Fx = Fx(1);
    pub const MAX: Fx = Fx(i128::MAX);

    pub const fn from_raw(raw: i128) -> Self {
        Fx(raw)
    }

    pub const fn raw(self) -> i128 {
        self.0
    }

    pub fn from_int(n: i64) -> Self {
        assert!((-8..8).contains(&n), "integer {n} outside fixed-point range");
        Fx((n as i128) << FRAC_BITS)
    }

    /// Exact conversion (values below `2^-71` lose their trailing bits).
    pub fn from_f64(v: f64) -> Self {
        assert!(v.is_finite() && v.abs() < 8.0, "{v} outside fixed-point range");
        Fx((v * 2f64.powi(FRAC_BITS as i32)) as i128)
    }

    pub fn to_f64(self) -> f64 {
        self.0 as f64 * 2f64.powi(-(FRAC_BITS as i32))
    }

    pub fn two_pi() -> Self {
        Fx(tables().two_pi)
    }

    pub fn inv_two_pi() -> Self {
        Fx(tables().inv_two_pi)
    }

    /// Integer part (floor) and fractional part in `[0, 1)`.
    #[inline]
    pub fn floor_split(self) -> (i64, Fx) {
        ((self.0 >> FRAC_BITS) as i64, Fx(self.0 & FRAC_MASK))
    }

    #[inline]
    pub fn mul_int(self, k: i64) -> Fx {
        Fx(self.0 * k as i128)
    }

    #[inline]
    pub fn half(self) -> Fx {
        Fx(self.0 >> 1)
    }

    pub fn abs(self) -> Fx {
        Fx(self.0.abs())
    }

    /// `(sin 2πx, cos 2πx)`.
    #[inline]
    pub fn sin_cos_turns(self) -> (Fx, Fx) {
        let tab = tables();
        let f = self.0 & FRAC_MASK;
        let (sa, ca) = tab.sin_cos[(f >> TABLE_SHIFT) as usize];
        let t = mul_raw(f & REM_MASK, tab.two_pi);
        let t2 = mul_raw(t, t);
        let st = mul_raw(t, horner(&SIN_COEFFS, t2));
        let ct = horner(&COS_COEFFS, t2);
        (
            Fx(mul_raw(sa, ct) + mul_raw(ca, st)),
            Fx(mul_raw(ca, ct) - mul_raw(sa, st)),
        )
    }

    /// Exact division, rounded to nearest. Slow; not for inner loops.
    pub fn div(self, rhs: Fx) -> Fx {
        assert!(rhs.0 != 0, "fixed-point division by zero");
        let num = Integer::from(self.0) << FRAC_BITS;
        let (q, _) = num.div_rem_round(Integer::from(rhs.0));
        Fx(q.to_i128().expect("fixed-point quotient out of range"))
    }

    pub fn to_float(self, prec: u32) -> Float {
        Float::with_val(prec.max(128), Integer::from(self.0)) >> FRAC_BITS
    }

    pub fn from_float(v: &Float) -> Option<Fx> {
        if !v.is_finite() || v.clone().abs() >= 8 {
            return None;
        }
        float_to_raw(v).map(Fx)
    }

    /// Parses a decimal literal, rounding to the nearest representable value.
    pub fn parse_decimal(s: &str) -> Option<Fx> {
        let parsed = Float::parse(s.trim()).ok()?;
        let v = Float::with_val(SEED_PREC, parsed);
        Fx::from_float(&v)
    }

    /// Decimal rendering with 38 fractional digits (trailing zeros trimmed);
    /// `parse_decimal` inverts it exactly.
    pub fn to_decimal(self) -> String {
        let neg = self.0 < 0;
        let mag = Integer::from(self.0.unsigned_abs());
        let scale = Integer::from(10u32).pow(38);
        let num = mag * &scale;
        let (q, _) = num.div_rem_round(Integer::from(1u8) << FRAC_BITS);
        let (int, frac) = q.div_rem(scale);
        let mut digits = format!("{:0>38}", frac.to_string());
        while digits.ends_with('0') && digits.len() > 1 {
            digits.pop();
        }
        format!("{}{}.{}", if neg { "-" } else { "" }, int, digits)
    }
}

impl fmt::Debug for Fx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fx({})", self.to_decimal())
    }
}

impl fmt::Display for Fx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_decimal())
    }
}

impl Add for Fx {
    type Output = Fx;
    #[inline]
    fn add(self, rhs: Fx) -> Fx {
        Fx(self.0 + rhs.0)
    }
}

impl Sub for Fx {
    type Output = Fx;
    #[inline]
    fn sub(self, rhs: Fx) -> Fx {
        Fx(self.0 - rhs.0)
    }
}

impl Mul for Fx {
    type Output = Fx;
    #[inline]
    fn mul(self, rhs: Fx) -> Fx {
        Fx(mul_raw(self.0, rhs.0))
    }
}

impl Neg for Fx {
    type Output = Fx;
    #[inline]
    fn neg(self) -> Fx {
        Fx(-self.0)
    }
}

impl AddAssign for Fx {
    fn add_assign(&mut self, rhs: Fx) {
        self.0 += rhs.0;
    }
}

impl SubAssign for Fx {
    fn sub_assign(&mut self, rhs: Fx) {
        self.0 -= rhs.0;
    }
}

impl PartialEq<f64> for Fx {
    fn eq(&self, other: &f64) -> bool {
        self.to_f64() == *other
    }
}

impl PartialOrd<f64> for Fx {
    fn partial_cmp(&self, other: &f64) -> Option<Ordering> {
        self.to_f64().partial_cmp(other)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_sin_cos(x: &Float) -> (Float, Float) {
        let angle = Float::with_val(SEED_PREC, x * Float::with_val(SEED_PREC, Constant::Pi)) * 2u32;
        angle.sin_cos(Float::new(SEED_PREC))
    }

    #[test]
    fn product_matches_mpfr() {
        let a = Fx::parse_decimal("-1.2345678901234567890123456789012345").unwrap();
        let b = Fx::parse_decimal("3.1415926535897932384626433832795028").unwrap();
        let exact = Float::with_val(SEED_PREC, a.to_float(SEED_PREC) * b.to_float(SEED_PREC));
        let err = Float::with_val(SEED_PREC, (a * b).to_float(SEED_PREC) - exact).abs();
        assert!(err <= Float::with_val(SEED_PREC, 1u32) >> FRAC_BITS);
    }

    #[test]
    fn sin_cos_accuracy_across_the_turn() {
        let ulps = Float::with_val(SEED_PREC, 16u32) >> FRAC_BITS;
        for k in 0..997u32 {
            let x = Fx::from_raw(((k as i128) * 0x1234_5678_9abc_def1_2345_6789) & FRAC_MASK);
            let (s, c) = x.sin_cos_turns();
            let (rs, rc) = reference_sin_cos(&x.to_float(SEED_PREC));
            let es = Float::with_val(SEED_PREC, s.to_float(SEED_PREC) - rs).abs();
            let ec = Float::with_val(SEED_PREC, c.to_float(SEED_PREC) - rc).abs();
            assert!(es < ulps && ec < ulps, "k={k}: sin err {es}, cos err {ec}");
        }
    }

    #[test]
    fn negative_arguments_wrap() {
        let x = Fx::from_f64(-0.25);
        let (s, c) = x.sin_cos_turns();
        assert!((s.to_f64() + 1.0).abs() < 1e-30);
        assert!(c.to_f64().abs() < 1e-30);
    }

    #[test]
    fn decimal_round_trip() {
        for s in ["0.6066610634702", "-0.5", "7.99999", "0.1415926535897932384626433832795028841"] {
            let x = Fx::parse_decimal(s).unwrap();
            assert_eq!(Fx::parse_decimal(&x.to_decimal()).unwrap(), x);
        }
        assert_eq!(Fx::parse_decimal("0.5").unwrap().to_decimal(), "0.5");
        assert!(Fx::parse_decimal("abc").is_none());
        assert!(Fx::parse_decimal("9").is_none());
    }

    #[test]
    fn floor_split_handles_negatives() {
        let (n, f) = Fx::from_f64(-0.25).floor_split();
        assert_eq!(n, -1);
        assert_eq!(f.to_f64(), 0.75);
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Fx::from_f64(0.3);
        let b = Fx::from_f64(-1.7);
        let q = (a * b).div(b);
        assert!((q - a).abs().raw() <= 4);
    }
}
