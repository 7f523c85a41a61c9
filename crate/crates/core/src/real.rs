//! Scalar abstraction shared by the binary64 and fixed-point orbit engines.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::fixed::Fx;

/// Working-precision descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    Ext,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F64 => "f64",
            Precision::Ext => "ext",
        }
    }

    pub fn parse(s: &str) -> Option<Precision> {
        match s.trim().to_ascii_lowercase().as_str() {
            "f64" => Some(Precision::F64),
            "ext" => Some(Precision::Ext),
            _ => None,
        }
    }

    /// Absolute resolution of orbit points on `[0, 1)`.
    pub fn resolution(self) -> f64 {
        match self {
            Precision::F64 => f64::EPSILON,
            Precision::Ext => 2f64.powi(-(crate::fixed::FRAC_BITS as i32)),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait Real:
    Copy
    + Send
    + Sync
    + PartialOrd
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_fx(v: Fx) -> Self;
    fn to_fx(self) -> Fx;
    fn zero() -> Self;
    fn one() -> Self;
    /// Floor and fractional part in `[0, 1)`.
    fn floor_split(self) -> (i64, Self);
    fn mul_int(self, k: i64) -> Self;
    fn abs(self) -> Self;
    /// `(sin 2πx, cos 2πx)`.
    fn sin_cos_turns(self) -> (Self, Self);
    fn add_int(self, k: i64) -> Self;
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    fn from_fx(v: Fx) -> Self {
        v.to_f64()
    }
    fn to_fx(self) -> Fx {
        Fx::from_f64(self)
    }
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn one() -> Self {
        1.0
    }
    #[inline]
    fn floor_split(self) -> (i64, Self) {
        let n = self.floor();
        (n as i64, self - n)
    }
    #[inline]
    fn mul_int(self, k: i64) -> Self {
        self * k as f64
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn sin_cos_turns(self) -> (Self, Self) {
        // Reduce first so large windings do not cost accuracy.
        let r = self - self.round();
        (std::f64::consts::TAU * r).sin_cos()
    }
    #[inline]
    fn add_int(self, k: i64) -> Self {
        self + k as f64
    }
}

impl Real for Fx {
    const PRECISION: Precision = Precision::Ext;

    fn from_f64(v: f64) -> Self {
        Fx::from_f64(v)
    }
    fn to_f64(self) -> f64 {
        Fx::to_f64(self)
    }
    fn from_fx(v: Fx) -> Self {
        v
    }
    fn to_fx(self) -> Fx {
        self
    }
    fn zero() -> Self {
        Fx::ZERO
    }
    fn one() -> Self {
        Fx::ONE
    }
    #[inline]
    fn floor_split(self) -> (i64, Self) {
        Fx::floor_split(self)
    }
    #[inline]
    fn mul_int(self, k: i64) -> Self {
        Fx::mul_int(self, k)
    }
    fn abs(self) -> Self {
        Fx::abs(self)
    }
    #[inline]
    fn sin_cos_turns(self) -> (Self, Self) {
        Fx::sin_cos_turns(self)
    }
    #[inline]
    fn add_int(self, k: i64) -> Self {
        self + Fx::from_raw((k as i128) << crate::fixed::FRAC_BITS)
    }
}

/// A point of the real line stored as integer winding plus a fractional part
/// in `[0, 1)`, so long orbits never leave the representable range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lifted<R> {
    pub winding: i64,
    pub frac: R,
}

impl<R: Real> Lifted<R> {
    pub fn new(x: R) -> Self {
        let (n, f) = x.floor_split();
        Lifted { winding: n, frac: f }
    }

    pub fn zero() -> Self {
        Lifted { winding: 0, frac: R::zero() }
    }

    /// `x - p` as a plain scalar; the caller guarantees it is small.
    #[inline]
    pub fn minus_int(self, p: i64) -> R {
        self.frac.add_int(self.winding - p)
    }

    #[inline]
    pub fn renormalized(winding: i64, x: R) -> Self {
        let (n, f) = x.floor_split();
        Lifted { winding: winding + n, frac: f }
    }

    pub fn to_f64(self) -> f64 {
        self.winding as f64 + self.frac.to_f64()
    }
}
