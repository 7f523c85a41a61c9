//! Analytic critical circle maps given by trigonometric polynomials.
//!
//! A lift has the form
//!
//! ```text
//! F(x) = x + θ + Σ_k a_k sin(2πkx) + b_k (cos(2πkx) − 1)
//! ```
//!
//! with a cubic critical point at the origin. The two linear constraints that
//! make the origin critical are imposed exactly by solving for `a_1` and `b_1`
//! in each working precision, so deep iterates are iterates of exactly one map.
//!
//! Orbits are evaluated either in binary64 or in the 124-bit fixed-point
//! engine, selected by [`Precision`]; the generic entry points take the scalar
//! type as a parameter and [`dispatch!`](crate::dispatch) bridges the runtime
//! choice.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contfrac::{compare_digits, CfError, ContinuedFraction};
use crate::fixed::Fx;
use crate::real::{Lifted, Precision, Real};

/// Runs `$body` with the type alias `$r` bound to the scalar type of `$prec`.
#[macro_export]
macro_rules! dispatch {
    ($prec:expr, $r:ident => $body:expr) => {
        match $prec {
            $crate::real::Precision::F64 => {
                #[allow(dead_code)]
                type $r = f64;
                $body
            }
            $crate::real::Precision::Ext => {
                #[allow(dead_code)]
                type $r = $crate::fixed::Fx;
                $body
            }
        }
    };
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("not monotone: lift'({x}) = {derivative}")]
    NotMonotone { x: f64, derivative: f64 },
    #[error("not cubic: critical-point constraint residual {residual:e}")]
    NotCubic { residual: f64 },
    #[error("negative third derivative at the critical point ({value})")]
    NegativeThirdDerivative { value: f64 },
    #[error("empty harmonic list")]
    NoHarmonics,
    #[error("unreachable combinatorics {p}/{q} in theta range [0, 1]")]
    UnreachableCombinatorics { p: i64, q: u64 },
    #[error("invalid rational {p}/{q}")]
    InvalidRational { p: i64, q: u64 },
    #[error("invalid theta: {0}")]
    InvalidTheta(String),
    #[error(transparent)]
    ContinuedFraction(#[from] CfError),
}

/// Coefficients of one working precision, with `a_1`, `b_1` projected onto
/// the critical-point constraints.
#[derive(Clone, Debug)]
pub struct LiftData<R> {
    /// `θ − Σ b_k`, the constant term.
    shift: R,
    harmonics: Vec<(R, R)>,
    has_cos: bool,
}

impl<R: Real> LiftData<R> {
    #[inline]
    fn eval(&self, x: R) -> R {
        let (s1, c1) = x.sin_cos_turns();
        let (mut s, mut c) = (s1, c1);
        let mut acc = x + self.shift;
        for (k, &(a, b)) in self.harmonics.iter().enumerate() {
            if k > 0 {
                let ns = s * c1 + c * s1;
                c = c * c1 - s * s1;
                s = ns;
            }
            acc = acc + a * s;
            if self.has_cos {
                acc = acc + b * c;
            }
        }
        acc
    }
}

fn project_f64(theta: f64, h: &[(f64, f64)]) -> LiftData<f64> {
    let mut harmonics = h.to_vec();
    let tail_a: f64 = h.iter().enumerate().skip(1).map(|(i, &(a, _))| (i + 1) as f64 * a).sum();
    let tail_b: f64 = h
        .iter()
        .enumerate()
        .skip(1)
        .map(|(i, &(_, b))| ((i + 1) * (i + 1)) as f64 * b)
        .sum();
    harmonics[0] = (-1.0 / TAU - tail_a, -tail_b);
    let sum_b: f64 = harmonics.iter().map(|&(_, b)| b).sum();
    LiftData {
        shift: theta - sum_b,
        has_cos: harmonics.iter().any(|&(_, b)| b != 0.0),
        harmonics,
    }
}

fn project_fx(theta: Fx, h: &[(f64, f64)]) -> LiftData<Fx> {
    let mut harmonics: Vec<(Fx, Fx)> = h.iter().map(|&(a, b)| (Fx::from_f64(a), Fx::from_f64(b))).collect();
    let mut tail_a = Fx::ZERO;
    let mut tail_b = Fx::ZERO;
    for (i, &(a, b)) in harmonics.iter().enumerate().skip(1) {
        let k = (i + 1) as i64;
        tail_a += a.mul_int(k);
        tail_b += b.mul_int(k * k);
    }
    harmonics[0] = (-Fx::inv_two_pi() - tail_a, -tail_b);
    let mut sum_b = Fx::ZERO;
    for &(_, b) in &harmonics {
        sum_b += b;
    }
    LiftData {
        shift: theta - sum_b,
        has_cos: harmonics.iter().any(|&(_, b)| b != Fx::ZERO),
        harmonics,
    }
}

/// Scalars with a coefficient table inside [`AnalyticCircleMap`].
pub trait MapScalar: Real {
    fn lift_data(map: &AnalyticCircleMap) -> &LiftData<Self>;
}

impl MapScalar for f64 {
    #[inline]
    fn lift_data(map: &AnalyticCircleMap) -> &LiftData<f64> {
        &map.data_f64
    }
}

impl MapScalar for Fx {
    #[inline]
    fn lift_data(map: &AnalyticCircleMap) -> &LiftData<Fx> {
        &map.data_fx
    }
}

#[derive(Clone, Debug)]
pub struct AnalyticCircleMap {
    theta: Fx,
    harmonics: Vec<(f64, f64)>,
    precision: Precision,
    data_f64: LiftData<f64>,
    data_fx: LiftData<Fx>,
}

/// Serialized form of a map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub theta: String,
    pub harmonics: Vec<[f64; 2]>,
    #[serde(default)]
    pub precision: Precision,
}

const GRID: usize = 4096;

fn check_harmonics(h: &[(f64, f64)]) -> Result<(), MapError> {
    if h.is_empty() {
        return Err(MapError::NoHarmonics);
    }
    if h.iter().any(|&(a, b)| !a.is_finite() || !b.is_finite() || a.abs() >= 4.0 || b.abs() >= 4.0) {
        return Err(MapError::NotCubic { residual: f64::INFINITY });
    }
    let d1: f64 = 1.0 + h.iter().enumerate().map(|(i, &(a, _))| TAU * (i + 1) as f64 * a).sum::<f64>();
    let d2: f64 = h
        .iter()
        .enumerate()
        .map(|(i, &(_, b))| (TAU * (i + 1) as f64).powi(2) * b)
        .sum();
    let residual = d1.abs().max(d2.abs());
    if residual > 1e-12 {
        return Err(MapError::NotCubic { residual });
    }
    Ok(())
}

impl AnalyticCircleMap {
    /// Validated construction (`build_map`).
    pub fn new(theta: Fx, harmonics: Vec<(f64, f64)>, precision: Precision) -> Result<Self, MapError> {
        check_harmonics(&harmonics)?;
        let map = Self::assemble(theta, harmonics, precision);
        let d3 = map.eval(0.0, 3);
        if d3 <= 0.0 {
            return Err(MapError::NegativeThirdDerivative { value: d3 });
        }
        let (x, derivative) = map.min_derivative();
        if derivative < -1e-12 {
            return Err(MapError::NotMonotone { x, derivative });
        }
        Ok(map)
    }

    fn assemble(theta: Fx, harmonics: Vec<(f64, f64)>, precision: Precision) -> Self {
        AnalyticCircleMap {
            data_f64: project_f64(theta.to_f64(), &harmonics),
            data_fx: project_fx(theta, &harmonics),
            theta,
            harmonics,
            precision,
        }
    }

    pub fn arnold_cubic(theta: f64) -> Self {
        MapFamily::arnold_cubic().member(Fx::from_f64(theta))
    }

    pub fn theta(&self) -> Fx {
        self.theta
    }

    pub fn theta_f64(&self) -> f64 {
        self.theta.to_f64()
    }

    pub fn harmonics(&self) -> &[(f64, f64)] {
        &self.harmonics
    }

    /// Coefficients actually used in binary64, after projection.
    pub fn projected_harmonics(&self) -> &[(f64, f64)] {
        &self.data_f64.harmonics
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn with_precision(&self, precision: Precision) -> Self {
        let mut m = self.clone();
        m.precision = precision;
        m
    }

    /// Same harmonics with another rotation parameter; no revalidation needed
    /// since `θ` only translates.
    pub fn with_theta(&self, theta: Fx) -> Self {
        Self::assemble(theta, self.harmonics.clone(), self.precision)
    }

    /// Derivative of order 0 to 3 in binary64.
    pub fn eval(&self, x: f64, order: u8) -> f64 {
        let d = &self.data_f64;
        match order {
            0 => d.eval(x),
            _ => {
                let mut acc = if order == 1 { 1.0 } else { 0.0 };
                for (i, &(a, b)) in d.harmonics.iter().enumerate() {
                    let w = TAU * (i + 1) as f64;
                    let (s, c) = (w * x).sin_cos();
                    let term = match order {
                        1 => w * (a * c - b * s),
                        2 => -w * w * (a * s + b * c),
                        3 => w * w * w * (-a * c + b * s),
                        _ => panic!("derivative order {order} not supported"),
                    };
                    acc += term;
                }
                acc
            }
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.eval(x, 1)
    }

    /// Minimum of `F'` over a 4096-point grid refined near its small values.
    pub fn min_derivative(&self) -> (f64, f64) {
        let h = 1.0 / GRID as f64;
        let vals: Vec<f64> = (0..GRID).map(|i| self.derivative(i as f64 * h)).collect();
        let mut best = (0.0, vals[0]);
        for i in 0..GRID {
            let (l, r) = (vals[(i + GRID - 1) % GRID], vals[(i + 1) % GRID]);
            if vals[i] <= l && vals[i] <= r {
                let x = self.refine_min((i as f64 - 1.0) * h, (i as f64 + 1.0) * h);
                let v = self.derivative(x);
                if v < best.1 {
                    best = (x.rem_euclid(1.0), v);
                }
            }
        }
        best
    }

    fn refine_min(&self, mut a: f64, mut b: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if self.derivative(c) < self.derivative(d) {
                b = d;
            } else {
                a = c;
            }
        }
        0.5 * (a + b)
    }

    #[inline]
    pub fn lift<R: MapScalar>(&self, x: R) -> R {
        R::lift_data(self).eval(x)
    }

    #[inline]
    pub fn step<R: MapScalar>(&self, p: Lifted<R>) -> Lifted<R> {
        Lifted::renormalized(p.winding, R::lift_data(self).eval(p.frac))
    }

    pub fn iterate_lifted<R: MapScalar>(&self, mut p: Lifted<R>, n: u64) -> Lifted<R> {
        let d = R::lift_data(self);
        for _ in 0..n {
            p = Lifted::renormalized(p.winding, d.eval(p.frac));
        }
        p
    }

    /// `F^n(x) − p` for small `x`; the caller guarantees the result is small.
    pub fn iterate_shifted<R: MapScalar>(&self, x: R, n: u64, p: i64) -> R {
        self.iterate_lifted(Lifted::new(x), n).minus_int(p)
    }

    /// `F^n(0)`.
    pub fn orbit_point<R: MapScalar>(&self, n: u64) -> Lifted<R> {
        self.iterate_lifted(Lifted::zero(), n)
    }

    /// `F^i(0)` for `i = 0..n`.
    pub fn orbit<R: MapScalar>(&self, n: usize) -> Vec<Lifted<R>> {
        let mut out = Vec::with_capacity(n);
        let mut p = Lifted::zero();
        for _ in 0..n {
            out.push(p);
            p = self.step(p);
        }
        out
    }

    /// Rotation number enclosure from the orbit of the origin.
    pub fn rotation_number(&self, tol: f64, max_iter: u64) -> RotationEstimate {
        dispatch!(self.precision, R => self.rotation_number_in::<R>(tol, max_iter))
    }

    /// Uses the one-sided bounds `F^n(0) ≥ k ⟹ ρ ≥ k/n` and
    /// `F^n(0) ≤ k ⟹ ρ ≤ k/n`, which hold for every monotone degree-one lift.
    pub fn rotation_number_in<R: MapScalar>(&self, tol: f64, max_iter: u64) -> RotationEstimate {
        let zero_tol = 1e-14;
        let d = R::lift_data(self);
        let mut p = Lifted::<R>::zero();
        // Bounds as fractions (num, den).
        let mut lower = (0i64, 1u64);
        let mut upper = (1i64, 0u64);
        let mut upper_set = false;
        let mut n = 0u64;
        let mut periodic = None;
        while n < max_iter {
            p = Lifted::renormalized(p.winding, d.eval(p.frac));
            n += 1;
            let frac = p.frac.to_f64();
            if frac <= zero_tol * n as f64 || 1.0 - frac <= zero_tol * n as f64 {
                let k = if frac < 0.5 { p.winding } else { p.winding + 1 };
                periodic = Some((k, n));
                break;
            }
            let lo = (p.winding, n);
            let hi = (p.winding + 1, n);
            if frac_gt(lo, lower) {
                lower = lo;
            }
            if !upper_set || frac_lt(hi, upper) {
                upper = hi;
                upper_set = true;
            }
            let width = upper.0 as f64 / upper.1 as f64 - lower.0 as f64 / lower.1 as f64;
            if width <= tol {
                break;
            }
        }
        let birkhoff = if n > 0 { p.to_f64() / n as f64 } else { 0.0 };
        if let Some((k, q)) = periodic {
            let g = gcd(k.unsigned_abs(), q).max(1);
            let rho = k as f64 / q as f64;
            return RotationEstimate {
                rho,
                lower: rho,
                upper: rho,
                iterations: n,
                converged: true,
                rational: Some((k / g as i64, q / g)),
                birkhoff,
            };
        }
        let lo = lower.0 as f64 / lower.1 as f64;
        let hi = if upper_set { upper.0 as f64 / upper.1 as f64 } else { 1.0 };
        let converged = hi - lo <= tol;
        // A bracket with one endpoint of small denominator that never improved
        // while the other crept in like 1/n is the signature of a rational.
        let (small, large) = if lower.1 <= upper.1 { (lower, upper) } else { (upper, lower) };
        let rational = (converged && large.1 as f64 > (small.1 as f64) / tol.sqrt())
            .then(|| {
                let g = gcd(small.0.unsigned_abs(), small.1).max(1);
                (small.0 / g as i64, small.1 / g)
            });
        let rho = match rational {
            Some((k, q)) => k as f64 / q as f64,
            None => 0.5 * (lo + hi),
        };
        RotationEstimate { rho, lower: lo, upper: hi, iterations: n, converged, rational, birkhoff }
    }

    /// Digits of the rotation number from the closest returns of the origin.
    pub fn rotation_digits(&self, depth: usize) -> Digits {
        dispatch!(self.precision, R => self.rotation_digits_in::<R>(depth, HEIGHT_CAP))
    }

    /// Height recursion on the orbit of the origin: at level `k` the pair is
    /// `(F^{q_{k+1}} − p_{k+1}, F^{q_k} − p_k)` and its height is the digit
    /// `r_{k+1}`. Level `−1` is the pair `(F, x − 1)` whose height is `r_0`.
    pub fn rotation_digits_in<R: MapScalar>(&self, depth: usize, cap: u64) -> Digits {
        let d = R::lift_data(self);
        let res = R::PRECISION.resolution();
        let mut returns: Vec<(i64, u64, Lifted<R>)> = vec![(1, 0, Lifted::zero()), (0, 1, self.step(Lifted::zero()))];
        let mut terms = Vec::with_capacity(depth);
        let stop = loop {
            if terms.len() == depth {
                break DigitStop::Complete;
            }
            let (pa, qa, a) = returns[returns.len() - 2];
            let (pb, qb, _) = returns[returns.len() - 1];
            let xa = a.minus_int(pa).to_f64();
            let xb = returns[returns.len() - 1].2.minus_int(pb).to_f64();
            if xb == 0.0 || xb.abs() <= res * 16.0 * (qb as f64).sqrt() {
                break DigitStop::Rational;
            }
            let side = xa.signum();
            let mut y = a;
            let mut offset = pa;
            let mut j = 0u64;
            let mut prev = xa;
            let mut stalled = false;
            let outcome = loop {
                if j >= cap {
                    break Err(prev);
                }
                for _ in 0..qb {
                    y = Lifted::renormalized(y.winding, d.eval(y.frac));
                }
                offset += pb;
                j += 1;
                let v = y.minus_int(offset);
                let vf = v.to_f64();
                if vf == 0.0 || vf.abs() <= res * 16.0 {
                    break Ok((j, true));
                }
                if vf.signum() != side {
                    break Ok((j - 1, false));
                }
                let step = vf - prev;
                // The orbit of η moves monotonically toward 0 unless η has a
                // fixed point in between; a stall or reversal detects it.
                if step.abs() <= res * 1e3 || step.signum() == side {
                    stalled = true;
                    break Err(vf);
                }
                prev = vf;
            };
            match outcome {
                Ok((r, hit_zero)) => {
                    if r == 0 {
                        break DigitStop::PrecisionExhausted;
                    }
                    terms.push(r);
                    // The new closest return is η^r(ξ(0)).
                    let q_new = qa + r * qb;
                    let p_new = pa + r as i64 * pb;
                    let point = if hit_zero { y } else { self.iterate_lifted(a, r * qb) };
                    returns.push((p_new, q_new, point));
                    if hit_zero {
                        break DigitStop::Rational;
                    }
                }
                Err(_) if stalled => break DigitStop::Rational,
                Err(last) => break DigitStop::Undecided { last },
            }
        };
        Digits {
            terms,
            returns: returns
                .into_iter()
                .map(|(p, q, pt)| ClosestReturn { p, q, x: pt.minus_int(p).to_fx() })
                .collect(),
            stop,
        }
    }
}

const MAX_SOLVE_STEPS: usize = 600;

/// Width of `[lo, hi]` in units of the working grid; 0 once no point lies
/// strictly inside.
fn bracket_width<R: Real>(lo: Fx, hi: Fx) -> f64 {
    match R::PRECISION {
        Precision::Ext => (hi.raw() - lo.raw() - 1).max(0) as f64,
        Precision::F64 => {
            let (a, b) = (lo.to_f64(), hi.to_f64());
            let m = a + 0.5 * (b - a);
            if m <= a || m >= b {
                0.0
            } else {
                b - a
            }
        }
    }
}

/// `lo + t·(hi − lo)`, pushed strictly inside the bracket.
fn interior_point<R: Real>(lo: Fx, hi: Fx, t: f64) -> Option<Fx> {
    match R::PRECISION {
        Precision::Ext => {
            let w = hi.raw() - lo.raw();
            if w <= 1 {
                return None;
            }
            let step = ((w as f64) * t) as i128;
            Some(Fx::from_raw(lo.raw() + step.clamp(1, w - 1)))
        }
        Precision::F64 => {
            let (a, b) = (lo.to_f64(), hi.to_f64());
            let mut m = a + t * (b - a);
            if m <= a || m >= b {
                m = a + 0.5 * (b - a);
            }
            (m > a && m < b).then(|| Fx::from_f64(m))
        }
    }
}

/// Default cap on η-steps when computing a height.
pub const HEIGHT_CAP: u64 = 1_000_000;

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn frac_gt(a: (i64, u64), b: (i64, u64)) -> bool {
    (a.0 as i128) * (b.1 as i128) > (b.0 as i128) * (a.1 as i128)
}

fn frac_lt(a: (i64, u64), b: (i64, u64)) -> bool {
    (a.0 as i128) * (b.1 as i128) < (b.0 as i128) * (a.1 as i128)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RotationEstimate {
    pub rho: f64,
    pub lower: f64,
    pub upper: f64,
    pub iterations: u64,
    /// Whether the enclosure reached the requested tolerance.
    pub converged: bool,
    /// `(p, q)` when the rotation number is rational to working precision.
    pub rational: Option<(i64, u64)>,
    /// The plain Birkhoff average `F^n(0)/n`.
    pub birkhoff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DigitStop {
    Complete,
    /// Some height is infinite: the rotation number is rational.
    Rational,
    /// A sign could not be resolved at working precision.
    PrecisionExhausted,
    /// The height cap was hit with no crossing and no fixed point detected.
    Undecided { last: f64 },
}

/// `F^q(0) − p`, with `(p, q) = (p_k, q_k)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClosestReturn {
    pub p: i64,
    pub q: u64,
    pub x: Fx,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Digits {
    pub terms: Vec<u64>,
    /// Index `k + 1` holds level `k`; index 0 is the level `−1` entry
    /// `(p, q, x) = (1, 0, −1)`.
    pub returns: Vec<ClosestReturn>,
    pub stop: DigitStop,
}

impl Digits {
    /// `(p_k, q_k, x_k)` for `k ≥ -1`.
    pub fn level(&self, k: isize) -> Option<&ClosestReturn> {
        self.returns.get((k + 1) as usize)
    }

    pub fn is_rational(&self) -> bool {
        matches!(self.stop, DigitStop::Rational)
    }
}

/// A one-parameter family `θ ↦ F_θ` with fixed harmonics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapFamily {
    pub name: String,
    pub harmonics: Vec<(f64, f64)>,
    #[serde(default)]
    pub precision: Precision,
}

impl MapFamily {
    pub fn new(name: &str, harmonics: Vec<(f64, f64)>, precision: Precision) -> Result<Self, MapError> {
        AnalyticCircleMap::new(Fx::ZERO, harmonics.clone(), precision)?;
        Ok(MapFamily { name: name.to_string(), harmonics, precision })
    }

    /// `x + θ − sin(2πx)/(2π)`.
    pub fn arnold_cubic() -> Self {
        MapFamily { name: "arnold-cubic".into(), harmonics: vec![(-1.0 / TAU, 0.0)], precision: Precision::F64 }
    }

    /// `a_1 = −(1−ε)/(2π)`, `a_2 = −ε/(4π)`; monotone for `ε ∈ [0, 1]`.
    pub fn two_harmonic(eps: f64) -> Self {
        MapFamily {
            name: format!("two-harmonic-{eps}"),
            harmonics: vec![(-(1.0 - eps) / TAU, 0.0), (-eps / (2.0 * TAU), 0.0)],
            precision: Precision::F64,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        if name == "arnold-cubic" {
            return Some(Self::arnold_cubic());
        }
        let eps: f64 = name.strip_prefix("two-harmonic")?.trim_start_matches(['-', ':', '=']).parse().ok()?;
        Self::new(&format!("two-harmonic-{eps}"), Self::two_harmonic(eps).harmonics, Precision::F64).ok()
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn member(&self, theta: Fx) -> AnalyticCircleMap {
        AnalyticCircleMap::assemble(theta, self.harmonics.clone(), self.precision)
    }

    /// `θ` with `F_θ^q(0) = p`, by a bracketing solve on `g(θ) = F_θ^q(0) − p`.
    pub fn critical_cycle_parameter(&self, p: i64, q: u64) -> Result<Fx, MapError> {
        if q == 0 || p < 0 || p as u64 >= q.max(1) && !(p == 0 && q == 1) || gcd(p as u64, q) != 1 {
            return Err(MapError::InvalidRational { p, q });
        }
        dispatch!(self.precision, R => self.critical_cycle_in::<R>(p, q))
    }

    /// `g(θ)`, clamped to `[−4, 4]` so extended precision never overflows.
    fn g<R: MapScalar>(&self, theta: Fx, p: i64, q: u64) -> R {
        let end = self.member(theta).orbit_point::<R>(q);
        let k = end.winding - p;
        if k.abs() > 4 {
            R::from_f64(k.signum() as f64 * 4.0)
        } else {
            end.minus_int(p)
        }
    }

    /// Bracketing solve: Illinois steps on `g`, with a bisection step
    /// whenever two steps in a row fail to halve the bracket.
    pub fn critical_cycle_in<R: MapScalar>(&self, p: i64, q: u64) -> Result<Fx, MapError> {
        self.critical_cycle_within::<R>(p, q, Fx::ZERO, Fx::ONE)
    }

    /// As [`critical_cycle_in`](Self::critical_cycle_in) inside a known
    /// bracket; falls back to `[0, 1]` if `g` does not change sign on it.
    pub fn critical_cycle_within<R: MapScalar>(&self, p: i64, q: u64, lo: Fx, hi: Fx) -> Result<Fx, MapError> {
        let (mut lo, mut hi) = (lo, hi);
        let g_lo = self.g::<R>(lo, p, q);
        if g_lo == R::zero() {
            return Ok(lo);
        }
        let g_hi = self.g::<R>(hi, p, q);
        if g_hi == R::zero() {
            return Ok(hi);
        }
        if g_lo > R::zero() || g_hi < R::zero() {
            if lo == Fx::ZERO && hi == Fx::ONE {
                return Err(MapError::UnreachableCombinatorics { p, q });
            }
            return self.critical_cycle_within::<R>(p, q, Fx::ZERO, Fx::ONE);
        }
        let mut best = if g_hi.abs() < g_lo.abs() { (hi, g_hi.abs()) } else { (lo, g_lo.abs()) };
        let (mut f_lo, mut f_hi) = (g_lo.to_f64(), g_hi.to_f64());
        let mut side = 0i8;
        let mut slow = 0u8;
        for _ in 0..MAX_SOLVE_STEPS {
            let width = bracket_width::<R>(lo, hi);
            if width == 0.0 {
                break;
            }
            let t = if slow >= 2 || !(f_lo < 0.0 && f_hi > 0.0) {
                slow = 0;
                0.5
            } else {
                (f_lo / (f_lo - f_hi)).clamp(0.0, 1.0)
            };
            let Some(mid) = interior_point::<R>(lo, hi, t) else { break };
            let gm = self.g::<R>(mid, p, q);
            if gm.abs() < best.1 {
                best = (mid, gm.abs());
            }
            if gm == R::zero() {
                break;
            }
            let fm = gm.to_f64();
            if gm < R::zero() {
                lo = mid;
                f_lo = fm;
                if side == -1 {
                    f_hi *= 0.5;
                }
                side = -1;
            } else {
                hi = mid;
                f_hi = fm;
                if side == 1 {
                    f_lo *= 0.5;
                }
                side = 1;
            }
            if bracket_width::<R>(lo, hi) > 0.5 * width {
                slow += 1;
            } else {
                slow = 0;
            }
        }
        Ok(best.0)
    }

    /// `θ` whose rotation number matches the first `depth` digits of `cf`.
    pub fn tune_to_rotation(&self, cf: &ContinuedFraction, depth: usize) -> Result<Tuning, MapError> {
        dispatch!(self.precision, R => self.tune_in::<R>(cf, depth))
    }

    /// Critical-cycle parameters of the convergents `p_n/q_n`, `n ≤ n_max`,
    /// each solved inside the bracket formed by the previous two.
    pub fn convergent_parameters(&self, cf: &ContinuedFraction, n_max: usize) -> Result<Vec<Fx>, MapError> {
        dispatch!(self.precision, R => self.convergent_parameters_in::<R>(cf, n_max))
    }

    fn convergent_parameters_in<R: MapScalar>(&self, cf: &ContinuedFraction, n_max: usize) -> Result<Vec<Fx>, MapError> {
        let table = cf.convergent_table(n_max)?;
        let mut out: Vec<Fx> = Vec::with_capacity(table.len());
        for (n, &(p, q)) in table.iter().enumerate() {
            let (lo, hi) = if n >= 2 {
                let (a, b) = (out[n - 1], out[n - 2]);
                if a < b { (a, b) } else { (b, a) }
            } else {
                (Fx::ZERO, Fx::ONE)
            };
            out.push(self.critical_cycle_within::<R>(p as i64, q as u64, lo, hi)?);
        }
        Ok(out)
    }

    fn tune_in<R: MapScalar>(&self, cf: &ContinuedFraction, depth: usize) -> Result<Tuning, MapError> {
        const LOOKAHEAD: usize = 3;
        let depth = depth.max(1);
        let finite_hit = cf.len() == Some(depth);
        let thetas = self.convergent_parameters_in::<R>(cf, if finite_hit { depth } else { depth + 1 })?;
        let t_a = thetas[depth];
        // A finite cf of exactly `depth` terms is hit by its last convergent.
        if finite_hit {
            return Ok(Tuning { theta: t_a, matched: depth, complete: true });
        }
        let t_b = thetas[depth + 1];
        // Aitken extrapolation of the convergent parameters is tried first;
        // the bracket is untouched if it misses.
        let mut probe = (depth >= 2).then(|| {
            let d1 = Fx::from_raw(thetas[depth].raw() - thetas[depth - 1].raw()).to_f64();
            let d2 = Fx::from_raw(t_b.raw() - t_a.raw()).to_f64();
            let den = d2 - d1;
            (den != 0.0).then(|| Fx::from_raw(t_b.raw() - Fx::from_f64(d2 * d2 / den).raw()))
        }).flatten();
        let want = match cf.len() {
            Some(n) => cf.terms(n.min(depth + LOOKAHEAD))?,
            None => cf.terms(depth + LOOKAHEAD)?,
        };
        let want_terminates = cf.len().is_some_and(|n| n <= depth + LOOKAHEAD);
        let (mut lo, mut hi) = if t_a < t_b { (t_a, t_b) } else { (t_b, t_a) };
        let mut best = (lo, 0usize);
        for _ in 0..200 {
            let probed = probe.take().filter(|t| *t > lo && *t < hi);
            let mid = match R::PRECISION {
                _ if probed.is_some() => probed.unwrap(),
                Precision::Ext if hi.raw() - lo.raw() > 1 => Fx::from_raw(lo.raw() + (hi.raw() - lo.raw()) / 2),
                Precision::F64 => {
                    let (a, b) = (lo.to_f64(), hi.to_f64());
                    let m = a + 0.5 * (b - a);
                    if m <= a || m >= b {
                        break;
                    }
                    Fx::from_f64(m)
                }
                _ => break,
            };
            let map = self.member(mid);
            let got = map.rotation_digits_in::<R>(want.len(), HEIGHT_CAP);
            let matched = got.terms.iter().zip(&want).take_while(|(a, b)| a == b).count();
            if matched > best.1 {
                best = (mid, matched);
            }
            if matched >= want.len() && got.terms.len() == want.len() {
                return Ok(Tuning { theta: mid, matched: depth, complete: true });
            }
            let got_terminates = matches!(got.stop, DigitStop::Rational);
            if !got_terminates && !matches!(got.stop, DigitStop::Complete) {
                break;
            }
            match compare_digits(&got.terms, got_terminates, &want, want_terminates) {
                // ρ is increasing in θ.
                Some(std::cmp::Ordering::Less) => lo = mid,
                Some(std::cmp::Ordering::Greater) => hi = mid,
                _ => break,
            }
        }
        let matched = best.1.min(depth);
        Ok(Tuning { theta: best.0, matched, complete: matched >= depth })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tuning {
    pub theta: Fx,
    /// Number of leading digits verified.
    pub matched: usize,
    pub complete: bool,
}

impl MapSpec {
    pub fn from_map(map: &AnalyticCircleMap) -> Self {
        MapSpec {
            theta: map.theta.to_decimal(),
            harmonics: map.harmonics.iter().map(|&(a, b)| [a, b]).collect(),
            precision: map.precision,
        }
    }

    pub fn build(&self) -> Result<AnalyticCircleMap, MapError> {
        let theta = Fx::parse_decimal(&self.theta).ok_or_else(|| MapError::InvalidTheta(self.theta.clone()))?;
        AnalyticCircleMap::new(theta, self.harmonics.iter().map(|h| (h[0], h[1])).collect(), self.precision)
    }
}
