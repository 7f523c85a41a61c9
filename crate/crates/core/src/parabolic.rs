//! Complex extension of the dynamics near parabolic and almost parabolic
//! fixed points.
//!
//! The lift extends to an entire function, so every word `F^q − p` of a pair
//! is evaluated on complex arguments with the same trigonometric formula.
//! Taylor jets come from power-series composition rather than finite
//! differences. Fatou coordinates are evaluated through their asymptotic
//! expansion
//!
//! ```text
//! Φ(z) = U(η^N z) − N,   U(u) = u − b log u + Σ_k γ_k u^{−k},   u = −1/(a (z − p))
//! ```
//!
//! after `N` iterates have brought the orbit inside the region where the
//! truncated series is accurate.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::circlemap::{AnalyticCircleMap, MapError, MapFamily};
use crate::fit::{linear_fit, LinearFit};
use crate::fixed::Fx;
use crate::pairs::{CommutingPair, PairError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParabolicError {
    #[error("no parabolic parameter found for {p}/{q}: {reason}")]
    NoParabolic { p: i64, q: u64, reason: String },
    #[error("no fixed point of eta found in the search box")]
    NoFixedPoint,
    #[error("orbit of {z} left the petal after {steps} steps")]
    NotInPetal { z: C64, steps: u64 },
    #[error("cascade did not reach the right basepoint within {cap} steps")]
    CascadeCap { cap: u64 },
    #[error("basepoints {left} < {right} do not straddle the gap")]
    BadBasepoints { left: f64, right: f64 },
    #[error("no admissible window: {0}")]
    NoWindow(String),
    #[error("resolution {0} outside [16, 4096]")]
    Resolution(usize),
    #[error("too few usable radii ({0} < 3)")]
    TooFewRadii(usize),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pair(#[from] PairError),
}

// ---------------------------------------------------------------------------
// Truncated power series.

type Series = Vec<C64>;

/// `(sin h, cos h)` for any constant term.
fn s_sin_cos(h: &[C64]) -> (Series, Series) {
    let n = h.len();
    let (sa, ca) = (h[0].sin(), h[0].cos());
    let mut s = vec![C64::new(0.0, 0.0); n];
    let mut c = vec![C64::new(0.0, 0.0); n];
    c[0] = C64::new(1.0, 0.0);
    for k in 1..n {
        let (mut ds, mut dc) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
        for j in 1..=k {
            let jh = h[j] * j as f64;
            ds += jh * c[k - j];
            dc -= jh * s[k - j];
        }
        s[k] = ds / k as f64;
        c[k] = dc / k as f64;
    }
    let sin: Series = (0..n).map(|k| sa * c[k] + ca * s[k]).collect();
    let cos: Series = (0..n).map(|k| ca * c[k] - sa * s[k]).collect();
    (sin, cos)
}

fn s_recip(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut r = vec![0.0; n];
    r[0] = 1.0 / a[0];
    for k in 1..n {
        let acc: f64 = (1..=k).map(|j| a[j] * r[k - j]).sum();
        r[k] = -acc / a[0];
    }
    r
}

fn s_mul_real(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n];
    for i in 0..n {
        for j in 0..n - i {
            c[i + j] += a[i] * b[j];
        }
    }
    c
}

/// `log a` for `a_0 = 1`.
fn s_log1(a: &[f64]) -> Vec<f64> {
    let n = a.len();
    let mut l = vec![0.0; n];
    for k in 1..n {
        let acc: f64 = (1..k).map(|j| j as f64 * l[j] * a[k - j]).sum();
        l[k] = a[k] - acc / k as f64;
    }
    l
}

// ---------------------------------------------------------------------------
// Complex words.

/// `y ↦ (F^q(s·y) − p)/s` on complex arguments.
#[derive(Clone, Debug)]
pub struct ComplexOrbitMap {
    map: Arc<AnalyticCircleMap>,
    theta: f64,
    harmonics: Vec<(f64, f64)>,
    pub q: u64,
    pub p: i64,
    pub scale: f64,
}

/// `(sin 2πz, cos 2πz)` from real parts, so that conjugate inputs give
/// bitwise conjugate outputs.
#[inline]
fn sin_cos_tau(z: C64) -> (C64, C64) {
    let (sx, cx) = (TAU * z.re).sin_cos();
    let y = TAU * z.im;
    let m = y.abs().exp_m1();
    let e = m + 1.0;
    let ch = 0.5 * (e + 1.0 / e);
    let sh = (0.5 * m * (e + 1.0) / e).copysign(y);
    (C64::new(sx * ch, cx * sh), C64::new(cx * ch, -(sx * sh)))
}

impl ComplexOrbitMap {
    pub fn new(map: &AnalyticCircleMap, q: u64, p: i64) -> Self {
        Self::scaled(Arc::new(map.clone()), q, p, 1.0)
    }

    fn scaled(map: Arc<AnalyticCircleMap>, q: u64, p: i64, scale: f64) -> Self {
        ComplexOrbitMap {
            theta: map.theta_f64(),
            harmonics: map.projected_harmonics().to_vec(),
            map,
            q,
            p,
            scale,
        }
    }

    /// `(η, ξ)` of a pair in its own coordinates.
    pub fn from_pair(pair: &CommutingPair) -> (Self, Self) {
        let map = Arc::new(pair.map().clone());
        let (qe, pe) = pair.eta_word().normal_form();
        let (qx, px) = pair.xi_word().normal_form();
        (
            Self::scaled(map.clone(), qe, pe, pair.scale()),
            Self::scaled(map, qx, px, pair.scale()),
        )
    }

    pub fn circle_map(&self) -> &AnalyticCircleMap {
        &self.map
    }

    /// `(F(x), F'(x))` of the lift.
    #[inline]
    fn lift_d(&self, x: C64) -> (C64, C64) {
        let (s1, c1) = sin_cos_tau(x);
        let (mut s, mut c) = (s1, c1);
        let mut f = x + self.theta;
        let mut d = C64::new(1.0, 0.0);
        for (i, &(a, b)) in self.harmonics.iter().enumerate() {
            if i > 0 {
                let ns = s * c1 + c * s1;
                c = c * c1 - s * s1;
                s = ns;
            }
            let k = TAU * (i + 1) as f64;
            f += s * a + (c - 1.0) * b;
            d += (c * a - s * b) * k;
        }
        (f, d)
    }

    #[inline]
    fn lift(&self, x: C64) -> C64 {
        self.lift_d(x).0
    }

    pub fn eval(&self, y: C64) -> C64 {
        let mut x = y * self.scale;
        for _ in 0..self.q {
            x = self.lift(x);
        }
        (x - self.p as f64) / self.scale
    }

    /// Value and derivative.
    pub fn eval_d(&self, y: C64) -> (C64, C64) {
        let mut x = y * self.scale;
        let mut d = C64::new(1.0, 0.0);
        for _ in 0..self.q {
            let (f, df) = self.lift_d(x);
            d *= df;
            x = f;
        }
        ((x - self.p as f64) / self.scale, d)
    }

    /// Taylor coefficients of the word at `y0` up to `order`.
    pub fn jet(&self, y0: C64, order: usize) -> Vec<C64> {
        let n = order + 1;
        let mut x = vec![C64::new(0.0, 0.0); n];
        x[0] = y0 * self.scale;
        if n > 1 {
            x[1] = C64::new(self.scale, 0.0);
        }
        for _ in 0..self.q {
            let mut f = x.clone();
            f[0] += self.theta;
            for (i, &(a, b)) in self.harmonics.iter().enumerate() {
                let k = TAU * (i + 1) as f64;
                let arg: Series = x.iter().map(|v| v * k).collect();
                let (s, c) = s_sin_cos(&arg);
                for j in 0..n {
                    f[j] += s[j] * a + c[j] * b;
                }
                f[0] -= b;
            }
            x = f;
        }
        x[0] -= self.p as f64;
        x.iter().map(|v| v / self.scale).collect()
    }

    /// Preimage of `w` near `guess`, by Newton's method.
    pub fn inverse_near(&self, w: C64, guess: C64) -> Option<C64> {
        let mut y = guess;
        for _ in 0..60 {
            let (v, d) = self.eval_d(y);
            if d.norm() < 1e-300 {
                return None;
            }
            let step = (v - w) / d;
            y -= step;
            if !y.is_finite() {
                return None;
            }
            if step.norm() <= 4.0 * f64::EPSILON * (1.0 + y.norm()) {
                return Some(y);
            }
        }
        let r = (self.eval(y) - w).norm();
        (r <= 1e-12 * (1.0 + w.norm())).then_some(y)
    }
}

// ---------------------------------------------------------------------------
// Parabolic parameters.

/// Real derivatives of `η = F^q − p` and of `∂η/∂θ` at one point.
#[derive(Clone, Copy, Debug)]
struct RealJet {
    value: f64,
    d1: f64,
    d2: f64,
    dtheta: f64,
    d1_dtheta: f64,
}

fn real_jet(map: &AnalyticCircleMap, q: u64, p: i64, x0: f64) -> RealJet {
    let (mut x, mut d, mut pp, mut qq, mut rr) = (x0, 0.0, 1.0, 0.0, 0.0);
    for _ in 0..q {
        let f1 = map.eval(x, 1);
        let f2 = map.eval(x, 2);
        let nr = f2 * pp * pp + f1 * rr;
        let nq = f2 * d * pp + f1 * qq;
        pp *= f1;
        d = f1 * d + 1.0;
        qq = nq;
        rr = nr;
        x = map.lift::<f64>(x);
    }
    RealJet { value: x - p as f64, d1: pp, d2: rr, dtheta: d, d1_dtheta: qq }
}

/// A member of a family whose word `F^q − p` has a real parabolic fixed
/// point: the right endpoint of the `p/q` tongue.
#[derive(Clone, Debug)]
pub struct ParabolicMap {
    pub family: MapFamily,
    pub p: i64,
    pub q: u64,
    pub theta: f64,
    /// Superstable parameter inside the tongue.
    pub theta_superstable: f64,
    pub point: f64,
    /// `∂η/∂θ` at the parabolic point.
    pub dtheta: f64,
    pub eta: ComplexOrbitMap,
    /// Real Taylor coefficients at the point: `[p, 1, a, c, …]`.
    pub jet: Vec<f64>,
}

const JET_ORDER: usize = 12;
/// Terms kept in the asymptotic expansion of the Fatou coordinate.
const FATOU_TERMS: usize = 8;

impl ParabolicMap {
    /// Quadratic coefficient `a` of `η(z) = z + a(z−p)² + …`.
    pub fn quadratic(&self) -> f64 {
        self.jet[2]
    }

    /// `b = 1 − c/a²`, the coefficient of the logarithmic term.
    pub fn log_coefficient(&self) -> f64 {
        1.0 - self.jet[3] / (self.jet[2] * self.jet[2])
    }

    /// Radius of the real-symmetric petal disks used for basepoints and
    /// validation.
    pub fn petal_radius(&self) -> f64 {
        let a = self.quadratic().abs();
        1.0 / (2.0 * a * (self.log_coefficient().abs() + 4.0))
    }

    /// Side of `p` occupied by the attracting petal.
    fn attracting_side(&self) -> f64 {
        -self.quadratic().signum()
    }

    pub fn attracting_base(&self) -> f64 {
        self.point + self.attracting_side() * self.petal_radius()
    }

    pub fn repelling_base(&self) -> f64 {
        self.point - self.attracting_side() * self.petal_radius()
    }

    /// The word after the parameter is moved past the tongue by `dθ`.
    pub fn perturbed(&self, dtheta: f64) -> ComplexOrbitMap {
        let m = self.family.member(Fx::from_f64(self.theta + dtheta));
        ComplexOrbitMap::new(&m, self.q, self.p)
    }

    /// `dθ` whose fixed-point multipliers are close to `exp(±2πiα)`, from
    /// the local normal form `α ≈ √(a ε)/π`.
    pub fn dtheta_for_alpha(&self, alpha: f64) -> f64 {
        let eps = (PI * alpha).powi(2) / self.quadratic().abs();
        eps / self.dtheta
    }

    /// Refines [`Self::dtheta_for_alpha`] until the computed `Re α` matches
    /// `alpha` to relative accuracy `rel_tol`, using `α ∝ √dθ`.
    pub fn dtheta_matching_alpha(&self, alpha: f64, rel_tol: f64) -> Result<f64, ParabolicError> {
        let mut dtheta = self.dtheta_for_alpha(alpha);
        for _ in 0..30 {
            let fp = complex_fixed_points(&self.perturbed(dtheta), self.point, 4.0 * self.petal_radius())?;
            let got = fp.alpha().re;
            if !(got > 0.0) {
                return Err(ParabolicError::NoParabolic { p: self.p, q: self.q, reason: "perturbation stays real".into() });
            }
            if ((got - alpha) / alpha).abs() <= rel_tol {
                return Ok(dtheta);
            }
            dtheta *= (alpha / got).powi(2);
        }
        Err(ParabolicError::NoParabolic { p: self.p, q: self.q, reason: "multiplier match did not converge".into() })
    }
}

fn min_gap(map: &AnalyticCircleMap, q: u64, p: i64) -> (f64, f64) {
    let n = 512 * q as usize;
    let h = 1.0 / n as f64;
    let g = |x: f64| map.iterate_shifted::<f64>(x, q, p) - x;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..n {
        let x = i as f64 * h;
        let v = g(x);
        if v < best.1 {
            best = (x, v);
        }
    }
    // Golden section around the best sample.
    let (mut a, mut b) = (best.0 - h, best.0 + h);
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..80 {
        let c = b - r * (b - a);
        let d = a + r * (b - a);
        if g(c) < g(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let x = 0.5 * (a + b);
    (x, g(x))
}

/// Right endpoint of the `p/q` tongue, where `F^q − p` has a double real
/// fixed point.
pub fn parabolic_parameter(family: &MapFamily, p: i64, q: u64) -> Result<ParabolicMap, ParabolicError> {
    let fail = |reason: &str| ParabolicError::NoParabolic { p, q, reason: reason.into() };
    let theta_c = family.critical_cycle_parameter(p, q)?.to_f64();
    let member = |t: f64| family.member(Fx::from_f64(t));
    let gap = |t: f64| min_gap(&member(t), q, p);
    if gap(theta_c).1 >= 0.0 {
        return Err(fail("superstable member has no attracting cycle"));
    }
    let mut step = 1e-4;
    let mut hi = theta_c + step;
    while gap(hi).1 < 0.0 {
        step *= 2.0;
        hi = theta_c + step;
        if step > 1.0 {
            return Err(fail("tongue does not close"));
        }
    }
    let mut lo = hi - step;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if gap(mid).1 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton on (η(x) − x, η'(x) − 1) = 0 in (x, θ).
    let (mut x, _) = gap(hi);
    let mut theta = hi;
    for _ in 0..30 {
        let j = real_jet(&member(theta), q, p, x);
        let (g1, g2) = (j.value - x, j.d1 - 1.0);
        let (a11, a12, a21, a22) = (j.d1 - 1.0, j.dtheta, j.d2, j.d1_dtheta);
        let det = a11 * a22 - a12 * a21;
        if det == 0.0 || !det.is_finite() {
            return Err(fail("singular Newton system"));
        }
        let dx = (g1 * a22 - g2 * a12) / det;
        let dt = (a11 * g2 - a21 * g1) / det;
        x -= dx;
        theta -= dt;
        if dx.abs() < 1e-16 && dt.abs() < 1e-17 {
            break;
        }
    }
    if (theta - hi).abs() > 1e-6 {
        return Err(fail("Newton left the bracket"));
    }
    let map = member(theta);
    let j = real_jet(&map, q, p, x);
    if j.d2 <= 0.0 {
        return Err(fail("tangency from the wrong side"));
    }
    let eta = ComplexOrbitMap::new(&map, q, p);
    let jet: Vec<f64> = eta.jet(C64::new(x, 0.0), JET_ORDER).iter().map(|c| c.re).collect();
    Ok(ParabolicMap {
        family: family.clone(),
        p,
        q,
        theta,
        theta_superstable: theta_c,
        point: x,
        dtheta: j.dtheta,
        eta,
        jet,
    })
}

// ---------------------------------------------------------------------------
// Fixed points.

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FixedPoints {
    pub z_plus: [f64; 2],
    pub z_minus: [f64; 2],
    pub lambda_plus: [f64; 2],
    pub lambda_minus: [f64; 2],
    /// `λ₊ = exp(2πiα)`.
    pub alpha: [f64; 2],
    pub parabolic: bool,
    /// `| |λ₊λ₋| − |exp(2πiα) exp(−2πiᾱ)| |`.
    pub multiplier_consistency: f64,
}

fn pair_of(z: C64) -> [f64; 2] {
    [z.re, z.im]
}

impl FixedPoints {
    pub fn z_plus(&self) -> C64 {
        C64::new(self.z_plus[0], self.z_plus[1])
    }

    pub fn z_minus(&self) -> C64 {
        C64::new(self.z_minus[0], self.z_minus[1])
    }

    pub fn alpha(&self) -> C64 {
        C64::new(self.alpha[0], self.alpha[1])
    }
}

fn newton_fixed(eta: &ComplexOrbitMap, mut z: C64) -> Option<C64> {
    for _ in 0..200 {
        let (v, d) = eta.eval_d(z);
        let g = v - z;
        let dg = d - 1.0;
        if dg.norm() == 0.0 {
            return None;
        }
        let step = g / dg;
        z -= step;
        if !z.is_finite() || z.norm() > 1e6 {
            return None;
        }
        if step.norm() <= 1e-15 * (1.0 + z.norm()) {
            break;
        }
    }
    let (v, _) = eta.eval_d(z);
    ((v - z).norm() < 1e-12).then_some(z)
}

/// Fixed points of `η` in the box of half-side `radius` about `center`;
/// returns the conjugate pair nearest the real axis.
pub fn complex_fixed_points(eta: &ComplexOrbitMap, center: f64, radius: f64) -> Result<FixedPoints, ParabolicError> {
    const SEEDS: usize = 12;
    let seeds: Vec<C64> = (0..SEEDS * SEEDS)
        .map(|k| {
            let (i, j) = (k % SEEDS, k / SEEDS);
            let t = |n: usize| -1.0 + 2.0 * (n as f64 + 0.5) / SEEDS as f64;
            C64::new(center + radius * t(i), radius * t(j))
        })
        .collect();
    let mut roots: Vec<C64> = Vec::new();
    for s in seeds {
        if let Some(z) = newton_fixed(eta, s) {
            let inside = (z.re - center).abs() <= radius && z.im.abs() <= radius;
            if inside && roots.iter().all(|r| (r - z).norm() > 1e-9) {
                roots.push(z);
            }
        }
    }
    let mut z = *roots
        .iter()
        .min_by(|a, b| {
            let ka = (a.im.abs(), (a.re - center).abs());
            let kb = (b.im.abs(), (b.re - center).abs());
            ka.partial_cmp(&kb).unwrap()
        })
        .ok_or(ParabolicError::NoFixedPoint)?;
    // Near a double root Newton is only linearly convergent: split the pair
    // from the critical point of η(z) − z instead.
    let (_, d) = eta.eval_d(z);
    if (d - 1.0).norm() < 1e-3 {
        let mut c = C64::new(z.re, 0.0);
        for _ in 0..60 {
            let j = eta.jet(c, 2);
            let step = (j[1] - 1.0) / (j[2] * 2.0);
            c -= step;
            if step.norm() < 1e-16 * (1.0 + c.norm()) {
                break;
            }
        }
        let j = eta.jet(c, 2);
        let g = j[0] - c;
        let s = (-(g / j[2])).sqrt();
        z = c + if s.im < 0.0 { -s } else { s };
        if g.norm() <= 64.0 * f64::EPSILON * (1.0 + c.norm()) {
            z = C64::new(c.re, 0.0);
        } else if s.norm() > 1e-9 {
            if let Some(r) = newton_fixed(eta, z) {
                z = r;
            }
        }
    }
    let parabolic = z.im.abs() < 1e-10;
    let (zp, zm) = if z.im >= 0.0 { (z, z.conj()) } else { (z.conj(), z) };
    let lp = eta.eval_d(zp).1;
    let lm = eta.eval_d(zm).1;
    let alpha = lp.ln() / C64::new(0.0, TAU);
    let e = (C64::new(0.0, TAU) * alpha).exp() * (C64::new(0.0, -TAU) * alpha.conj()).exp();
    Ok(FixedPoints {
        z_plus: pair_of(zp),
        z_minus: pair_of(zm),
        lambda_plus: pair_of(lp),
        lambda_minus: pair_of(lm),
        alpha: pair_of(alpha),
        parabolic,
        multiplier_consistency: ((lp * lm).norm() - e.norm()).abs(),
    })
}

// ---------------------------------------------------------------------------
// Fatou coordinates.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Petal {
    Attracting,
    Repelling,
}

/// Coefficients of `U(u) = u − b log u + Σ γ_k u^{−k}` for a germ
/// `z + e₂w² + e₃w³ + …` with `e₂ = a`.
fn fatou_series(e: &[f64], terms: usize) -> (f64, Vec<f64>) {
    let a = e[2];
    let len = terms + 3;
    // η(w)/w = 1 + e₂w + e₃w² + … in t = −a w.
    let ratio: Vec<f64> = (0..=len)
        .map(|k| if k == 0 { 1.0 } else { e.get(k + 1).copied().unwrap_or(0.0) * (-1.0 / a).powi(k as i32) })
        .collect();
    // S = u'/u as a series in t.
    let s = s_recip(&ratio);
    let b = s[2];
    // R(t) = (S − 1)/t − 1 − b log S + Σ γ_k (t'^k − t^k), with t' = t/S.
    let l = s_log1(&s);
    let mut residual: Vec<f64> = (0..len).map(|j| s[j + 1] - b * l[j]).collect();
    residual[0] -= 1.0;
    let inv = s_recip(&s[..len]);
    let mut tp = vec![0.0; len];
    tp[1..].copy_from_slice(&inv[..len - 1]);
    let mut gammas = Vec::with_capacity(terms);
    let mut tp_pow = tp.clone();
    for k in 1..=terms {
        // γ_k (t'^k − t^k) starts with −k γ_k t^{k+1}.
        let g = residual[k + 1] / k as f64;
        let mut diff = tp_pow.clone();
        diff[k] -= 1.0;
        for j in 0..len {
            residual[j] += g * diff[j];
        }
        gammas.push(g);
        tp_pow = s_mul_real(&tp_pow, &tp);
    }
    (b, gammas)
}

/// Fatou coordinate of a petal, normalized to vanish at a real basepoint.
#[derive(Clone, Debug)]
pub struct FatouCoordinate {
    eta: ComplexOrbitMap,
    pub petal: Petal,
    pub point: f64,
    /// Quadratic coefficient of the iterated germ (`η` or its inverse).
    a: f64,
    pub b: f64,
    gammas: Vec<f64>,
    pub base: f64,
    offset: C64,
    pub radius: f64,
    pub n_limit: u64,
    t_max: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct FatouValue {
    pub value: C64,
    /// Size of the first omitted term of the expansion.
    pub error_bound: f64,
    pub steps: u64,
}

/// Inverse of a germ `p + w + e₂w² + …` by fixed-point iteration on series.
fn inverse_germ(e: &[f64]) -> Vec<f64> {
    let n = e.len();
    let mut psi = vec![0.0; n];
    if n > 1 {
        psi[1] = 1.0;
    }
    for _ in 0..n {
        // E(ψ) by Horner.
        let mut acc = vec![0.0; n];
        for k in (1..n).rev() {
            acc = s_mul_real(&acc, &psi);
            acc[0] += e[k];
        }
        acc = s_mul_real(&acc, &psi);
        let mut next = psi.clone();
        for k in 1..n {
            next[k] -= acc[k] - if k == 1 { 1.0 } else { 0.0 };
        }
        psi = next;
    }
    psi[0] = e[0];
    psi
}

impl FatouCoordinate {
    pub fn new(par: &ParabolicMap, petal: Petal, n_limit: u64) -> Result<Self, ParabolicError> {
        let germ = match petal {
            Petal::Attracting => par.jet.clone(),
            Petal::Repelling => inverse_germ(&par.jet),
        };
        let (b, gammas) = fatou_series(&germ, FATOU_TERMS);
        let base = match petal {
            Petal::Attracting => par.attracting_base(),
            Petal::Repelling => par.repelling_base(),
        };
        let mut fc = FatouCoordinate {
            eta: par.eta.clone(),
            petal,
            point: par.point,
            a: germ[2],
            b,
            gammas,
            base,
            offset: C64::new(0.0, 0.0),
            radius: par.petal_radius(),
            n_limit,
            t_max: 0.02,
        };
        fc.offset = fc.raw(C64::new(base, 0.0))?.value;
        Ok(fc)
    }

    fn step(&self, z: C64) -> Option<C64> {
        match self.petal {
            Petal::Attracting => Some(self.eta.eval(z)),
            Petal::Repelling => {
                let guess = z - (self.eta.eval(z) - z);
                self.eta.inverse_near(z, guess)
            }
        }
    }

    fn series(&self, t: C64) -> C64 {
        let u = C64::new(1.0, 0.0) / t;
        let mut acc = u - u.ln() * self.b;
        let mut tk = t;
        for g in &self.gammas {
            acc += tk * *g;
            tk *= t;
        }
        acc
    }

    fn raw(&self, z0: C64) -> Result<FatouValue, ParabolicError> {
        self.raw_with(z0, self.t_max)
    }

    fn raw_with(&self, z0: C64, t_max: f64) -> Result<FatouValue, ParabolicError> {
        let mut z = z0;
        let start = (z0 - self.point).norm().max(self.radius);
        for n in 0..=self.n_limit {
            let t = (z - self.point) * (-self.a);
            if t.norm() <= t_max && t.re > 0.0 {
                let err = self.gammas.last().map(|g| g.abs()).unwrap_or(0.0) * t.norm().powi(FATOU_TERMS as i32 + 1);
                return Ok(FatouValue { value: self.series(t) - n as f64, error_bound: err, steps: n });
            }
            if (z - self.point).norm() > 4.0 * start {
                return Err(ParabolicError::NotInPetal { z: z0, steps: n });
            }
            z = self.step(z).ok_or(ParabolicError::NotInPetal { z: z0, steps: n })?;
        }
        // Best value at the cap, with the residual of the series as a bound.
        let t = (z - self.point) * (-self.a);
        let v = self.series(t) - self.n_limit as f64 - 1.0;
        let next = self.step(z).map(|w| self.series((w - self.point) * (-self.a)) - self.n_limit as f64 - 2.0);
        let err = next.map(|w| (w - v).norm()).unwrap_or(f64::INFINITY);
        Ok(FatouValue { value: v, error_bound: err, steps: self.n_limit })
    }

    /// Unnormalized value (no basepoint offset), whose constant term in the
    /// asymptotic expansion is zero.
    pub fn canonical(&self, z: C64) -> Result<FatouValue, ParabolicError> {
        self.raw(z)
    }

    pub fn eval(&self, z: C64) -> Result<FatouValue, ParabolicError> {
        let mut v = self.raw(z)?;
        v.value -= self.offset;
        Ok(v)
    }

    /// Shift of the coordinate under one step of `η`: `+1` for the
    /// attracting petal, `−1` for the repelling one.
    pub fn abel_shift(&self) -> f64 {
        match self.petal {
            Petal::Attracting => 1.0,
            Petal::Repelling => -1.0,
        }
    }

    /// Points of the petal disk tangent to the real axis at `p`.
    pub fn validation_points(&self, n: usize) -> Vec<C64> {
        let dir = (self.base - self.point).signum();
        let c = C64::new(self.point + dir * self.radius, 0.0);
        (0..n)
            .map(|k| c + C64::from_polar(0.6 * self.radius, TAU * k as f64 / n as f64))
            .collect()
    }

    /// Largest `|Φ(η z) − Φ(z) ∓ 1|` over the points. The two sides stop
    /// at different depths, so the series is evaluated at different points
    /// and the residual measures its truncation error.
    pub fn abel_residual(&self, points: &[C64]) -> Result<f64, ParabolicError> {
        let mut worst: f64 = 0.0;
        for &z in points {
            let a = self.raw_with(z, self.t_max)?.value;
            let b = self.raw_with(self.eta.eval(z), 0.5 * self.t_max)?.value;
            worst = worst.max((b - a - self.abel_shift()).norm());
        }
        Ok(worst)
    }
}

// ---------------------------------------------------------------------------
// Almost parabolic cascades.

#[derive(Clone, Copy, Debug, Serialize)]
pub struct DouadyPhase {
    pub dtheta: f64,
    pub alpha: [f64; 2],
    pub n_cascade: u64,
    /// `n · Re α`.
    pub cascade_product: f64,
    /// Fractional part of `Re(1/α)`.
    pub theta_phase: f64,
    /// Fractional part of `Ψ(η^n a) − Φ(a) − n + 1/α`, measured with the
    /// canonical Fatou coordinates of the parabolic limit.
    pub transit_phase: f64,
}

/// Counts the steps an almost parabolic perturbation needs to carry the
/// attracting basepoint past the repelling one.
pub fn douady_phase(par: &ParabolicMap, dtheta: f64, cap: u64) -> Result<DouadyPhase, ParabolicError> {
    let eta = par.perturbed(dtheta);
    let (a, r) = (par.attracting_base(), par.repelling_base());
    let forward = (r - a).signum();
    if dtheta <= 0.0 || forward <= 0.0 {
        return Err(ParabolicError::BadBasepoints { left: a, right: r });
    }
    let fp = complex_fixed_points(&eta, par.point, 4.0 * par.petal_radius())?;
    let alpha = fp.alpha();
    let mut x = C64::new(a, 0.0);
    let mut n = 0u64;
    while (x.re - r) * forward < 0.0 {
        x = eta.eval(x);
        n += 1;
        if n > cap {
            return Err(ParabolicError::CascadeCap { cap });
        }
    }
    let att = FatouCoordinate::new(par, Petal::Attracting, 100_000)?;
    let rep = FatouCoordinate::new(par, Petal::Repelling, 100_000)?;
    let psi = -rep.canonical(x)?.value.re;
    let phi = att.canonical(C64::new(a, 0.0))?.value.re;
    let inv = (C64::new(1.0, 0.0) / alpha).re;
    let sigma = psi - phi - n as f64 + inv;
    Ok(DouadyPhase {
        dtheta,
        alpha: pair_of(alpha),
        n_cascade: n,
        cascade_product: n as f64 * alpha.re,
        theta_phase: inv.rem_euclid(1.0),
        transit_phase: sigma.rem_euclid(1.0),
    })
}

/// Circular distance between phases in `[0, 1)`.
pub fn phase_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

// ---------------------------------------------------------------------------
// The involution about the lower fixed point.

/// `τ₋(z) = z₋ − 1/(z − z₋)`.
#[inline]
pub fn tau_minus(z_minus: C64, z: C64) -> C64 {
    z_minus - C64::new(1.0, 0.0) / (z - z_minus)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct TauCheck {
    /// Largest `|τ(τ z) − z| / (|z| + |z₋|)` in units of machine epsilon.
    pub involution_ulps: f64,
    /// Slope of log area ratio against log distance; `−4` in theory.
    pub jacobian_slope: f64,
    pub fit: LinearFit,
}

/// Shoelace area of a closed polygon.
pub fn polygon_area(v: &[C64]) -> f64 {
    let n = v.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        s += a.re * b.im - b.re * a.im;
    }
    0.5 * s.abs()
}

pub fn disk_polygon(center: C64, radius: f64, n: usize) -> Vec<C64> {
    (0..n).map(|k| center + C64::from_polar(radius, TAU * k as f64 / n as f64)).collect()
}

pub fn tau_check(z_minus: C64) -> TauCheck {
    let mut worst: f64 = 0.0;
    for k in 0..64 {
        let r = 10f64.powf(-3.0 + 3.0 * k as f64 / 63.0);
        let z = z_minus + C64::from_polar(r, 0.37 + TAU * k as f64 / 64.0);
        let back = tau_minus(z_minus, tau_minus(z_minus, z));
        worst = worst.max((back - z).norm() / (z.norm() + z_minus.norm()));
    }
    let (mut lx, mut ly) = (Vec::new(), Vec::new());
    for k in 0..12 {
        let d = 10f64.powf(-4.0 + 0.5 * k as f64);
        let w = z_minus + C64::from_polar(d, 1.1);
        let poly = disk_polygon(w, 1e-3 * d, 64);
        let image: Vec<C64> = poly.iter().map(|&z| tau_minus(z_minus, z)).collect();
        lx.push(d.ln());
        ly.push((polygon_area(&image) / polygon_area(&poly)).ln());
    }
    let fit = linear_fit(&lx, &ly).expect("twelve distinct radii");
    TauCheck { involution_ulps: worst / f64::EPSILON, jacobian_slope: fit.slope, fit }
}

// ---------------------------------------------------------------------------
// Lattices of disks under the complete dynamics.

/// A disk tracked as a closed polygon.
#[derive(Clone, Debug)]
pub struct LatticeElement {
    pub vertices: Vec<C64>,
    pub center: C64,
    pub area: f64,
    /// Net forward steps from `Δ`: positive for images, negative for
    /// preimages.
    pub generation: i64,
    /// Non-real inverse branches at critical points used on the way.
    pub branchings: u32,
}

impl LatticeElement {
    fn new(vertices: Vec<C64>, generation: i64, branchings: u32) -> Self {
        let n = vertices.len() as f64;
        let center = vertices.iter().sum::<C64>() / n;
        let area = polygon_area(&vertices);
        LatticeElement { vertices, center, area, generation, branchings }
    }

    fn shifted(&self, by: f64) -> Self {
        let mut e = self.clone();
        for v in &mut e.vertices {
            *v += by;
        }
        e.center += by;
        e
    }

    pub fn is_real(&self) -> bool {
        self.center.im.abs() <= 1e-12 * (1.0 + self.center.norm())
    }

    pub fn diameter(&self) -> f64 {
        let mut d: f64 = 0.0;
        for v in &self.vertices {
            d = d.max(2.0 * (v - self.center).norm());
        }
        d
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LatticeSpec {
    /// Inverse (and forward) steps allowed from `Δ`.
    pub depth: usize,
    pub max_branchings: u32,
    pub max_elements: usize,
    pub vertices: usize,
    /// Identify `z ~ z + period` and reduce centers to `[origin, origin + period)`.
    pub period: Option<f64>,
    pub origin: f64,
    /// Elements with `|Im center|` beyond this are dropped.
    pub height: f64,
    /// Elements smaller than this fraction of `area(Δ)` are not kept.
    pub area_floor: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec {
            depth: 2000,
            max_branchings: 2,
            max_elements: 150_000,
            vertices: 64,
            period: Some(1.0),
            origin: 0.0,
            height: 0.5,
            area_floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Lattice {
    pub elements: Vec<LatticeElement>,
    /// Candidates discarded as non-univalent or out of range.
    pub dropped: usize,
    pub truncated: bool,
    pub critical_points: Vec<f64>,
    period: Option<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Critical {
    point: f64,
    value: C64,
    cubic: C64,
    reach: f64,
}

/// Real critical points of the word in `[lo, hi)`, with their cubic
/// coefficients and the radius in which the cubic term dominates.
fn critical_points(eta: &ComplexOrbitMap, lo: f64, hi: f64) -> Vec<Critical> {
    let n = 4096 * eta.q.max(1) as usize;
    let h = (hi - lo) / n as f64;
    let d = |x: f64| eta.eval_d(C64::new(x, 0.0)).1.re;
    let vals: Vec<f64> = (0..=n + 1).map(|i| d(lo + (i as f64 - 0.5) * h)).collect();
    let mut out: Vec<Critical> = Vec::new();
    for i in 1..=n {
        if !(vals[i] <= vals[i - 1] && vals[i] <= vals[i + 1] && vals[i] < 1e-2) {
            continue;
        }
        let mut c = lo + (i as f64 - 0.5) * h;
        for _ in 0..60 {
            let j = eta.jet(C64::new(c, 0.0), 3);
            if j[3].re == 0.0 {
                break;
            }
            let step = (2.0 * j[2].re) / (6.0 * j[3].re);
            c -= step;
            if step.abs() < 1e-16 {
                break;
            }
        }
        let j = eta.jet(C64::new(c, 0.0), 6);
        if j[1].norm() > 1e-9 || !(lo..hi).contains(&c) || out.iter().any(|o| (o.point - c).abs() < 1e-9) {
            continue;
        }
        let k3 = j[3].norm();
        // Seeds are polished by Newton and every pullback is checked, so the
        // reach only needs to keep seeds inside the right basin.
        let mut reach: f64 = 0.25;
        for (k, jk) in j.iter().enumerate().skip(4) {
            if jk.norm() > 0.0 {
                reach = reach.min(0.5 * (k3 / jk.norm()).powf(1.0 / (k as f64 - 3.0)));
            }
        }
        out.push(Critical { point: c, value: j[0], cubic: j[3], reach });
    }
    out
}

fn segments_cross(a: C64, b: C64, c: C64, d: C64) -> bool {
    let orient = |p: C64, q: C64, r: C64| (q - p).re * (r - p).im - (q - p).im * (r - p).re;
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Simple and positively oriented.
fn is_univalent_image(v: &[C64]) -> bool {
    let n = v.len();
    let mut signed = 0.0;
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        signed += a.re * b.im - b.re * a.im;
    }
    if !(signed > 0.0) || !signed.is_finite() {
        return false;
    }
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

struct LatticeBuilder<'a> {
    eta: &'a ComplexOrbitMap,
    spec: &'a LatticeSpec,
    critical: Vec<Critical>,
    seen: std::collections::HashSet<(i64, i64, i64)>,
    elements: Vec<LatticeElement>,
    dropped: usize,
    min_area: f64,
}

impl LatticeBuilder<'_> {
    fn reduce(&self, e: LatticeElement) -> LatticeElement {
        match self.spec.period {
            Some(p) => {
                let k = ((e.center.re - self.spec.origin) / p).floor();
                if k == 0.0 {
                    e
                } else {
                    e.shifted(-k * p)
                }
            }
            None => e,
        }
    }

    fn key(e: &LatticeElement) -> (i64, i64, i64) {
        let l = e.area.sqrt().max(1e-300) * 1e-3;
        ((e.center.re / l).round() as i64, (e.center.im / l).round() as i64, (e.area.ln() * 1e3).round() as i64)
    }

    /// Records a new element; `false` for duplicates and rejects.
    fn admit(&mut self, e: LatticeElement) -> Option<usize> {
        let e = self.reduce(e);
        let max_d = self.spec.period.map(|p| 0.5 * p).unwrap_or(f64::INFINITY);
        if e.center.im.abs() > self.spec.height || e.diameter() > max_d || !(e.area >= self.min_area) {
            self.dropped += 1;
            return None;
        }
        if !self.seen.insert(Self::key(&e)) {
            return None;
        }
        self.elements.push(e);
        Some(self.elements.len() - 1)
    }

    /// Pulls a polygon back along the branch through `y_c`.
    fn pull_back(&self, e: &LatticeElement, y_c: C64) -> Option<Vec<C64>> {
        let n = e.vertices.len();
        let mut out: Vec<C64> = Vec::with_capacity(n);
        let (_, mut d) = self.eta.eval_d(y_c);
        let mut prev_y = y_c;
        let mut prev_v = e.center;
        for k in 0..=n {
            let v = e.vertices[k % n];
            let guess = prev_y + (v - prev_v) / d;
            let y = self.eta.inverse_near(v, guess)?;
            if (y - guess).norm() > 0.5 * (y - prev_y).norm().max(1e-300) + 1e-14 {
                return None;
            }
            if k == n {
                // The continuation must close up on the first vertex.
                if (y - out[0]).norm() > 1e-9 * (1.0 + y.norm()) {
                    return None;
                }
                break;
            }
            d = self.eta.eval_d(y).1;
            out.push(y);
            prev_y = y;
            prev_v = v;
        }
        is_univalent_image(&out).then_some(out)
    }

    /// Preimage branches of the element: the local inverse and the non-real
    /// cube roots at nearby critical values.
    fn branches(&self, e: &LatticeElement, allow_critical: bool) -> Vec<(C64, bool)> {
        let w = e.center;
        let mut out: Vec<(C64, bool)> = Vec::new();
        let guess = w - (self.eta.eval(w) - w);
        if let Some(y) = self.eta.inverse_near(w, guess) {
            out.push((y, false));
        }
        if !allow_critical {
            return out;
        }
        for c in &self.critical {
            let shifts: Vec<f64> = match self.spec.period {
                Some(p) => {
                    let k = ((w.re - c.value.re) / p).round();
                    vec![k * p]
                }
                None => vec![0.0],
            };
            for sh in shifts {
                let dv = w - (c.value + sh);
                let s0 = (dv / c.cubic).powf(1.0 / 3.0);
                if s0.norm() > c.reach || s0.norm() < e.diameter() * 1e-6 {
                    continue;
                }
                for k in 0..3 {
                    let seed = C64::new(c.point + sh, 0.0) + s0 * C64::from_polar(1.0, TAU * k as f64 / 3.0);
                    if let Some(y) = self.eta.inverse_near(w, seed) {
                        let distinct = out.iter().all(|(o, _)| (o - y).norm() > 1e-9 * (1.0 + y.norm()));
                        if distinct && y.im.abs() > 1e-12 {
                            out.push((y, true));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Images and univalent preimages of the polygon `Δ` under the complete
/// dynamics of `η`, expanded largest first.
pub fn parabolic_lattice(eta: &ComplexOrbitMap, delta_center: f64, delta_radius: f64, spec: &LatticeSpec) -> Lattice {
    use std::cmp::Ordering;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct Item(f64, usize, usize);
    impl Eq for Item {}
    impl PartialOrd for Item {
        fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
            Some(self.cmp(o))
        }
    }
    impl Ord for Item {
        fn cmp(&self, o: &Self) -> Ordering {
            self.0.total_cmp(&o.0).then(o.1.cmp(&self.1))
        }
    }

    let (lo, hi) = match spec.period {
        Some(p) => (spec.origin, spec.origin + p),
        None => (delta_center - 1.0, delta_center + 1.0),
    };
    let delta = LatticeElement::new(disk_polygon(C64::new(delta_center, 0.0), delta_radius, spec.vertices), 0, 0);
    let mut b = LatticeBuilder {
        eta,
        spec,
        critical: critical_points(eta, lo, hi),
        seen: Default::default(),
        elements: Vec::new(),
        dropped: 0,
        min_area: spec.area_floor * delta.area,
    };
    let mut heap = BinaryHeap::new();
    if let Some(i) = b.admit(delta.clone()) {
        heap.push(Item(b.elements[i].area, i, spec.depth));
    }
    let mut cur = delta;
    for k in 1..=spec.depth {
        let img: Vec<C64> = cur.vertices.iter().map(|&z| eta.eval(z)).collect();
        if !is_univalent_image(&img) {
            b.dropped += 1;
            break;
        }
        cur = LatticeElement::new(img, k as i64, 0);
        match b.admit(cur.clone()) {
            Some(i) => heap.push(Item(b.elements[i].area, i, spec.depth)),
            None => break,
        }
    }
    let mut truncated = false;
    while let Some(Item(_, i, left)) = heap.pop() {
        if left == 0 {
            continue;
        }
        if b.elements.len() >= spec.max_elements {
            truncated = true;
            break;
        }
        let e = b.elements[i].clone();
        let allow = e.branchings < spec.max_branchings;
        for (y, critical) in b.branches(&e, allow) {
            match b.pull_back(&e, y) {
                Some(v) => {
                    let ne = LatticeElement::new(v, e.generation - 1, e.branchings + critical as u32);
                    if let Some(j) = b.admit(ne) {
                        heap.push(Item(b.elements[j].area, j, left - 1));
                    }
                }
                None => b.dropped += 1,
            }
        }
    }
    Lattice {
        critical_points: b.critical.iter().map(|c| c.point).collect(),
        elements: b.elements,
        dropped: b.dropped,
        truncated,
        period: spec.period,
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct LatticeSummary {
    pub z0: f64,
    pub l: f64,
    /// Real center of the chosen window.
    pub y: f64,
    pub elements: usize,
    pub area_sum: f64,
    pub c_hat: f64,
    /// `area_sum / (π l²)`.
    pub capacity_ratio: f64,
    pub capacity_ok: bool,
}

/// Best pointed window `(U, y)`, `U` the disk of radius `l` about a real
/// lattice center `y` with `|y − z0| ≤ 2l`; sums the areas of the elements
/// contained in `U`.
pub fn grid_area_sum(lattice: &Lattice, z0: f64, l: f64) -> Result<LatticeSummary, ParabolicError> {
    let wrap = |x: f64, around: f64| match lattice.period {
        Some(p) => x - ((x - around) / p).round() * p,
        None => x,
    };
    let candidates: Vec<f64> = lattice
        .elements
        .iter()
        .filter(|e| e.is_real())
        .map(|e| wrap(e.center.re, z0))
        .filter(|y| (0.5 * l..=2.0 * l).contains(&(y - z0).abs()))
        .collect();
    if candidates.is_empty() {
        let nearest = lattice
            .elements
            .iter()
            .filter(|e| e.is_real())
            .map(|e| (wrap(e.center.re, z0) - z0).abs())
            .fold(f64::INFINITY, f64::min);
        return Err(ParabolicError::NoWindow(format!("nearest real element at distance {nearest:e}, l = {l:e}")));
    }
    let mut best: Option<LatticeSummary> = None;
    for y in candidates {
        let (mut sum, mut count) = (0.0, 0usize);
        for e in &lattice.elements {
            let sh = wrap(e.center.re, y) - e.center.re;
            if (e.center + sh - y).norm() > l {
                continue;
            }
            if e.vertices.iter().all(|v| (v + sh - y).norm() <= l) {
                sum += e.area;
                count += 1;
            }
        }
        let s = LatticeSummary {
            z0,
            l,
            y,
            elements: count,
            area_sum: sum,
            c_hat: sum / (l * l),
            capacity_ratio: sum / (PI * l * l),
            capacity_ok: sum <= PI * l * l * 1.1,
        };
        if best.map_or(true, |b| s.area_sum > b.area_sum) {
            best = Some(s);
        }
    }
    Ok(best.expect("non-empty candidates"))
}

/// Area sums of the lattice of the height-`r` map `[r; 1, 1, …]` over a
/// ladder of windows.
#[derive(Clone, Debug, Serialize)]
pub struct AreaSweep {
    pub height: u64,
    pub theta: f64,
    /// Index of the shortest chain interval, where `Δ` sits.
    pub gap_index: usize,
    pub elements: usize,
    pub truncated: bool,
    /// `(chain index, summary)` for every window tried.
    pub windows: Vec<(usize, LatticeSummary)>,
    pub min_c_hat: f64,
    pub capacity_ok: bool,
}

/// Windows around the gap, halfway to `0` and halfway to the end of the
/// chain, with radii from `2|η^i I|` up to `l_max` in steps of 4. The
/// search depth is raised to `20r` so that backward orbits cross the gap.
pub fn area_sweep(family: &MapFamily, r: u64, spec: &LatticeSpec, l_max: f64) -> Result<(Lattice, AreaSweep), ParabolicError> {
    let cf = crate::ContinuedFraction::periodic(vec![r.max(1)], vec![1]).expect("positive terms");
    let tuning = family.tune_to_rotation(&cf, 6)?;
    let map = family.member(tuning.theta);
    let eta = ComplexOrbitMap::new(&map, 1, 0);
    let chain: Vec<f64> = (0..=r + 1).map(|k| map.iterate_shifted::<f64>(0.0, k, 0)).collect();
    let lens: Vec<f64> = chain.windows(2).map(|w| w[1] - w[0]).collect();
    let gap = (0..r as usize).min_by(|&a, &b| lens[a].total_cmp(&lens[b])).unwrap_or(0);
    let spec = LatticeSpec { depth: spec.depth.max(20 * r as usize), ..spec.clone() };
    let lattice = parabolic_lattice(&eta, 0.5 * (chain[gap] + chain[gap + 1]), 0.4 * lens[gap], &spec);
    let mut windows = Vec::new();
    for i in [gap, gap / 2, (gap + r as usize) / 2] {
        let z0 = 0.5 * (chain[i] + chain[i + 1]);
        let mut l = 2.0 * lens[i];
        while l <= l_max {
            windows.push((i, grid_area_sum(&lattice, z0, l)?));
            l *= 4.0;
        }
    }
    let sweep = AreaSweep {
        height: r,
        theta: map.theta_f64(),
        gap_index: gap,
        elements: lattice.elements.len(),
        truncated: lattice.truncated,
        min_c_hat: windows.iter().map(|w| w.1.c_hat).fold(f64::INFINITY, f64::min),
        capacity_ok: windows.iter().all(|w| w.1.capacity_ok),
        windows,
    };
    Ok((lattice, sweep))
}

// ---------------------------------------------------------------------------
// Filled Julia sets of pairs.

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RasterView {
    pub center: f64,
    pub half_width: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct RasterSpec {
    pub resolution: usize,
    pub max_iter: u32,
    /// Escape radius in units of `|I_H|` about the interval midpoint.
    pub k_range: f64,
    /// Defaults to the escape disk.
    pub view: Option<RasterView>,
}

impl Default for RasterSpec {
    fn default() -> Self {
        RasterSpec { resolution: 512, max_iter: 512, k_range: 2.0, view: None }
    }
}

/// Half-angle of the cone about the imaginary axis where `η∘ξ` is applied.
const NU_CONE: f64 = 0.577_350_269_189_625_8;

#[derive(Clone, Debug)]
pub struct JuliaRaster {
    pub resolution: usize,
    pub view: RasterView,
    pub max_iter: u32,
    pub k_range: f64,
    pub interval: [f64; 2],
    /// Escape time per pixel, row-major from the top; `0` for pixels that
    /// never left the escape disk.
    pub escape: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RasterSidecar {
    pub resolution: usize,
    pub view: RasterView,
    pub max_iter: u32,
    pub k_range: f64,
    pub interval: [f64; 2],
    pub pixel_size: f64,
    pub rows: String,
    pub rule: String,
    pub marked_fraction: f64,
}

impl JuliaRaster {
    pub fn pixel_size(&self) -> f64 {
        2.0 * self.view.half_width / self.resolution as f64
    }

    /// Sample point of pixel `(i, j)`; row `N/2` lies on the real axis.
    pub fn point(&self, i: usize, j: usize) -> C64 {
        pixel_point(self.view, self.resolution, i, j)
    }

    pub fn marked(&self, i: usize, j: usize) -> bool {
        self.escape[j * self.resolution + i] == 0
    }

    pub fn marked_fraction(&self) -> f64 {
        self.escape.iter().filter(|&&e| e == 0).count() as f64 / self.escape.len() as f64
    }

    /// Rows `j` and `N − j` agree for `1 ≤ j < N`.
    pub fn is_conjugation_symmetric(&self) -> bool {
        let n = self.resolution;
        (1..n).all(|j| self.escape[j * n..(j + 1) * n] == self.escape[(n - j) * n..(n - j + 1) * n])
    }

    /// Binary PGM: bounded pixels 255, escaping ones 0.
    pub fn to_pgm(&self) -> Vec<u8> {
        let n = self.resolution;
        let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
        out.extend(self.escape.iter().map(|&e| if e == 0 { 255 } else { 0 }));
        out
    }

    pub fn sidecar(&self) -> RasterSidecar {
        RasterSidecar {
            resolution: self.resolution,
            view: self.view,
            max_iter: self.max_iter,
            k_range: self.k_range,
            interval: self.interval,
            pixel_size: self.pixel_size(),
            rows: "row j samples Im z = (N/2 - j) * pixel_size".into(),
            rule: "eta where Re z lies over I_eta, xi over I_xi, eta o xi in the cone |Re z| <= |Im z|/sqrt(3)".into(),
            marked_fraction: self.marked_fraction(),
        }
    }
}

/// Escape-time raster of the shadow dynamics of a pair.
pub fn julia_raster(pair: &CommutingPair, spec: &RasterSpec) -> Result<JuliaRaster, ParabolicError> {
    if !(16..=4096).contains(&spec.resolution) {
        return Err(ParabolicError::Resolution(spec.resolution));
    }
    let (eta, xi) = ComplexOrbitMap::from_pair(pair);
    let (a, b) = (pair.eta0(), pair.xi0());
    let (lo, hi) = (a.min(b), a.max(b));
    let len = hi - lo;
    let mid = 0.5 * (lo + hi);
    let radius = spec.k_range * len;
    let view = spec.view.unwrap_or(RasterView { center: mid, half_width: radius });
    let eta_side = b.signum();
    let n = spec.resolution;
    let escape_of = |z0: C64| -> u32 {
        let mut z = z0;
        for k in 1..=spec.max_iter {
            if (z - mid).norm() > radius || !z.is_finite() {
                return k;
            }
            z = if z.re.abs() <= NU_CONE * z.im.abs() {
                eta.eval(xi.eval(z))
            } else if z.re * eta_side > 0.0 {
                eta.eval(z)
            } else {
                xi.eval(z)
            };
        }
        if (z - mid).norm() > radius || !z.is_finite() {
            spec.max_iter + 1
        } else {
            0
        }
    };
    let mut escape = vec![0u32; n * n];
    escape.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        for (i, px) in row.iter_mut().enumerate() {
            *px = escape_of(pixel_point(view, n, i, j));
        }
    });
    Ok(JuliaRaster { resolution: n, view, max_iter: spec.max_iter, k_range: spec.k_range, interval: [lo, hi], escape })
}

/// Rows are placed by integer offsets from the middle row so that rows
/// `j` and `N - j` are exact conjugates.
fn pixel_point(view: RasterView, n: usize, i: usize, j: usize) -> C64 {
    let h = 2.0 * view.half_width / n as f64;
    let half = (n / 2) as f64;
    C64::new(view.center + (i as f64 - half) * h, (half - j as f64) * h)
}

// ---------------------------------------------------------------------------
// Deep points.

/// Exact squared Euclidean distance transform of one line.
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Distance in pixels from every pixel to the nearest marked one.
fn distance_to_marked(r: &JuliaRaster) -> Vec<f64> {
    let n = r.resolution;
    let mut g = vec![0f64; n * n];
    // Columns first.
    for i in 0..n {
        let f: Vec<f64> = (0..n).map(|j| if r.marked(i, j) { 0.0 } else { f64::INFINITY }).collect();
        let mut out = vec![0f64; n];
        edt_1d(&f, &mut out);
        for j in 0..n {
            g[j * n + i] = out[j];
        }
    }
    let mut d = vec![0f64; n * n];
    for j in 0..n {
        edt_1d(&g[j * n..(j + 1) * n], &mut d[j * n..(j + 1) * n]);
    }
    d.iter_mut().for_each(|v| *v = v.sqrt());
    d
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ProfileRow {
    pub r: f64,
    pub s: f64,
    pub usable: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DeepPointProfile {
    pub rows: Vec<ProfileRow>,
    /// Slope of `log s` against `log r`; the point is deep when it exceeds 1.
    pub slope: f64,
    pub beta: f64,
    pub fit: LinearFit,
}

/// Largest disk inside `B(0, r)` avoiding the marked set, for each radius;
/// radii are in units of `|I_H|`.
pub fn deep_point_profile(raster: &JuliaRaster, radii: &[f64]) -> Result<DeepPointProfile, ParabolicError> {
    let n = raster.resolution;
    let px = raster.pixel_size();
    let unit = raster.interval[1] - raster.interval[0];
    let dist = distance_to_marked(raster);
    let mut rows = Vec::new();
    for &r_rel in radii {
        let r = r_rel * unit;
        let reach = (r / px).ceil() as i64 + 1;
        let (ci, cj) = ((-raster.view.center + raster.view.half_width) / px, raster.view.half_width / px);
        let inside = r <= raster.view.half_width - raster.view.center.abs();
        let usable_px = r / px >= 8.0;
        let mut s: f64 = 0.0;
        let (i0, j0) = (ci.round() as i64, cj.round() as i64);
        for dj in -reach..=reach {
            for di in -reach..=reach {
                let (i, j) = (i0 + di, j0 + dj);
                if i < 0 || j < 0 || i >= n as i64 || j >= n as i64 {
                    continue;
                }
                let z = raster.point(i as usize, j as usize);
                let room = r - z.norm();
                if room <= 0.0 {
                    continue;
                }
                let d = dist[j as usize * n + i as usize] * px;
                s = s.max(d.min(room));
            }
        }
        rows.push(ProfileRow { r: r_rel, s: s / unit, usable: inside && usable_px && s > 0.0 });
    }
    let (lx, ly): (Vec<f64>, Vec<f64>) = rows.iter().filter(|r| r.usable).map(|r| (r.r.ln(), r.s.ln())).unzip();
    if lx.len() < 3 {
        return Err(ParabolicError::TooFewRadii(lx.len()));
    }
    let fit = linear_fit(&lx, &ly).expect("three radii");
    Ok(DeepPointProfile { rows, slope: fit.slope, beta: fit.slope - 1.0, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arnold() -> MapFamily {
        MapFamily::arnold_cubic()
    }

    #[test]
    fn jet_matches_value_and_derivative() {
        let m = AnalyticCircleMap::arnold_cubic(0.3);
        let eta = ComplexOrbitMap::new(&m, 3, 1);
        let z = C64::new(0.21, 0.03);
        let j = eta.jet(z, 4);
        let (v, d) = eta.eval_d(z);
        assert!((j[0] - v).norm() < 1e-14);
        assert!((j[1] - d).norm() < 1e-12);
        // Second coefficient against a central difference of the derivative.
        let h = 1e-5;
        let d2 = (eta.eval_d(z + h).1 - eta.eval_d(z - h).1) / (2.0 * h);
        assert!((j[2] * 2.0 - d2).norm() < 1e-6 * d2.norm().max(1.0));
        // Real arguments stay real and agree with the real lift.
        let x = 0.4;
        let r = eta.eval(C64::new(x, 0.0));
        assert_eq!(r.im, 0.0);
        assert!((r.re - m.iterate_shifted::<f64>(x, 3, 1)).abs() < 1e-14);
    }

    #[test]
    fn conjugation_symmetry_is_exact() {
        let m = AnalyticCircleMap::arnold_cubic(0.61);
        let eta = ComplexOrbitMap::new(&m, 5, 3);
        for k in 0..20 {
            let z = C64::new(-0.3 + 0.05 * k as f64, 0.001 * k as f64);
            assert_eq!(eta.eval(z.conj()), eta.eval(z).conj());
        }
    }

    #[test]
    fn zero_tongue_edge_is_known_in_closed_form() {
        let par = parabolic_parameter(&arnold(), 0, 1).unwrap();
        assert!((par.theta - 1.0 / TAU).abs() < 1e-15, "{}", par.theta);
        assert!((par.point.rem_euclid(1.0) - 0.25).abs() < 1e-8);
        assert!((par.quadratic() - PI).abs() < 1e-7);
        assert!((par.log_coefficient() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn series_solves_the_abel_equation_formally() {
        // Germ w + w² + 0.3 w³ − 0.2 w⁴: U(u') − U(u) − 1 must vanish to the
        // truncation order in t = 1/u.
        let e = [0.0, 1.0, 1.0, 0.3, -0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let (b, g) = fatou_series(&e, FATOU_TERMS);
        assert!((b - (1.0 - 0.3)).abs() < 1e-15);
        let u_of = |w: C64| -C64::new(1.0, 0.0) / w;
        let big_u = |u: C64| {
            let t = C64::new(1.0, 0.0) / u;
            let mut acc = u - u.ln() * b;
            let mut tk = t;
            for c in &g {
                acc += tk * *c;
                tk *= t;
            }
            acc
        };
        for &w in &[-1e-3, -2e-3, -4e-3] {
            let w = C64::new(w, 0.0);
            let eta = w + w * w + w * w * w * 0.3 - w * w * w * w * 0.2;
            let r = (big_u(u_of(eta)) - big_u(u_of(w)) - 1.0).norm();
            assert!(r < 1e-12 + 10.0 * w.norm().powi(FATOU_TERMS as i32 + 1), "{r:e}");
        }
    }

    #[test]
    fn inverse_germ_inverts() {
        let e = [0.5, 1.0, 2.0, -1.0, 0.7, 0.0, 0.0, 0.0];
        let psi = inverse_germ(&e);
        let w: f64 = 1e-3;
        let y = (1..e.len()).map(|k| psi[k] * w.powi(k as i32)).sum::<f64>();
        let back = (1..e.len()).map(|k| e[k] * y.powi(k as i32)).sum::<f64>();
        assert!((back - w).abs() < 1e-18);
    }

    #[test]
    fn abel_equation_holds_in_both_petals() {
        for (p, q) in [(0, 1), (1, 2), (1, 3), (2, 5)] {
            let par = parabolic_parameter(&arnold(), p, q).unwrap();
            assert!(par.theta > par.theta_superstable);
            for petal in [Petal::Attracting, Petal::Repelling] {
                let fc = FatouCoordinate::new(&par, petal, 100_000).unwrap();
                assert!(fc.eval(C64::new(fc.base, 0.0)).unwrap().value.norm() < 1e-12);
                let pts = fc.validation_points(32);
                let r = fc.abel_residual(&pts).unwrap();
                assert!(r <= 1e-6, "{p}/{q} {petal:?}: {r:e}");
            }
        }
    }

    #[test]
    fn orbit_outside_the_petal_is_rejected() {
        let par = parabolic_parameter(&arnold(), 0, 1).unwrap();
        let fc = FatouCoordinate::new(&par, Petal::Attracting, 1000).unwrap();
        // Just right of the parabolic point, forward orbits move away.
        let z = C64::new(par.point + 0.5 * par.petal_radius(), 0.0);
        assert!(matches!(fc.eval(z), Err(ParabolicError::NotInPetal { .. })));
    }

    #[test]
    fn perturbation_splits_into_a_conjugate_pair() {
        let par = parabolic_parameter(&arnold(), 1, 2).unwrap();
        let fp0 = complex_fixed_points(&par.eta, par.point, 4.0 * par.petal_radius()).unwrap();
        assert!(fp0.parabolic);
        let eta = par.perturbed(par.dtheta_for_alpha(5e-3));
        let fp = complex_fixed_points(&eta, par.point, 4.0 * par.petal_radius()).unwrap();
        assert!(!fp.parabolic);
        assert!(fp.z_plus[1] > 0.0 && fp.z_plus[1] < 1e-2);
        assert_eq!(fp.z_minus(), fp.z_plus().conj());
        let alpha = fp.alpha();
        assert!(alpha.re > 0.0 && alpha.im.abs() < alpha.re, "{alpha}");
        assert!((alpha.re - 5e-3).abs() < 1e-3, "{alpha}");
        assert!(fp.multiplier_consistency < 1e-12);
    }

    #[test]
    fn cascade_length_tracks_inverse_alpha() {
        let par = parabolic_parameter(&arnold(), 0, 1).unwrap();
        let mut last = 0;
        let mut phases = Vec::new();
        for alpha in [1e-2, 5e-3, 2e-3, 1e-3] {
            let d = douady_phase(&par, par.dtheta_for_alpha(alpha), 10_000_000).unwrap();
            assert!((0.5..=2.0).contains(&d.cascade_product), "{d:?}");
            assert!(d.n_cascade > last);
            last = d.n_cascade;
            phases.push(d.transit_phase);
        }
        // The transit phase converges as α → 0.
        assert!(phase_distance(phases[2], phases[3]) < 0.05, "{phases:?}");
    }

    #[test]
    fn tau_is_an_involution_with_fourth_power_jacobian() {
        let c = tau_check(C64::new(0.3, -0.01));
        assert!(c.involution_ulps <= 10.0, "{}", c.involution_ulps);
        assert!((c.jacobian_slope + 4.0).abs() < 0.2, "{}", c.jacobian_slope);
    }

    fn synthetic(n: usize, marked: impl Fn(C64) -> bool) -> JuliaRaster {
        let view = RasterView { center: 0.0, half_width: 1.0 };
        let escape = (0..n * n).map(|k| if marked(pixel_point(view, n, k % n, k / n)) { 0 } else { 1 }).collect();
        JuliaRaster { resolution: n, view, max_iter: 1, k_range: 1.0, interval: [-0.5, 0.5], escape }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let n = 40;
        let r = synthetic(n, |z| ((z.re * 7.3).sin() * (z.im * 5.1).cos()) > 0.93 || z.re > 0.9);
        let d = distance_to_marked(&r);
        let marked: Vec<(i64, i64)> = (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).filter(|&(i, j)| r.marked(i, j)).map(|(i, j)| (i as i64, j as i64)).collect();
        assert!(!marked.is_empty());
        for j in 0..n {
            for i in 0..n {
                let b = marked.iter().map(|&(a, c)| (((a - i as i64).pow(2) + (c - j as i64).pow(2)) as f64).sqrt()).fold(f64::INFINITY, f64::min);
                assert!((d[j * n + i] - b).abs() < 1e-12, "({i},{j}) {} vs {b}", d[j * n + i]);
            }
        }
    }

    #[test]
    fn hole_profile_is_monotone_and_bounded() {
        // Marked set: the real axis and a ring, leaving holes of every size.
        let r = synthetic(256, |z| z.im.abs() < 0.005 || (z.norm() - 0.6).abs() < 0.01);
        let radii: Vec<f64> = (2..=7).rev().map(|k| 2f64.powi(-k)).collect();
        let p = deep_point_profile(&r, &radii).unwrap();
        for w in p.rows.windows(2) {
            assert!(w[1].s >= w[0].s);
        }
        for row in &p.rows {
            assert!(row.s <= row.r);
        }
        assert_eq!(p.rows.iter().filter(|r| r.usable).count(), 3);
        // Holes above the axis grow linearly with the radius.
        assert!((p.slope - 1.0).abs() < 0.15, "{}", p.slope);
        assert!(matches!(deep_point_profile(&r, &[0.01, 0.02, 0.5]), Err(ParabolicError::TooFewRadii(1))));
    }

    fn golden_pair(level: usize) -> CommutingPair {
        let fam = arnold();
        let f = fam.member(fam.tune_to_rotation(&crate::ContinuedFraction::golden(), 24).unwrap().theta);
        CommutingPair::from_circle_map(&f, level).unwrap()
    }

    #[test]
    fn raster_is_real_symmetric_and_keeps_the_interval() {
        let pair = golden_pair(1);
        let r = julia_raster(&pair, &RasterSpec { resolution: 64, max_iter: 96, ..Default::default() }).unwrap();
        assert!(r.is_conjugation_symmetric());
        let n = r.resolution;
        let mut on_interval = 0;
        for i in 0..n {
            let z = r.point(i, n / 2);
            assert_eq!(z.im, 0.0);
            if (r.interval[0]..=r.interval[1]).contains(&z.re) {
                assert!(r.marked(i, n / 2), "{z}");
                on_interval += 1;
            }
        }
        assert!(on_interval >= 8);
        let f = r.marked_fraction();
        assert!(f > 0.0 && f < 1.0);
        let pgm = r.to_pgm();
        let head = format!("P5\n{n} {n}\n255\n");
        assert!(pgm.starts_with(head.as_bytes()));
        assert_eq!(pgm.len(), head.len() + n * n);
        assert!(pgm[head.len()..].iter().all(|&b| b == 0 || b == 255));
        assert!(matches!(julia_raster(&pair, &RasterSpec { resolution: 8, ..Default::default() }), Err(ParabolicError::Resolution(8))));
    }

    #[test]
    fn lattice_area_sums_respect_capacity() {
        let r = 20u64;
        let cf = crate::ContinuedFraction::periodic(vec![r], vec![1]).unwrap();
        let f = arnold().member(arnold().tune_to_rotation(&cf, 6).unwrap().theta);
        let eta = ComplexOrbitMap::new(&f, 1, 0);
        let chain: Vec<f64> = (0..=r + 1).map(|k| f.iterate_shifted::<f64>(0.0, k, 0)).collect();
        let k = (0..r as usize).min_by(|&a, &b| (chain[a + 1] - chain[a]).total_cmp(&(chain[b + 1] - chain[b]))).unwrap();
        let len = chain[k + 1] - chain[k];
        let spec = LatticeSpec { depth: 10 * r as usize, max_elements: 4000, ..Default::default() };
        let lat = parabolic_lattice(&eta, 0.5 * (chain[k] + chain[k + 1]), 0.4 * len, &spec);
        assert!(lat.elements.iter().all(|e| e.area > 0.0 && e.area.is_finite()));
        assert!(lat.elements.iter().filter(|e| e.is_real()).count() > r as usize / 2);
        assert!(lat.elements.iter().any(|e| e.branchings > 0 && !e.is_real()));
        let mut l = 2.0 * len;
        while l < 0.2 {
            let s = grid_area_sum(&lat, 0.5 * (chain[k] + chain[k + 1]), l).unwrap();
            assert!(s.c_hat > 0.0 && s.capacity_ok, "{s:?}");
            l *= 3.0;
        }
        assert!(matches!(grid_area_sum(&lat, 0.5 * (chain[k] + chain[k + 1]), 1e-9), Err(ParabolicError::NoWindow(_))));
    }
}
