//! Critical commuting pairs and their renormalization.
//!
//! Every pair here is rooted in an [`AnalyticCircleMap`] `F`. Its two branches
//! are [`Word`]s, compositions of orbit segments `x ↦ F^q(x) − p`, and the
//! pair lives in its own affine coordinate `y` related to the lift coordinate
//! by `x = c·y`. Pair-level inputs and outputs are binary64; compositions are
//! evaluated on the lifted orbit in the map's precision, so renormalizing a
//! pair `n` times and extracting the return map at a deeper level run the very
//! same orbit arithmetic and differ only through the affine bookkeeping.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::circlemap::{AnalyticCircleMap, DigitStop, MapScalar, MapSpec, HEIGHT_CAP};
use crate::contfrac::ContinuedFraction;
use crate::dispatch;
use crate::real::{Lifted, Precision, Real};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PairError {
    #[error("rational combinatorics at level {level} < {requested}")]
    RationalCombinatorics { level: isize, requested: isize },
    #[error("digits undecided at level {level}: {reason}")]
    DigitsUndecided { level: isize, reason: String },
    #[error("infinite height: eta has a fixed point")]
    InfiniteHeight,
    #[error("height undecided after {cap} eta-steps (last orbit point {last})")]
    HeightUndecided { cap: u64, last: f64 },
    #[error("gluing mismatch {mismatch:e} exceeds tolerance")]
    GluingMismatch { mismatch: f64 },
    #[error("invalid pair: {0}")]
    Invalid(String),
}

/// A composition of orbit segments of the root map.
#[derive(Clone, Debug, PartialEq)]
pub enum Word {
    /// `x ↦ F^q(x) − p`.
    Iterate { q: u64, p: i64 },
    /// Apply the first word, then the second.
    Then(Arc<Word>, Arc<Word>),
    Power(Arc<Word>, u64),
}

impl Word {
    pub fn iterate(q: u64, p: i64) -> Arc<Word> {
        Arc::new(Word::Iterate { q, p })
    }

    pub fn apply<R: MapScalar>(&self, map: &AnalyticCircleMap, x: Lifted<R>) -> Lifted<R> {
        match self {
            Word::Iterate { q, p } => {
                let mut y = map.iterate_lifted(x, *q);
                y.winding -= p;
                y
            }
            Word::Then(a, b) => b.apply(map, a.apply(map, x)),
            Word::Power(a, n) => (0..*n).fold(x, |y, _| a.apply(map, y)),
        }
    }

    /// Equivalent `(q, p)`: every word equals `F^q − p` since `F` commutes
    /// with unit translation.
    pub fn normal_form(&self) -> (u64, i64) {
        match self {
            Word::Iterate { q, p } => (*q, *p),
            Word::Then(a, b) => {
                let (qa, pa) = a.normal_form();
                let (qb, pb) = b.normal_form();
                (qa + qb, pa + pb)
            }
            Word::Power(a, n) => {
                let (q, p) = a.normal_form();
                (q * n, p * *n as i64)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Realization {
    /// `(η, ξ) = (F^{q_{m+1}} − p_{m+1}, F^{q_m} − p_m)` in oriented coordinates.
    IterateBacked { level: isize, indices: [i64; 4] },
    /// Built by renormalization; `lambdas` records every rescaling factor.
    Abstract { source_level: isize, lambdas: Vec<f64> },
}

#[derive(Clone, Debug)]
pub struct CommutingPair {
    map: Arc<AnalyticCircleMap>,
    eta: Arc<Word>,
    xi: Arc<Word>,
    scale: f64,
    realization: Realization,
    eta0: f64,
    xi0: f64,
    auto_extended: bool,
}

/// Interval lengths below which binary64 maps switch to extended orbits.
pub const DEFAULT_EXT_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Height {
    Finite(u64),
    Infinite,
}

/// Result of a height computation; `terminal` is set when an iterate landed
/// on 0 exactly, so the next height is infinite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeightOutcome {
    pub height: Height,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct Renormalization {
    pub height: u64,
    pub pre: CommutingPair,
    pub pair: CommutingPair,
    pub lambda: f64,
}

impl CommutingPair {
    /// The level `−1` pair `(F, x − 1)`, whose height is `r_0`.
    pub fn base(map: &AnalyticCircleMap) -> Self {
        Self::iterate_backed(Arc::new(map.clone()), -1, [1, 0, 0, 1])
    }

    fn iterate_backed(map: Arc<AnalyticCircleMap>, level: isize, indices: [i64; 4]) -> Self {
        let [p_m, q_m, p_n, q_n] = indices;
        let xi = Word::iterate(q_m as u64, p_m);
        let eta = Word::iterate(q_n as u64, p_n);
        let x_m = dispatch!(map.precision(), R => xi.apply::<R>(&map, Lifted::zero()).minus_int(0).to_f64());
        let scale = if x_m < 0.0 { -1.0 } else { 1.0 };
        Self::assemble(map, eta, xi, scale, Realization::IterateBacked { level, indices }, false)
    }

    fn assemble(
        map: Arc<AnalyticCircleMap>,
        eta: Arc<Word>,
        xi: Arc<Word>,
        scale: f64,
        realization: Realization,
        auto_extended: bool,
    ) -> Self {
        let mut pair = CommutingPair { map, eta, xi, scale, realization, eta0: 0.0, xi0: 0.0, auto_extended };
        pair.eta0 = pair.eta(0.0);
        pair.xi0 = pair.xi(0.0);
        pair
    }

    /// The return-map pair at level `m ≥ 0`, using the map's own digits.
    pub fn from_circle_map(map: &AnalyticCircleMap, m: usize) -> Result<Self, PairError> {
        Self::from_circle_map_with(map, m, DEFAULT_EXT_THRESHOLD)
    }

    pub fn from_circle_map_with(map: &AnalyticCircleMap, m: usize, ext_threshold: f64) -> Result<Self, PairError> {
        let digits = map.rotation_digits(m + 1);
        let level = digits.terms.len() as isize - 1;
        if digits.terms.len() < m + 1 {
            return Err(match digits.stop {
                DigitStop::Rational => PairError::RationalCombinatorics { level, requested: m as isize },
                other => PairError::DigitsUndecided { level, reason: format!("{other:?}") },
            });
        }
        let a = digits.level(m as isize).unwrap();
        let b = digits.level(m as isize + 1).unwrap();
        let mut map = map.clone();
        let mut auto = false;
        let smallest = a.x.abs().to_f64().min(b.x.abs().to_f64());
        if map.precision() == Precision::F64 && smallest < ext_threshold {
            map = map.with_precision(Precision::Ext);
            auto = true;
        }
        let mut pair = Self::iterate_backed(Arc::new(map), m as isize, [a.p, a.q as i64, b.p, b.q as i64]);
        pair.auto_extended = auto;
        Ok(pair)
    }

    pub fn map(&self) -> &AnalyticCircleMap {
        &self.map
    }

    pub fn realization(&self) -> &Realization {
        &self.realization
    }

    pub fn precision(&self) -> Precision {
        self.map.precision()
    }

    /// Whether binary64 input was promoted to extended orbits.
    pub fn auto_extended(&self) -> bool {
        self.auto_extended
    }

    /// `x = scale · y`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn eta_word(&self) -> &Word {
        &self.eta
    }

    pub fn xi_word(&self) -> &Word {
        &self.xi
    }

    pub fn eta0(&self) -> f64 {
        self.eta0
    }

    pub fn xi0(&self) -> f64 {
        self.xi0
    }

    /// `I_η = [0, ξ(0)]`.
    pub fn eta_domain(&self) -> (f64, f64) {
        (0.0, self.xi0)
    }

    /// `I_ξ = [η(0), 0]`.
    pub fn xi_domain(&self) -> (f64, f64) {
        (self.eta0, 0.0)
    }

    fn apply_word(&self, w: &Word, y: f64) -> f64 {
        dispatch!(self.map.precision(), R => self.apply_word_in::<R>(w, y))
    }

    fn apply_word_in<R: MapScalar>(&self, w: &Word, y: f64) -> f64 {
        let x = R::from_f64(y) * R::from_f64(self.scale);
        let out = w.apply::<R>(&self.map, Lifted::new(x));
        out.minus_int(0).to_f64() / self.scale
    }

    pub fn eta(&self, y: f64) -> f64 {
        self.apply_word(&self.eta, y)
    }

    pub fn xi(&self, y: f64) -> f64 {
        self.apply_word(&self.xi, y)
    }

    /// `η ∘ ξ` evaluated without an intermediate binary64 rounding.
    pub fn eta_xi(&self, y: f64) -> f64 {
        let w = Word::Then(self.xi.clone(), self.eta.clone());
        self.apply_word(&w, y)
    }

    pub fn xi_eta(&self, y: f64) -> f64 {
        let w = Word::Then(self.eta.clone(), self.xi.clone());
        self.apply_word(&w, y)
    }

    /// Largest `|η(ξ(y)) − ξ(η(y))|` over 64 points near 0, each branch
    /// rounded to binary64 in between.
    pub fn commutation_residual(&self) -> f64 {
        let r = 0.25 * self.xi0.min(-self.eta0);
        (0..64)
            .map(|i| {
                let y = -r + 2.0 * r * i as f64 / 63.0;
                (self.eta(self.xi(y)) - self.xi(self.eta(y))).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Checks conditions I–IV on sampled grids.
    pub fn validate(&self, eps_commute: f64) -> Result<(), PairError> {
        if !(self.xi0 > 0.0 && self.eta0 < 0.0) {
            return Err(PairError::Invalid(format!("endpoints xi(0)={} eta(0)={}", self.xi0, self.eta0)));
        }
        let c = self.commutation_residual();
        if c > eps_commute {
            return Err(PairError::Invalid(format!("commutation residual {c:e}")));
        }
        let v = self.xi_eta(0.0);
        if !(0.0..=self.xi0).contains(&v) {
            return Err(PairError::Invalid(format!("xi(eta(0)) = {v} outside I_eta")));
        }
        for (lo, hi, w) in [(0.0, self.xi0, &self.eta), (self.eta0, 0.0, &self.xi)] {
            let vals: Vec<f64> = (0..=64).map(|i| self.apply_word(w, lo + (hi - lo) * i as f64 / 64.0)).collect();
            if vals.windows(2).any(|p| p[1] <= p[0]) {
                return Err(PairError::Invalid("branch not increasing on its domain".into()));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> Result<HeightOutcome, PairError> {
        self.height_with_cap(HEIGHT_CAP)
    }

    /// The `r` with `0 ∈ [η^r(ξ(0)), η^{r+1}(ξ(0))]`, iterated on the lifted
    /// orbit so no binary64 rounding enters between steps.
    pub fn height_with_cap(&self, cap: u64) -> Result<HeightOutcome, PairError> {
        dispatch!(self.map.precision(), R => self.height_in::<R>(cap))
    }

    fn height_in<R: MapScalar>(&self, cap: u64) -> Result<HeightOutcome, PairError> {
        let res = R::PRECISION.resolution();
        let sign = self.scale.signum();
        let mut z = self.xi.apply::<R>(&self.map, Lifted::zero());
        let mut prev = z.minus_int(0).to_f64() * sign;
        let mut j = 0u64;
        while j < cap {
            z = self.eta.apply::<R>(&self.map, z);
            j += 1;
            let v = z.minus_int(0).to_f64() * sign;
            if v == 0.0 || v.abs() <= 16.0 * res {
                return Ok(HeightOutcome { height: Height::Finite(j), terminal: true });
            }
            if v < 0.0 {
                return Ok(HeightOutcome { height: Height::Finite(j - 1), terminal: false });
            }
            let step = v - prev;
            if step.abs() <= 1e3 * res || step > 0.0 {
                return Ok(HeightOutcome { height: Height::Infinite, terminal: false });
            }
            prev = v;
        }
        Err(PairError::HeightUndecided { cap, last: prev })
    }

    /// The renormalization and, as a byproduct, the pre-renormalization.
    pub fn renormalize(&self) -> Result<Renormalization, PairError> {
        let h = self.height()?;
        let r = match h.height {
            Height::Finite(r) if r >= 1 => r,
            Height::Finite(_) => return Err(PairError::Invalid("height 0".into())),
            Height::Infinite => return Err(PairError::InfiniteHeight),
        };
        Ok(self.renormalize_with_height(r))
    }

    fn renormalize_with_height(&self, r: u64) -> Renormalization {
        let eta_new = Arc::new(Word::Then(self.xi.clone(), Arc::new(Word::Power(self.eta.clone(), r))));
        let xi_new = self.eta.clone();
        let (source_level, mut lambdas) = match &self.realization {
            Realization::IterateBacked { level, .. } => (*level, Vec::new()),
            Realization::Abstract { source_level, lambdas } => (*source_level, lambdas.clone()),
        };
        let pre = Self::assemble(
            self.map.clone(),
            eta_new.clone(),
            xi_new.clone(),
            self.scale,
            Realization::Abstract { source_level, lambdas: lambdas.clone() },
            self.auto_extended,
        );
        // λ = −1/|I_η|; y_new = λ·y, hence x = (scale/λ)·y_new.
        let lambda = -1.0 / self.xi0;
        lambdas.push(lambda);
        let pair = Self::assemble(
            self.map.clone(),
            eta_new,
            xi_new,
            -self.scale * self.xi0,
            Realization::Abstract { source_level, lambdas },
            self.auto_extended,
        );
        Renormalization { height: r, pre, pair, lambda }
    }

    /// First `depth` heights of successive renormalizations.
    pub fn rotation_number(&self, depth: usize) -> PairRotation {
        let mut terms = Vec::new();
        let mut pair = self.clone();
        let mut stop = PairRotationStop::Complete;
        while terms.len() < depth {
            match pair.height() {
                Ok(HeightOutcome { height: Height::Finite(r), terminal }) => {
                    if r == 0 {
                        stop = PairRotationStop::PrecisionExhausted;
                        break;
                    }
                    terms.push(r);
                    if terminal {
                        stop = PairRotationStop::Rational;
                        break;
                    }
                    pair = pair.renormalize_with_height(r).pair;
                }
                Ok(HeightOutcome { height: Height::Infinite, .. }) => {
                    stop = PairRotationStop::Rational;
                    break;
                }
                Err(_) => {
                    stop = PairRotationStop::PrecisionExhausted;
                    break;
                }
            }
        }
        PairRotation { terms, stop }
    }

    pub fn glue(&self) -> Result<GluedCircleMap, PairError> {
        GluedCircleMap::new(self.clone(), 1e-12)
    }

    pub fn manifest(&self) -> PairManifest {
        let (level, indices) = match &self.realization {
            Realization::IterateBacked { level, indices } => (*level, Some(*indices)),
            Realization::Abstract { source_level, lambdas } => (*source_level + lambdas.len() as isize, None),
        };
        let (q_eta, p_eta) = self.eta.normal_form();
        let (q_xi, p_xi) = self.xi.normal_form();
        PairManifest {
            realization: self.realization.clone(),
            map: MapSpec::from_map(&self.map),
            level,
            indices,
            eta_normal_form: [p_eta, q_eta as i64],
            xi_normal_form: [p_xi, q_xi as i64],
            eta0: decimal(self.eta0),
            xi0: decimal(self.xi0),
            scale: decimal(self.scale),
        }
    }
}

/// Binary64 as a 17-significant-digit decimal string.
pub fn decimal(v: f64) -> String {
    crate::report::num(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRotationStop {
    Complete,
    Rational,
    PrecisionExhausted,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PairRotation {
    pub terms: Vec<u64>,
    pub stop: PairRotationStop,
}

impl PairRotation {
    pub fn to_cf(&self) -> ContinuedFraction {
        ContinuedFraction { head: self.terms.clone(), period: Vec::new() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PairManifest {
    pub realization: Realization,
    pub map: MapSpec,
    pub level: isize,
    pub indices: Option<[i64; 4]>,
    /// `[p, q]` with `η = F^q − p` in lift coordinates.
    pub eta_normal_form: [i64; 2],
    pub xi_normal_form: [i64; 2],
    pub eta0: String,
    pub xi0: String,
    pub scale: String,
}

/// Möbius map sending `(a, 0, c)` to `(0, 1/2, 1)`.
#[derive(Clone, Copy, Debug)]
struct Mobius {
    a: f64,
    c: f64,
}

impl Mobius {
    fn apply(&self, x: f64) -> f64 {
        let (a, c) = (self.a, self.c);
        c * (x - a) / ((a + c) * x - 2.0 * a * c)
    }

    fn inverse(&self, t: f64) -> f64 {
        let (a, c) = (self.a, self.c);
        c * a * (2.0 * t - 1.0) / (t * (a + c) - c)
    }
}

fn chebyshev_nodes(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |k| {
        let t = ((2 * k + 1) as f64 * std::f64::consts::PI / (2 * n) as f64).cos();
        0.5 * (lo + hi) + 0.5 * (hi - lo) * t
    })
}

/// Default number of Chebyshev nodes per branch.
pub const DISTANCE_GRID: usize = 257;

/// `C⁰` distance of the Möbius-normalized pairs plus the endpoint-ratio term.
pub fn pair_distance(z1: &CommutingPair, z2: &CommutingPair, grid_size: usize) -> f64 {
    let ratio = (z1.xi0 / z1.eta0 - z2.xi0 / z2.eta0).abs();
    let w1 = Mobius { a: z1.eta0, c: z1.xi0 };
    let w2 = Mobius { a: z2.eta0, c: z2.xi0 };
    let mut nodes: Vec<(bool, f64)> = chebyshev_nodes(0.5, 1.0, grid_size).map(|t| (true, t)).collect();
    nodes.extend(chebyshev_nodes(0.0, 0.5, grid_size).map(|t| (false, t)));
    let sup = nodes
        .par_iter()
        .map(|&(is_eta, t)| {
            let (y1, y2) = (w1.inverse(t), w2.inverse(t));
            let (v1, v2) = if is_eta { (z1.eta(y1), z2.eta(y2)) } else { (z1.xi(y1), z2.xi(y2)) };
            (w1.apply(v1) - w2.apply(v2)).abs()
        })
        .reduce(|| 0.0, f64::max);
    ratio.max(sup)
}

/// The circle map obtained by identifying `η(0)` with `ξ(η(0))`.
#[derive(Clone, Debug)]
pub struct GluedCircleMap {
    pair: CommutingPair,
    left: f64,
    right: f64,
    /// Mismatch at 0 and at the identified endpoints, relative to the length.
    pub continuity_residual: f64,
}

impl GluedCircleMap {
    pub fn new(pair: CommutingPair, tol: f64) -> Result<Self, PairError> {
        let left = pair.eta0;
        let right = pair.xi_eta(0.0);
        if right <= left {
            return Err(PairError::Invalid("xi(eta(0)) <= eta(0)".into()));
        }
        let len = right - left;
        let at_zero = (pair.eta_xi(0.0) - right).abs();
        let at_ends = (pair.eta(right) - pair.eta_xi(left)).abs();
        let continuity_residual = at_zero.max(at_ends) / len;
        if continuity_residual > tol {
            return Err(PairError::GluingMismatch { mismatch: continuity_residual });
        }
        Ok(GluedCircleMap { pair, left, right, continuity_residual })
    }

    /// `[η(0), ξ(η(0))]`.
    pub fn interval(&self) -> (f64, f64) {
        (self.left, self.right)
    }

    /// Two-branch rule on the fundamental interval.
    pub fn eval(&self, u: f64) -> f64 {
        if u <= 0.0 {
            self.pair.eta_xi(u)
        } else {
            self.pair.eta(u)
        }
    }

    /// Lift with period `L = ξ(η(0)) − η(0)`, continuous across 0.
    fn lift(&self, u: f64) -> f64 {
        let len = self.right - self.left;
        let k = ((u - self.left) / len).floor();
        let u0 = u - k * len;
        k * len + if u0 <= 0.0 { self.pair.eta_xi(u0) } else { self.pair.eta(u0) + len }
    }

    /// Rotation number measured in the orientation of decreasing pair
    /// coordinate, the direction in which `η` carries points.
    pub fn rotation_number(&self, tol: f64, max_iter: u64) -> (f64, f64, f64) {
        let len = self.right - self.left;
        let x0 = 0.5 * self.left;
        let mut x = x0;
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for n in 1..=max_iter {
            x = self.lift(x);
            let turns = (x - x0) / len;
            lo = lo.max(turns.floor() / n as f64);
            hi = hi.min(turns.ceil() / n as f64);
            if hi - lo <= tol {
                break;
            }
        }
        (1.0 - 0.5 * (lo + hi), 1.0 - hi, 1.0 - lo)
    }
}
