//! Dynamical partitions and the experiments built on them.
//!
//! Levels follow [`Digits`]: level `m` has the closest return
//! `F^{q_m}(0) − p_m`, with `q_0 = 1`. The partition `P_m` is made of the
//! atoms `F^i(I_m)`, `i < q_{m+1}`, and `F^i(I_{m+1})`, `i < q_m`.

use rayon::prelude::*;
use rug::Float;
use serde::Serialize;
use thiserror::Error;

use crate::circlemap::{AnalyticCircleMap, Digits, DigitStop, MapError, MapFamily, MapScalar};
use crate::contfrac::{CfError, ContinuedFraction};
use crate::dispatch;
use crate::fit::{self, aitken_with_floor, geometric_fit, LinearFit, EXTRAPOLATION_FLOOR};
use crate::fixed::Fx;
use crate::pairs::{pair_distance, CommutingPair, PairError, DISTANCE_GRID};
use crate::real::{Lifted, Precision, Real};
use crate::report::{num, opt_num, Csv, Summary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("digits through level {needed} unavailable: stopped at level {reached} ({reason})")]
    Digits { needed: usize, reached: isize, reason: String },
    #[error("rotation numbers differ at digit {k}")]
    DigitMismatch { k: usize },
    #[error("atom of length {length:e} at level {level} is below the precision floor; use extended precision")]
    PrecisionExhausted { level: usize, length: f64 },
    #[error("invalid partition at level {level}: gap {gap:e}")]
    InvalidPartition { level: usize, gap: f64 },
    #[error("conjugacy not monotone at level {level}")]
    NotMonotone { level: usize },
    #[error("fit refused: {0}")]
    FitRefused(String),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    ContinuedFraction(#[from] CfError),
}

/// Closest returns through `level`.
pub fn digits_through(map: &AnalyticCircleMap, level: usize) -> Result<Digits, GeometryError> {
    let d = map.rotation_digits(level);
    if d.terms.len() < level {
        return Err(GeometryError::Digits {
            needed: level,
            reached: d.terms.len() as isize,
            reason: stop_reason(&d.stop),
        });
    }
    Ok(d)
}

fn stop_reason(s: &DigitStop) -> String {
    match s {
        DigitStop::Complete => "complete".into(),
        DigitStop::Rational => "rational combinatorics".into(),
        DigitStop::PrecisionExhausted => "precision exhausted".into(),
        DigitStop::Undecided { last } => format!("undecided, last point {last:e}"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum AtomOrbit {
    #[serde(rename = "I_m")]
    Im,
    #[serde(rename = "I_{m+1}")]
    Next,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Atom {
    pub orbit: AtomOrbit,
    pub index: u64,
    /// Left endpoint in `[0, 1)`.
    pub start: f64,
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DynamicalPartition {
    pub level: usize,
    pub q_m: u64,
    pub q_next: u64,
    /// Sorted by `start`.
    pub atoms: Vec<Atom>,
    pub total_length: f64,
    /// Largest `|gap|` between consecutive atoms; negative gaps are overlaps.
    pub max_gap: f64,
    pub precision: Precision,
}

impl DynamicalPartition {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Index of the atom containing `x mod 1`.
    pub fn locate(&self, x: f64) -> usize {
        let x = x.rem_euclid(1.0);
        self.atoms.partition_point(|a| a.start <= x).saturating_sub(1)
    }

    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&["k", "orbit", "index", "start", "length"]);
        for (k, a) in self.atoms.iter().enumerate() {
            let tag = match a.orbit {
                AtomOrbit::Im => "I_m",
                AtomOrbit::Next => "I_m+1",
            };
            c.push(vec![k.to_string(), tag.into(), a.index.to_string(), num(a.start), num(a.length)]);
        }
        c
    }
}

/// Atoms shorter than this many units of resolution are not trusted.
const ATOM_FLOOR: f64 = 100.0;

fn assemble_partition<R: Real>(
    level: usize,
    (p_m, q_m): (i64, u64),
    (p_n, q_n): (i64, u64),
    orbit: &[Lifted<R>],
) -> Result<DynamicalPartition, GeometryError> {
    let res = R::PRECISION.resolution();
    let n = (q_m + q_n) as usize;
    debug_assert!(orbit.len() >= n);
    let mut raw: Vec<(R, R, Atom)> = Vec::with_capacity(n);
    let mut push = |orbit_tag: AtomOrbit, i: usize, q: u64, p: i64| {
        let a = orbit[i];
        let b = orbit[i + q as usize];
        let signed = b.frac.add_int(b.winding - a.winding - p) - a.frac;
        let (start, len) = if signed >= R::zero() { (a.frac, signed) } else { (b.frac, -signed) };
        let atom = Atom { orbit: orbit_tag, index: i as u64, start: start.to_f64(), length: len.to_f64() };
        raw.push((start, len, atom));
    };
    for i in 0..q_n as usize {
        push(AtomOrbit::Im, i, q_m, p_m);
    }
    for i in 0..q_m as usize {
        push(AtomOrbit::Next, i, q_n, p_n);
    }
    raw.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite orbit"));
    let mut max_gap = 0.0f64;
    let mut min_len = f64::INFINITY;
    for k in 0..n {
        let (s, l, _) = raw[k];
        let next = if k + 1 < n { raw[k + 1].0 } else { raw[0].0.add_int(1) };
        let gap = (next - (s + l)).to_f64();
        if gap.abs() > max_gap.abs() {
            max_gap = gap;
        }
        min_len = min_len.min(l.to_f64());
    }
    if max_gap.abs() > 1e-9 {
        return Err(GeometryError::InvalidPartition { level, gap: max_gap });
    }
    if min_len < ATOM_FLOOR * res {
        return Err(GeometryError::PrecisionExhausted { level, length: min_len });
    }
    let atoms: Vec<Atom> = raw.into_iter().map(|(_, _, a)| a).collect();
    let total_length = fit::compensated_sum(atoms.iter().map(|a| a.length));
    Ok(DynamicalPartition { level, q_m, q_next: q_n, atoms, total_length, max_gap, precision: R::PRECISION })
}

/// The dynamical partition `P_m` of `map`.
pub fn partition(map: &AnalyticCircleMap, m: usize) -> Result<DynamicalPartition, GeometryError> {
    let d = digits_through(map, m + 1)?;
    let a = d.level(m as isize).unwrap();
    let b = d.level(m as isize + 1).unwrap();
    dispatch!(map.precision(), R => {
        let orbit = map.orbit::<R>((a.q + b.q) as usize);
        assemble_partition::<R>(m, (a.p, a.q), (b.p, b.q), &orbit)
    })
}

/// `P_m` for the rigid rotation by the value of `cf`.
pub fn rotation_partition(cf: &ContinuedFraction, m: usize) -> Result<DynamicalPartition, GeometryError> {
    let (p_m, q_m) = cf.convergents(m)?;
    let (p_n, q_n) = cf.convergents(m + 1)?;
    let depth = match cf.len() {
        Some(n) => n,
        None => m + 60,
    };
    let rho = cf.value_float(depth, 256)?;
    let n = (q_m + q_n) as usize;
    let orbit: Vec<Lifted<f64>> = (0..n)
        .map(|i| {
            let x = Float::with_val(256, &rho * i as u64);
            let w = x.clone().floor();
            let frac = Float::with_val(256, &x - &w).to_f64();
            Lifted { winding: w.to_f64() as i64, frac }
        })
        .collect();
    assemble_partition::<f64>(m, (p_m as i64, q_m as u64), (p_n as i64, q_n as u64), &orbit)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsStats {
    pub level: usize,
    /// Largest `max(|I|/|J|, |J|/|I|)` over cyclically adjacent atoms.
    pub k_max: f64,
    /// Smallest value of the same symmetric ratio.
    pub k_min: f64,
    pub histogram: Vec<HistogramBin>,
}

const HISTOGRAM_BINS: usize = 16;

/// Ratios of cyclically adjacent atom lengths.
pub fn bounds_stats(p: &DynamicalPartition) -> BoundsStats {
    let n = p.atoms.len();
    let ratios: Vec<f64> = (0..n)
        .map(|k| {
            let r = p.atoms[k].length / p.atoms[(k + 1) % n].length;
            r.max(1.0 / r)
        })
        .collect();
    let k_max = ratios.iter().copied().fold(f64::MIN, f64::max);
    let k_min = ratios.iter().copied().fold(f64::MAX, f64::min);
    let (l0, l1) = (k_min.ln(), k_max.ln());
    let width = (l1 - l0) / HISTOGRAM_BINS as f64;
    let mut counts = [0u64; HISTOGRAM_BINS];
    for r in &ratios {
        let b = if width > 0.0 { ((r.ln() - l0) / width) as usize } else { 0 };
        counts[b.min(HISTOGRAM_BINS - 1)] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(i, &count)| HistogramBin {
            lo: (l0 + width * i as f64).exp(),
            hi: (l0 + width * (i + 1) as f64).exp(),
            count,
        })
        .collect();
    BoundsStats { level: p.level, k_max, k_min, histogram }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub m: usize,
    pub len_im: f64,
    /// `|I_{m+1}|/|I_m|`.
    pub ratio: f64,
    /// Aitken value from rows `m−2..=m`.
    pub aitken: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRatios {
    pub rows: Vec<ScalingRow>,
    pub limit: f64,
    /// Change between the last two extrapolated values.
    pub drift: Option<f64>,
    pub precision: Precision,
}

impl ScalingRatios {
    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&["m", "len_Im", "ratio", "aitken"]);
        for r in &self.rows {
            c.push(vec![r.m.to_string(), num(r.len_im), num(r.ratio), opt_num(r.aitken)]);
        }
        c
    }

    pub fn summary(&self) -> Summary {
        Summary {
            estimate: Some(self.limit),
            window: Some([0, self.rows.len().saturating_sub(1)]),
            fit_r2: None,
            precision_mode: self.precision,
        }
    }
}

fn lengths(d: &Digits, through: usize) -> Vec<f64> {
    (0..=through).map(|m| d.level(m as isize).unwrap().x.abs().to_f64()).collect()
}

/// Floor below which extrapolation stops, per working precision.
fn extrapolation_floor(p: Precision) -> f64 {
    match p {
        Precision::F64 => EXTRAPOLATION_FLOOR,
        Precision::Ext => 100.0 * p.resolution(),
    }
}

/// The closest-return scaling ratios `s_m`, `m ≤ big_m`.
pub fn scaling_ratios(map: &AnalyticCircleMap, big_m: usize) -> Result<ScalingRatios, GeometryError> {
    let d = digits_through(map, big_m + 1)?;
    let len = lengths(&d, big_m + 1);
    let s: Vec<f64> = (0..=big_m).map(|m| len[m + 1] / len[m]).collect();
    let acc = aitken_with_floor(&s, extrapolation_floor(map.precision()));
    let rows: Vec<ScalingRow> = (0..=big_m)
        .map(|m| ScalingRow { m, len_im: len[m], ratio: s[m], aitken: if m >= 2 { acc[m - 2] } else { None } })
        .collect();
    let extrapolated: Vec<f64> = acc.iter().flatten().copied().collect();
    let limit = extrapolated.last().copied().unwrap_or(s[big_m]);
    let drift = match extrapolated.as_slice() {
        [.., a, b] => Some((b - a).abs()),
        _ => None,
    };
    Ok(ScalingRatios { rows, limit, drift, precision: map.precision() })
}

/// A monotone piecewise-linear circle map matching the orbits of the origin.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConjugacyMap {
    pub level: usize,
    /// `(f1^i(0), f2^i(0)) mod 1`, sorted, closed by `(1, 1)`.
    pub nodes: Vec<(f64, f64)>,
}

impl ConjugacyMap {
    /// `ψ` on the line, commuting with unit translation.
    pub fn eval(&self, x: f64) -> f64 {
        let k = x.floor();
        let u = x - k;
        let j = self.nodes.partition_point(|n| n.0 <= u).clamp(1, self.nodes.len() - 1);
        let (x0, y0) = self.nodes[j - 1];
        let (x1, y1) = self.nodes[j];
        let t = if x1 > x0 { (u - x0) / (x1 - x0) } else { 0.0 };
        k + y0 + t * (y1 - y0)
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.nodes.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 > w[0].1)
    }
}

fn compare_terms(a: &Digits, b: &Digits, n: usize) -> Result<(), GeometryError> {
    for k in 0..n {
        if a.terms.get(k) != b.terms.get(k) {
            return Err(GeometryError::DigitMismatch { k });
        }
    }
    Ok(())
}

fn orbit_fracs(map: &AnalyticCircleMap, n: usize) -> Vec<f64> {
    dispatch!(map.precision(), R => map.orbit::<R>(n).into_iter().map(|p| p.frac.to_f64()).collect())
}

/// `ψ_m` with `ψ_m(f1^i(0)) = f2^i(0)` for `i < q_m + q_{m+1}`.
pub fn build_conjugacy(map1: &AnalyticCircleMap, map2: &AnalyticCircleMap, m: usize) -> Result<ConjugacyMap, GeometryError> {
    let (d1, d2) = rayon::join(|| digits_through(map1, m + 1), || digits_through(map2, m + 1));
    let (d1, d2) = (d1?, d2?);
    compare_terms(&d1, &d2, m + 1)?;
    let n = {
        let a = d1.level(m as isize).unwrap();
        let b = d1.level(m as isize + 1).unwrap();
        (a.q + b.q) as usize
    };
    let (o1, o2) = rayon::join(|| orbit_fracs(map1, n), || orbit_fracs(map2, n));
    let mut nodes: Vec<(f64, f64)> = o1.into_iter().zip(o2).collect();
    nodes.sort_by(|a, b| a.0.total_cmp(&b.0));
    nodes.push((1.0, 1.0));
    let psi = ConjugacyMap { level: m, nodes };
    if !psi.is_strictly_increasing() {
        return Err(GeometryError::NotMonotone { level: m });
    }
    Ok(psi)
}

/// Residuals below this are treated as noise and never fitted.
pub const NOISE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RegularityRow {
    pub m: usize,
    pub len1: f64,
    pub len2: f64,
    /// `|I_m(f2)|/|I_m(f1)|`.
    pub t: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegularityFit {
    pub rows: Vec<RegularityRow>,
    pub s_limit: f64,
    /// Geometric rate of `|t_m − s_limit|`.
    pub mu_hat: Option<f64>,
    /// Geometric rate of `|I_m(f1)|`.
    pub lambda_hat: Option<f64>,
    /// `log μ̂ / log λ̂`, an estimator of the Hölder exponent at 0.
    pub alpha_hat: Option<f64>,
    pub fit: Option<LinearFit>,
    pub window: Option<[usize; 2]>,
    /// Both maps give identical closest returns, `t_m ≡ 1`.
    pub identity: bool,
    pub precision: Precision,
}

impl RegularityFit {
    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&["m", "len1", "len2", "t", "residual"]);
        for r in &self.rows {
            c.push(vec![r.m.to_string(), num(r.len1), num(r.len2), num(r.t), num(r.residual)]);
        }
        c
    }

    pub fn summary(&self) -> Summary {
        Summary {
            estimate: self.alpha_hat,
            window: self.window,
            fit_r2: self.fit.map(|f| f.r2),
            precision_mode: self.precision,
        }
    }
}

/// Fits the convergence of `t_m` to estimate the regularity of the
/// conjugacy at the critical point.
pub fn regularity_fit(map1: &AnalyticCircleMap, map2: &AnalyticCircleMap, big_m: usize) -> Result<RegularityFit, GeometryError> {
    if big_m < 8 {
        return Err(GeometryError::FitRefused(format!("M = {big_m} < 8")));
    }
    let (d1, d2) = rayon::join(|| digits_through(map1, big_m + 1), || digits_through(map2, big_m + 1));
    let (d1, d2) = (d1?, d2?);
    compare_terms(&d1, &d2, big_m + 1)?;
    let (l1, l2) = (lengths(&d1, big_m), lengths(&d2, big_m));
    let precision = if map1.precision() == Precision::Ext || map2.precision() == Precision::Ext {
        Precision::Ext
    } else {
        Precision::F64
    };
    let t: Vec<f64> = l1.iter().zip(&l2).map(|(a, b)| b / a).collect();
    if l1 == l2 {
        let rows = (0..=big_m)
            .map(|m| RegularityRow { m, len1: l1[m], len2: l2[m], t: 1.0, residual: 0.0 })
            .collect();
        return Ok(RegularityFit {
            rows,
            s_limit: 1.0,
            mu_hat: None,
            lambda_hat: None,
            alpha_hat: None,
            fit: None,
            window: None,
            identity: true,
            precision,
        });
    }
    let acc = aitken_with_floor(&t, extrapolation_floor(precision));
    let last = acc.iter().rposition(Option::is_some);
    let (s_limit, used_from) = match last {
        Some(j) => (acc[j].unwrap(), j),
        None => (t[big_m], big_m),
    };
    let rows: Vec<RegularityRow> = (0..=big_m)
        .map(|m| RegularityRow { m, len1: l1[m], len2: l2[m], t: t[m], residual: (t[m] - s_limit).abs() })
        .collect();
    // Usable window: from level 1, strictly decreasing residuals above the
    // noise floor, stopping before the points consumed by the extrapolation.
    let lo = 1usize;
    let mut hi = lo;
    while hi + 1 < used_from && rows[hi + 1].residual >= NOISE_FLOOR && rows[hi + 1].residual < rows[hi].residual {
        hi += 1;
    }
    if rows[lo].residual < NOISE_FLOOR || hi < lo + 2 {
        return Err(GeometryError::FitRefused(format!("usable window [{lo}, {hi}] too short")));
    }
    let ms: Vec<f64> = (lo..=hi).map(|m| m as f64).collect();
    let res: Vec<f64> = (lo..=hi).map(|m| rows[m].residual).collect();
    let lens: Vec<f64> = (lo..=hi).map(|m| l1[m]).collect();
    let (_, mu, lfit) = geometric_fit(&ms, &res).ok_or_else(|| GeometryError::FitRefused("residual fit".into()))?;
    let (_, lambda, _) = geometric_fit(&ms, &lens).ok_or_else(|| GeometryError::FitRefused("length fit".into()))?;
    let alpha_hat = (lambda < 1.0 && mu > 0.0).then(|| mu.ln() / lambda.ln());
    Ok(RegularityFit {
        rows,
        s_limit,
        mu_hat: Some(mu),
        lambda_hat: Some(lambda),
        alpha_hat,
        fit: Some(lfit),
        window: Some([lo, hi]),
        identity: false,
        precision,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenormConvergence {
    /// `d_n` for `n = 0..=N`.
    pub distances: Vec<f64>,
    pub heights: Vec<u64>,
    pub c_hat: Option<f64>,
    pub mu_hat: Option<f64>,
    pub fit: Option<LinearFit>,
    pub window: [usize; 2],
    pub precision: Precision,
}

impl RenormConvergence {
    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&["n", "height", "d_n"]);
        for (n, d) in self.distances.iter().enumerate() {
            c.push(vec![n.to_string(), self.heights[n].to_string(), num(*d)]);
        }
        c
    }

    pub fn summary(&self) -> Summary {
        Summary {
            estimate: self.mu_hat,
            window: Some(self.window),
            fit_r2: self.fit.map(|f| f.r2),
            precision_mode: self.precision,
        }
    }
}

/// `ζ_0, ℛζ_0, …, ℛ^N ζ_0` with the heights used at each step.
pub fn renormalization_chain(map: &AnalyticCircleMap, n: usize) -> Result<(Vec<CommutingPair>, Vec<u64>), GeometryError> {
    let mut z = CommutingPair::from_circle_map(map, 0)?;
    let mut chain = Vec::with_capacity(n + 1);
    let mut heights = Vec::with_capacity(n + 1);
    for _ in 0..n {
        let r = z.renormalize()?;
        heights.push(r.height);
        chain.push(std::mem::replace(&mut z, r.pair));
    }
    heights.push(match z.height()?.height {
        crate::pairs::Height::Finite(r) => r,
        crate::pairs::Height::Infinite => 0,
    });
    chain.push(z);
    Ok((chain, heights))
}

/// Distances between the renormalization chains of two maps and their
/// geometric rate over `n ∈ [fit_from, N]`.
pub fn renorm_convergence(
    map1: &AnalyticCircleMap,
    map2: &AnalyticCircleMap,
    big_n: usize,
    fit_from: usize,
) -> Result<RenormConvergence, GeometryError> {
    let (c1, c2) = rayon::join(|| renormalization_chain(map1, big_n), || renormalization_chain(map2, big_n));
    let ((c1, h1), (c2, h2)) = (c1?, c2?);
    if let Some(k) = (0..big_n).find(|&k| h1[k] != h2[k]) {
        return Err(GeometryError::DigitMismatch { k: k + 1 });
    }
    let distances: Vec<f64> = c1.iter().zip(&c2).map(|(a, b)| pair_distance(a, b, DISTANCE_GRID)).collect();
    let lo = fit_from.min(big_n);
    let ns: Vec<f64> = (lo..=big_n).map(|n| n as f64).collect();
    let ds = &distances[lo..=big_n];
    let fitted = if ds.len() >= 3 { geometric_fit(&ns, ds) } else { None };
    let precision = if map1.precision() == Precision::Ext || map2.precision() == Precision::Ext {
        Precision::Ext
    } else {
        Precision::F64
    };
    Ok(RenormConvergence {
        distances,
        heights: h1,
        c_hat: fitted.map(|f| f.0),
        mu_hat: fitted.map(|f| f.1),
        fit: fitted.map(|f| f.2),
        window: [lo, big_n],
        precision,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaRow {
    pub n: usize,
    pub p: i64,
    pub q: u64,
    /// Decimal string at the working precision.
    pub theta: String,
    /// `(θ_n − θ_{n−1})/(θ_{n+1} − θ_n)`.
    pub ratio: Option<f64>,
    pub aitken: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeltaEstimate {
    pub rows: Vec<DeltaRow>,
    pub delta_hat: Option<f64>,
    /// The last two extrapolated values agree to 1%.
    pub stable: bool,
    /// The parameter differences reached the bisection floor before `N`.
    pub truncated: bool,
    pub precision: Precision,
}

impl DeltaEstimate {
    pub fn to_csv(&self) -> Csv {
        let mut c = Csv::new(&["n", "p", "q", "theta", "ratio", "aitken"]);
        for r in &self.rows {
            c.push(vec![
                r.n.to_string(),
                r.p.to_string(),
                r.q.to_string(),
                r.theta.clone(),
                opt_num(r.ratio),
                opt_num(r.aitken),
            ]);
        }
        c
    }

    pub fn summary(&self) -> Summary {
        let with_ratio: Vec<usize> = self.rows.iter().filter(|r| r.ratio.is_some()).map(|r| r.n).collect();
        Summary {
            estimate: self.delta_hat,
            window: match with_ratio.as_slice() {
                [a, .., b] => Some([*a, *b]),
                [a] => Some([*a, *a]),
                [] => None,
            },
            fit_r2: None,
            precision_mode: self.precision,
        }
    }

    /// The Aitken value reported at level `n`.
    pub fn aitken_at(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).and_then(|r| r.aitken)
    }
}

/// Parameter-scaling ratios of the critical-cycle parameters at the
/// convergents of `cf`.
pub fn delta_estimate(family: &MapFamily, cf: &ContinuedFraction, big_n: usize) -> Result<DeltaEstimate, GeometryError> {
    if big_n < 8 {
        return Err(GeometryError::FitRefused(format!("N = {big_n} < 8")));
    }
    let table = cf.convergent_table(big_n + 1)?;
    // Skip convergents outside (0, 1) such as 1/1.
    let levels: Vec<(usize, i64, u64)> = table
        .iter()
        .enumerate()
        .filter(|(_, &(p, q))| q >= 2 && p > 0 && p < q)
        .map(|(n, &(p, q))| (n, p as i64, q as u64))
        .collect();
    let all = family.convergent_parameters(cf, big_n + 1)?;
    let thetas: Vec<Fx> = levels.iter().map(|&(n, _, _)| all[n]).collect();
    let floor = match family.precision {
        Precision::F64 => 1e3 * f64::EPSILON,
        Precision::Ext => 2f64.powi(10) * Precision::Ext.resolution(),
    };
    let diff = |a: Fx, b: Fx| Fx::from_raw(b.raw() - a.raw()).to_f64();
    let mut truncated = false;
    let mut ratios: Vec<Option<f64>> = vec![None; levels.len()];
    for k in 1..levels.len().saturating_sub(1) {
        let (d0, d1) = (diff(thetas[k - 1], thetas[k]), diff(thetas[k], thetas[k + 1]));
        if d1.abs() <= floor || d0.abs() <= floor {
            truncated = true;
            break;
        }
        ratios[k] = Some(d0 / d1);
    }
    let present: Vec<(usize, f64)> = ratios.iter().enumerate().filter_map(|(k, r)| r.map(|v| (k, v))).collect();
    let values: Vec<f64> = present.iter().map(|&(_, v)| v).collect();
    let acc = aitken_with_floor(&values, extrapolation_floor(family.precision));
    let mut aitken: Vec<Option<f64>> = vec![None; levels.len()];
    for (i, a) in acc.iter().enumerate() {
        aitken[present[i + 2].0] = *a;
    }
    let rows: Vec<DeltaRow> = levels
        .iter()
        .enumerate()
        .map(|(k, &(n, p, q))| DeltaRow {
            n,
            p,
            q,
            theta: match family.precision {
                Precision::Ext => thetas[k].to_decimal(),
                Precision::F64 => num(thetas[k].to_f64()),
            },
            ratio: ratios[k],
            aitken: aitken[k],
        })
        .collect();
    let extrapolated: Vec<f64> = aitken.iter().flatten().copied().collect();
    let delta_hat = extrapolated.last().copied().or_else(|| values.last().copied());
    let stable = match extrapolated.as_slice() {
        [.., a, b] => ((b - a) / b).abs() < 0.01,
        _ => false,
    };
    Ok(DeltaEstimate { rows, delta_hat, stable, truncated, precision: family.precision })
}

/// A smooth 1-periodic tangent field `c_0 + Σ c_k cos 2πkx + s_k sin 2πkx`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrigField {
    pub constant: f64,
    /// `(c_k, s_k)` for `k = 1, 2, …`.
    pub modes: Vec<(f64, f64)>,
}

impl TrigField {
    pub fn constant(c: f64) -> Self {
        TrigField { constant: c, modes: Vec::new() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut acc = self.constant;
        for (k, &(c, s)) in self.modes.iter().enumerate() {
            let (sn, cs) = (std::f64::consts::TAU * (k + 1) as f64 * x).sin_cos();
            acc += c * cs + s * sn;
        }
        acc
    }

    /// A guaranteed lower bound of the field.
    pub fn lower_bound(&self) -> f64 {
        self.constant - self.modes.iter().map(|(c, s)| c.hypot(*s)).sum::<f64>()
    }
}

/// Samples of a tangent field along the circle; the true value at `grid[i]`
/// is `values[i]·2^exponent`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariationField {
    pub source: TrigField,
    /// Number of recurrence steps applied; 1 means the field itself.
    pub n: u64,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub exponent: i32,
}

impl VariationField {
    pub fn sample(source: TrigField, grid: Vec<f64>) -> Self {
        let values = grid.iter().map(|&x| source.eval(x)).collect();
        VariationField { source, n: 1, grid, values, exponent: 0 }
    }

    pub fn uniform_grid(source: TrigField, size: usize) -> Self {
        Self::sample(source, (0..size).map(|i| i as f64 / size as f64).collect())
    }

    /// `min_i values[i]·2^exponent`.
    pub fn inf(&self) -> f64 {
        let m = self.values.iter().copied().fold(f64::INFINITY, f64::min);
        m * 2f64.powi(self.exponent)
    }

    pub fn value(&self, i: usize) -> f64 {
        self.values[i] * 2f64.powi(self.exponent)
    }
}

const RESCALE_ABOVE: f64 = 1e280;
const RESCALE_BITS: i32 = 900;

fn variation_at<R: MapScalar>(map: &AnalyticCircleMap, v: &TrigField, x: f64, n: u64) -> (f64, i32) {
    let mut p = Lifted::<R>::new(R::from_f64(x));
    let mut w = v.eval(x);
    let mut e = 0i32;
    for _ in 1..n {
        p = map.step(p);
        let y = p.frac.to_f64();
        w = map.derivative(y) * w + v.eval(y) * 2f64.powi(-e);
        if w.abs() > RESCALE_ABOVE {
            w *= 2f64.powi(-RESCALE_BITS);
            e += RESCALE_BITS;
        }
    }
    (w, e)
}

/// Pushes the field forward by the first-variation recurrence
/// `v_k(x) = F'(F^{k−1}(x))·v_{k−1}(x) + v(F^{k−1}(x))`, `v_1 = v`.
pub fn propagate_variation(map: &AnalyticCircleMap, v: &VariationField, n: u64) -> VariationField {
    assert!(n >= 1, "n ≥ 1");
    let out: Vec<(f64, i32)> = v
        .grid
        .par_iter()
        .map(|&x| dispatch!(map.precision(), R => variation_at::<R>(map, &v.source, x, n)))
        .collect();
    let exponent = out.iter().map(|o| o.1).max().unwrap_or(0);
    let values = out.iter().map(|&(w, e)| w * 2f64.powi(e - exponent)).collect();
    VariationField { source: v.source.clone(), n, grid: v.grid.clone(), values, exponent }
}

#[cfg(test)]
mod tests {
    use std::sync::OnceLock;

    use proptest::prelude::*;

    use super::*;

    fn golden(fam: MapFamily) -> AnalyticCircleMap {
        fam.member(fam.tune_to_rotation(&ContinuedFraction::golden(), 30).unwrap().theta)
    }

    fn arnold() -> &'static AnalyticCircleMap {
        static M: OnceLock<AnalyticCircleMap> = OnceLock::new();
        M.get_or_init(|| golden(MapFamily::arnold_cubic()))
    }

    fn two_harmonic() -> &'static AnalyticCircleMap {
        static M: OnceLock<AnalyticCircleMap> = OnceLock::new();
        M.get_or_init(|| golden(MapFamily::two_harmonic(0.1)))
    }

    #[test]
    fn partition_counts_and_cover() {
        let f = arnold();
        assert_eq!(partition(f, 1).unwrap().len(), 3);
        for m in [0usize, 4, 9, 14] {
            let p = partition(f, m).unwrap();
            let (_, q_m) = ContinuedFraction::golden().convergents(m).unwrap();
            let (_, q_n) = ContinuedFraction::golden().convergents(m + 1).unwrap();
            assert_eq!(p.len() as i128, q_m + q_n);
            assert!((p.total_length - 1.0).abs() <= 1e-10 * p.len() as f64);
            assert!(p.max_gap.abs() < 1e-13);
            assert!(p.atoms.windows(2).all(|w| w[0].start < w[1].start));
        }
    }

    #[test]
    fn silver_partition_count_matches_recurrence() {
        let fam = MapFamily::arnold_cubic();
        let f = fam.member(fam.tune_to_rotation(&ContinuedFraction::silver(), 10).unwrap().theta);
        let p = partition(&f, 5).unwrap();
        // q_5 + q_6 from q_{k+1} = 2 q_k + q_{k−1}, q_0 = 1, q_{−1} = 0.
        let mut q = (0u64, 1u64);
        let mut seq = vec![1u64];
        for _ in 0..6 {
            q = (q.1, 2 * q.1 + q.0);
            seq.push(q.1);
        }
        assert_eq!(p.len() as u64, seq[5] + seq[6]);
        assert_eq!(seq[5] + seq[6], 70 + 169);
    }

    #[test]
    fn partitions_refine() {
        let f = arnold();
        let coarse = partition(f, 8).unwrap();
        let fine = partition(f, 9).unwrap();
        for a in &fine.atoms {
            let mid = a.start + 0.5 * a.length;
            let c = &coarse.atoms[coarse.locate(mid)];
            assert!(a.start >= c.start - 1e-15 && a.start + a.length <= c.start + c.length + 1e-15);
        }
    }

    #[test]
    fn orbit_order_matches_rotation() {
        let f = arnold();
        let n = 89 + 144;
        let x: Vec<f64> = f.orbit::<f64>(n).iter().map(|p| p.frac).collect();
        let rho = (5f64.sqrt() - 1.0) / 2.0;
        let r: Vec<f64> = (0..n).map(|i| (i as f64 * rho).fract()).collect();
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
            idx
        };
        assert_eq!(order(&x), order(&r));
    }

    #[test]
    fn rigid_rotation_has_few_gaps() {
        let p = rotation_partition(&ContinuedFraction::golden(), 8).unwrap();
        let mut lens: Vec<f64> = p.atoms.iter().map(|a| a.length).collect();
        lens.sort_by(f64::total_cmp);
        lens.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
        assert!(lens.len() <= 3, "{lens:?}");
        let s = bounds_stats(&p);
        let mut ratios: Vec<f64> = (0..p.len())
            .map(|k| {
                let r = p.atoms[k].length / p.atoms[(k + 1) % p.len()].length;
                r.max(1.0 / r)
            })
            .collect();
        ratios.sort_by(f64::total_cmp);
        ratios.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        assert!(ratios.len() <= 3);
        assert!((s.k_max - (5f64.sqrt() + 1.0) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn bounds_stabilize() {
        let f = arnold();
        let a = bounds_stats(&partition(f, 10).unwrap());
        let b = bounds_stats(&partition(f, 18).unwrap());
        assert!(a.k_min >= 1.0 && a.k_max >= a.k_min);
        assert!(((a.k_max - b.k_max) / b.k_max).abs() < 0.05, "{} {}", a.k_max, b.k_max);
        let total: u64 = b.histogram.iter().map(|h| h.count).sum();
        assert_eq!(total as usize, partition(f, 18).unwrap().len());
    }

    #[test]
    fn scaling_ratios_converge_universally() {
        let a = scaling_ratios(arnold(), 20).unwrap();
        let b = scaling_ratios(two_harmonic(), 20).unwrap();
        assert!(a.rows.iter().all(|r| r.ratio > 0.0 && r.ratio < 1.0));
        assert!((a.rows[19].ratio - a.rows[18].ratio).abs() < 1e-3);
        let digits3 = |v: f64| (v * 1e3).round();
        assert_eq!(digits3(a.limit), digits3(b.limit));
        assert_eq!(a.to_csv().header(), "m,len_Im,ratio,aitken");
    }

    #[test]
    fn conjugacy_basics() {
        let f = arnold();
        let id = build_conjugacy(f, f, 6).unwrap();
        assert!(id.nodes.iter().all(|(x, y)| x == y));
        assert_eq!(id.eval(0.0), 0.0);
        let g = two_harmonic();
        for m in [5usize, 10, 15] {
            let psi = build_conjugacy(f, g, m).unwrap();
            assert!(psi.is_strictly_increasing());
            assert_eq!(psi.eval(0.0), 0.0);
        }
    }

    #[test]
    fn conjugacy_refines_and_conjugates_endpoints() {
        let (f, g) = (arnold(), two_harmonic());
        let m = 9;
        let psi = build_conjugacy(f, g, m).unwrap();
        let finer = build_conjugacy(f, g, m + 1).unwrap();
        for &(x, y) in &psi.nodes[..psi.nodes.len() - 1] {
            assert!((finer.eval(x) - y).abs() < 1e-15);
        }
        let o1 = f.orbit::<f64>(psi.nodes.len() - 1);
        let o2 = g.orbit::<f64>(psi.nodes.len() - 1);
        for i in 0..o1.len() - 1 {
            let lhs = psi.eval(f.eval(o1[i].frac, 0));
            let rhs = g.eval(psi.eval(o1[i].frac), 0);
            assert!((lhs - rhs).abs() < 1e-12, "i={i}");
            assert!((psi.eval(o1[i].frac) - o2[i].frac).abs() < 1e-15);
        }
        // Inside atoms ψ_m and ψ_{m+1} differ by at most an adjacent atom length.
        let p2 = partition(g, m).unwrap();
        let longest = p2.atoms.iter().map(|a| a.length).fold(0.0, f64::max);
        for k in 0..2000 {
            let x = k as f64 / 2000.0;
            assert!((psi.eval(x) - finer.eval(x)).abs() <= longest);
        }
    }

    #[test]
    fn digit_mismatch_is_reported() {
        let fam = MapFamily::arnold_cubic();
        let s = fam.member(fam.tune_to_rotation(&ContinuedFraction::silver(), 8).unwrap().theta);
        assert!(matches!(build_conjugacy(arnold(), &s, 4), Err(GeometryError::DigitMismatch { k: 0 })));
    }

    #[test]
    fn regularity_identity_branch() {
        let r = regularity_fit(arnold(), arnold(), 12).unwrap();
        assert!(r.identity);
        assert!(r.alpha_hat.is_none());
        assert!(r.rows.iter().all(|row| row.t == 1.0));
        assert!(matches!(regularity_fit(arnold(), arnold(), 5), Err(GeometryError::FitRefused(_))));
    }

    #[test]
    fn regularity_fit_is_geometric() {
        let r = regularity_fit(arnold(), two_harmonic(), 22).unwrap();
        let [lo, hi] = r.window.unwrap();
        assert!(r.rows[lo..=hi].iter().all(|row| row.residual >= NOISE_FLOOR));
        assert!(r.mu_hat.unwrap() < 1.0);
        assert!(r.fit.unwrap().r2 >= 0.98);
        assert!(r.alpha_hat.unwrap() > 0.05);
    }

    #[test]
    fn renormalizations_converge() {
        let same = renorm_convergence(arnold(), arnold(), 6, 2).unwrap();
        assert!(same.distances.iter().all(|&d| d == 0.0));
        let r = renorm_convergence(arnold(), two_harmonic(), 12, 4).unwrap();
        assert!(r.heights.iter().all(|&h| h == 1));
        let mu = r.mu_hat.unwrap();
        assert!(mu > 0.0 && mu < 1.0);
        assert!(r.fit.unwrap().r2 >= 0.98);
    }

    #[test]
    fn delta_ratios_alternate_and_agree() {
        let g = ContinuedFraction::golden();
        let a = delta_estimate(&MapFamily::arnold_cubic(), &g, 16).unwrap();
        let b = delta_estimate(&MapFamily::two_harmonic(0.1), &g, 16).unwrap();
        let ratios: Vec<f64> = a.rows.iter().filter_map(|r| r.ratio).collect();
        assert!(ratios.len() >= 10);
        assert!(ratios.iter().all(|r| *r < 0.0));
        let (da, db) = (a.delta_hat.unwrap(), b.delta_hat.unwrap());
        assert!(((da - db) / da).abs() < 0.01);
        assert!(a.stable);
        assert!(matches!(delta_estimate(&MapFamily::arnold_cubic(), &g, 4), Err(GeometryError::FitRefused(_))));
    }

    #[test]
    fn variation_matches_parameter_derivative() {
        // v ≡ 1 is the θ-derivative, so v_n = ∂θ F_θ^n; central difference
        // in fixed point as an independent oracle.
        let f = arnold().with_precision(Precision::Ext);
        let h = Fx::from_raw(1i128 << 84);
        let plus = f.with_theta(Fx::from_raw(f.theta().raw() + h.raw()));
        let minus = f.with_theta(Fx::from_raw(f.theta().raw() - h.raw()));
        let field = VariationField::uniform_grid(TrigField::constant(1.0), 16);
        for n in [1u64, 2, 7, 30] {
            let v = propagate_variation(&f, &field, n);
            for (i, &x) in field.grid.iter().enumerate() {
                let a = plus.iterate_lifted(Lifted::new(Fx::from_f64(x)), n);
                let b = minus.iterate_lifted(Lifted::new(Fx::from_f64(x)), n);
                let diff = Fx::from_raw(a.frac.raw() - b.frac.raw()).to_f64() + (a.winding - b.winding) as f64;
                let oracle = diff / (2.0 * h.to_f64());
                assert!(((v.value(i) - oracle) / oracle).abs() < 1e-12, "n={n} x={x}");
            }
        }
        let v2 = propagate_variation(&f, &field, 2);
        for (i, &x) in field.grid.iter().enumerate() {
            assert!((v2.value(i) - (f.derivative(f.eval(x, 0)) + 1.0)).abs() < 1e-13);
            assert!(v2.value(i) >= 1.0);
        }
    }

    #[test]
    fn cone_is_invariant_for_constant_field() {
        let field = VariationField::uniform_grid(TrigField::constant(0.5), 256);
        let v = propagate_variation(arnold(), &field, 50);
        assert!(v.inf() >= 0.5);
    }

    #[test]
    fn return_interval_minimum_grows() {
        let f = arnold();
        let d = digits_through(f, 12).unwrap();
        let field = TrigField::constant(1.0);
        let mut prev = 0.0;
        for k in 1..=10 {
            let r = d.level(k).unwrap();
            let x = r.x.to_f64();
            let grid: Vec<f64> = (0..=64).map(|i| x * i as f64 / 64.0).collect();
            let v = propagate_variation(f, &VariationField::sample(field.clone(), grid), r.q);
            let min = v.inf();
            assert!(min >= prev, "k={k}: {min} < {prev}");
            prev = min;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn random_positive_fields_stay_positive(
            c in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..4),
            margin in 0.01f64..1.0,
        ) {
            let constant = c.iter().map(|(a, b)| a.hypot(*b)).sum::<f64>() + margin;
            let field = TrigField { constant, modes: c };
            let base = VariationField::uniform_grid(field.clone(), 64);
            let inf_v = base.inf();
            prop_assert!(field.lower_bound() > 0.0);
            let v = propagate_variation(arnold(), &base, 100);
            prop_assert!(v.inf() >= inf_v.min(field.lower_bound()));
        }
    }
}
