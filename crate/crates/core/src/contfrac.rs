//! Continued fractions, convergents and the Gauss map.
//!
//! A [`ContinuedFraction`] is a finite head followed by an optional period,
//! which covers every rational and every quadratic irrational exactly. The
//! convergents follow the convention `p_m / q_m = [r_0, …, r_{m-1}]` with
//! `q_0 = 1`, `q_1 = r_0`, so the level-`m` objects of the other modules are
//! indexed by the same `m`.

use std::cmp::Ordering;
use std::fmt;

use rug::float::Round;
use rug::{Float, Integer};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CfError {
    #[error("insufficient terms: requested {requested}, available {available}")]
    InsufficientTerms { requested: usize, available: usize },
    #[error("convergent overflow at index {0} (128-bit integers)")]
    Overflow(usize),
    #[error("continued fraction terms must be positive (term {index} is {value})")]
    NonPositive { index: usize, value: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct ContinuedFraction {
    #[serde(default)]
    pub head: Vec<u64>,
    #[serde(default)]
    pub period: Vec<u64>,
}

impl ContinuedFraction {
    pub fn new(head: Vec<u64>, period: Vec<u64>) -> Result<Self, CfError> {
        let cf = ContinuedFraction { head, period };
        cf.validate()?;
        Ok(cf)
    }

    pub fn finite(terms: Vec<u64>) -> Result<Self, CfError> {
        Self::new(terms, Vec::new())
    }

    pub fn periodic(head: Vec<u64>, period: Vec<u64>) -> Result<Self, CfError> {
        Self::new(head, period)
    }

    /// `(√5 − 1)/2 = [1, 1, 1, …]`.
    pub fn golden() -> Self {
        ContinuedFraction { head: Vec::new(), period: vec![1] }
    }

    /// `√2 − 1 = [2, 2, 2, …]`.
    pub fn silver() -> Self {
        ContinuedFraction { head: Vec::new(), period: vec![2] }
    }

    pub fn validate(&self) -> Result<(), CfError> {
        for (index, &value) in self.head.iter().chain(&self.period).enumerate() {
            if value == 0 {
                return Err(CfError::NonPositive { index, value });
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.period.is_empty()
    }

    /// Number of terms, `None` for infinite expansions.
    pub fn len(&self) -> Option<usize> {
        self.is_finite().then_some(self.head.len())
    }

    pub fn is_empty(&self) -> bool {
        self.head.is_empty() && self.period.is_empty()
    }

    pub fn term(&self, i: usize) -> Option<u64> {
        if i < self.head.len() {
            Some(self.head[i])
        } else if self.period.is_empty() {
            None
        } else {
            Some(self.period[(i - self.head.len()) % self.period.len()])
        }
    }

    pub fn terms(&self, n: usize) -> Result<Vec<u64>, CfError> {
        (0..n)
            .map(|i| {
                self.term(i).ok_or(CfError::InsufficientTerms {
                    requested: n,
                    available: self.head.len(),
                })
            })
            .collect()
    }

    /// Gauss shift: drops the first `n` terms.
    pub fn shift(&self, n: usize) -> ContinuedFraction {
        if n <= self.head.len() {
            return ContinuedFraction {
                head: self.head[n..].to_vec(),
                period: self.period.clone(),
            };
        }
        if self.period.is_empty() {
            return ContinuedFraction::default();
        }
        let k = (n - self.head.len()) % self.period.len();
        let mut period = self.period[k..].to_vec();
        period.extend_from_slice(&self.period[..k]);
        ContinuedFraction { head: Vec::new(), period }
    }

    /// `(p_m, q_m)`.
    pub fn convergents(&self, m: usize) -> Result<(i128, i128), CfError> {
        Ok(*self.convergent_table(m)?.last().unwrap())
    }

    /// `(p_k, q_k)` for `k = 0..=m`.
    pub fn convergent_table(&self, m: usize) -> Result<Vec<(i128, i128)>, CfError> {
        let terms = self.terms(m)?;
        let mut out = Vec::with_capacity(m + 1);
        let (mut p_prev, mut q_prev) = (1i128, 0i128);
        let (mut p, mut q) = (0i128, 1i128);
        out.push((p, q));
        for (k, &r) in terms.iter().enumerate() {
            let r = r as i128;
            let p_next = r
                .checked_mul(p)
                .and_then(|v| v.checked_add(p_prev))
                .ok_or(CfError::Overflow(k + 1))?;
            let q_next = r
                .checked_mul(q)
                .and_then(|v| v.checked_add(q_prev))
                .ok_or(CfError::Overflow(k + 1))?;
            (p_prev, q_prev, p, q) = (p, q, p_next, q_next);
            out.push((p, q));
        }
        Ok(out)
    }

    /// `p_depth / q_depth` in binary64 (correctly rounded).
    pub fn value(&self, depth: usize) -> Result<f64, CfError> {
        Ok(self.value_float(depth, 64)?.to_f64())
    }

    /// `p_depth / q_depth` rounded to `prec` bits.
    pub fn value_float(&self, depth: usize, prec: u32) -> Result<Float, CfError> {
        let (p, q) = self.value_exact(depth)?;
        Ok(Float::with_val(prec, p) / Float::with_val(prec.max(128), q))
    }

    /// Exact `(p_depth, q_depth)` as arbitrary-size integers; never overflows.
    pub fn value_exact(&self, depth: usize) -> Result<(Integer, Integer), CfError> {
        let terms = self.terms(depth)?;
        let (mut p_prev, mut q_prev) = (Integer::from(1), Integer::from(0));
        let (mut p, mut q) = (Integer::from(0), Integer::from(1));
        for &r in &terms {
            let p_next = Integer::from(&p * r) + &p_prev;
            let q_next = Integer::from(&q * r) + &q_prev;
            p_prev = std::mem::replace(&mut p, p_next);
            q_prev = std::mem::replace(&mut q, q_next);
        }
        Ok((p, q))
    }

    pub fn is_bounded_type(&self, bound: u64, depth: usize) -> Result<bool, CfError> {
        Ok(self.terms(depth)?.into_iter().all(|r| r <= bound))
    }
}

impl fmt::Display for ContinuedFraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let head: Vec<String> = self.head.iter().map(u64::to_string).collect();
        write!(f, "[{}", head.join(","))?;
        if !self.period.is_empty() {
            let period: Vec<String> = self.period.iter().map(u64::to_string).collect();
            if !head.is_empty() {
                f.write_str(";")?;
            }
            write!(f, "({})", period.join(","))?;
        }
        f.write_str("]")
    }
}

/// Compares the numbers `[a…]` and `[b…]` given as digit streams, where a
/// terminated stream is followed by an implicit digit ∞.
pub fn compare_digits(a: &[u64], a_terminates: bool, b: &[u64], b_terminates: bool) -> Option<Ordering> {
    let n = a.len().max(b.len());
    for i in 0..n {
        let da = match a.get(i) {
            Some(&d) => Some(d as u128),
            None if a_terminates => None,
            None => return None,
        };
        let db = match b.get(i) {
            Some(&d) => Some(d as u128),
            None if b_terminates => None,
            None => return None,
        };
        // None encodes ∞.
        let ord = match (da, db) {
            (Some(x), Some(y)) => x.cmp(&y),
            (None, Some(_)) => Ordering::Greater,
            (Some(_), None) => Ordering::Less,
            (None, None) => Ordering::Equal,
        };
        if ord != Ordering::Equal {
            // A larger digit at an even index means a smaller number.
            return Some(if i % 2 == 0 { ord.reverse() } else { ord });
        }
        if da.is_none() {
            return Some(Ordering::Equal);
        }
    }
    if a_terminates && b_terminates && a.len() == b.len() {
        Some(Ordering::Equal)
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionStop {
    /// All requested digits were extracted.
    Complete,
    /// The remainder vanished: the input is rational to the given tolerance.
    Rational,
    /// Working precision could not decide the next digit.
    PrecisionExhausted,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaussExpansion {
    pub terms: Vec<u64>,
    pub stop: ExpansionStop,
}

impl GaussExpansion {
    pub fn to_cf(&self) -> ContinuedFraction {
        ContinuedFraction { head: self.terms.clone(), period: Vec::new() }
    }
}

/// Default rational-detection tolerance on the remainder scale.
pub const DEFAULT_GAUSS_TOL: f64 = 1.0 / (1u64 << 45) as f64;

/// Extracts up to `n` digits of a binary64 input, treating it as known to
/// within half a unit in the last place.
pub fn gauss_expand(x: f64, n: usize, tol: f64) -> GaussExpansion {
    gauss_expand_float(&Float::with_val(53, x), n, tol)
}

/// Extracts up to `n` digits with interval arithmetic under directed
/// rounding, starting from the enclosure `x ± ulp(x)/2`.
pub fn gauss_expand_float(x: &Float, n: usize, tol: f64) -> GaussExpansion {
    let prec = x.prec() + 32;
    let half_ulp = match x.get_exp() {
        Some(e) => Float::with_val(prec, 1u32) << (e - x.prec() as i32 - 1),
        None => Float::with_val(prec, 0u32),
    };
    let mut lo = Float::with_val_round(prec, x - &half_ulp, Round::Down).0;
    let mut hi = Float::with_val_round(prec, x + &half_ulp, Round::Up).0;
    gauss_expand_interval(&mut lo, &mut hi, n, tol, prec)
}

fn gauss_expand_interval(lo: &mut Float, hi: &mut Float, n: usize, tol: f64, prec: u32) -> GaussExpansion {
    let mut terms = Vec::with_capacity(n);
    // Reduce mod 1 first.
    let base = lo.clone().floor();
    *lo = Float::with_val_round(prec, &*lo - &base, Round::Down).0;
    *hi = Float::with_val_round(prec, &*hi - &base, Round::Up).0;
    let stop = loop {
        if terms.len() == n {
            break ExpansionStop::Complete;
        }
        if *hi <= tol {
            break ExpansionStop::Rational;
        }
        if *lo <= 0 {
            break ExpansionStop::PrecisionExhausted;
        }
        let inv_lo = Float::with_val_round(prec, hi.recip_ref(), Round::Down).0;
        let inv_hi = Float::with_val_round(prec, lo.recip_ref(), Round::Up).0;
        let d_lo = inv_lo.clone().floor();
        let d_hi = inv_hi.clone().floor();
        if d_lo != d_hi {
            // A straddled integer k: accept x = 1/k if the enclosure is tight.
            let k = d_hi.clone();
            let recip_k = Float::with_val(prec, k.recip_ref());
            let near = Float::with_val(prec, &*lo - &recip_k).abs() <= tol
                && Float::with_val(prec, &*hi - &recip_k).abs() <= tol;
            if near {
                if let Some(k) = k.to_integer().and_then(|k| k.to_u64()) {
                    terms.push(k);
                    break ExpansionStop::Rational;
                }
            }
            break ExpansionStop::PrecisionExhausted;
        }
        let digit = match d_lo.to_integer().and_then(|d| d.to_u64()) {
            Some(d) if d >= 1 => d,
            _ => break ExpansionStop::PrecisionExhausted,
        };
        terms.push(digit);
        *lo = Float::with_val_round(prec, &inv_lo - &d_lo, Round::Down).0;
        *hi = Float::with_val_round(prec, &inv_hi - &d_lo, Round::Up).0;
    };
    GaussExpansion { terms, stop }
}

/// Upper bound `1/(q_m q_{m+1})` on `|value(m) − value(m+1)|`.
pub fn convergent_gap_bound(q_m: i128, q_next: i128) -> f64 {
    1.0 / (q_m as f64 * q_next as f64)
}
