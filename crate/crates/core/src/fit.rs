//! Sequence extrapolation and least-squares fits.

use serde::Serialize;

/// Neumaier compensated sum, accumulated in slice order.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Aitken Δ² transform of a sequence; entry `i` uses `s[i], s[i+1], s[i+2]`.
/// Returns `None` where the second difference vanishes.
pub fn aitken(s: &[f64]) -> Vec<Option<f64>> {
    if s.len() < 3 {
        return Vec::new();
    }
    s.windows(3)
        .map(|w| {
            let d1 = w[1] - w[0];
            let d2 = w[2] - w[1];
            let den = d2 - d1;
            if den == 0.0 || !den.is_finite() {
                None
            } else {
                Some(w[2] - d2 * d2 / den)
            }
        })
        .collect()
}

/// Aitken Δ² that refuses to extrapolate once both first differences fall
/// below `rel_floor·|s|`: past that point the sequence is noise.
pub fn aitken_with_floor(s: &[f64], rel_floor: f64) -> Vec<Option<f64>> {
    aitken(s)
        .into_iter()
        .zip(s.windows(3))
        .map(|(a, w)| {
            let scale = w[2].abs().max(f64::MIN_POSITIVE);
            let noisy = (w[1] - w[0]).abs() <= rel_floor * scale && (w[2] - w[1]).abs() <= rel_floor * scale;
            if noisy {
                None
            } else {
                a
            }
        })
        .collect()
}

/// Default relative floor for extrapolation, `100·ε`.
pub const EXTRAPOLATION_FLOOR: f64 = 100.0 * f64::EPSILON;

/// Best limit estimate: the last well-defined Aitken value, or the last term.
pub fn aitken_limit(s: &[f64]) -> Option<f64> {
    aitken_with_floor(s, EXTRAPOLATION_FLOOR)
        .into_iter()
        .rev()
        .flatten()
        .next()
        .or_else(|| s.last().copied())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares `y ≈ intercept + slope·x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
    let n = x.len();
    if n < 2 || n != y.len() {
        return None;
    }
    let mx = compensated_sum(x.iter().copied()) / n as f64;
    let my = compensated_sum(y.iter().copied()) / n as f64;
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LinearFit { intercept, slope, r2, n })
}

/// Fits `y ≈ C·μ^x` through `log y`; returns `(C, μ, fit)`.
pub fn geometric_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64, LinearFit)> {
    if y.iter().any(|v| *v <= 0.0 || !v.is_finite()) {
        return None;
    }
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let fit = linear_fit(x, &ly)?;
    Some((fit.intercept.exp(), fit.slope.exp(), fit))
}
