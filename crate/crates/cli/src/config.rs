//! Experiment configuration: a JSON file merged with command-line flags.

use std::path::Path;

use renormlab_core::circlemap::MapSpec;
use renormlab_core::{ContinuedFraction, MapFamily, Precision};
use serde::{Deserialize, Serialize};

use crate::SchemaError;

pub const COMMANDS: &[&str] = &[
    "rotnum",
    "tune",
    "partition",
    "renorm",
    "converge",
    "scaling",
    "delta",
    "rigidity",
    "fatou",
    "grid-area",
    "julia",
    "deep-point",
];

/// Every field is optional on input; `fill` supplies the per-command
/// defaults, and the filled form is what gets echoed and hashed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    /// Second family for two-map experiments.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub family2: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MapSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map2: Option<MapSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    /// `golden`, `silver`, or terms with a parenthesised period, e.g. `3,(1)`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cf: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tune_depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orbit_cap: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit_from: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationals: Option<Vec<[i64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heights: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lattice_elements: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_iter: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_range: Option<f64>,
    /// Raster half-width in units of `|I_H|`, centred at the critical point.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<f64>,
    /// Radii in units of `|I_H|`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $(if $src.$f.is_some() { $dst.$f = $src.$f.clone(); })*
    };
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { unknown_field(e.inner()) } else { path };
            SchemaError::new(&field, &e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self, SchemaError> {
        let text = std::fs::read_to_string(path).map_err(|e| SchemaError::new("config", &format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Fields set in `other` win.
    pub fn overlay(&mut self, other: &ExperimentConfig) {
        overlay!(self, other; command, family, family2, map, map2, theta, cf, precision, tune_depth, depth, tol,
            orbit_cap, level, n, fit_from, rationals, heights, lattice_elements, window_max, resolution, max_iter,
            k_range, half_width, radii, out);
    }

    /// Fills defaults for the configured command and validates every field.
    pub fn fill(mut self, default_precision: Precision) -> Result<Self, SchemaError> {
        let cmd = self.command.clone().ok_or_else(|| SchemaError::new("command", "missing"))?;
        if !COMMANDS.contains(&cmd.as_str()) {
            return Err(SchemaError::new("command", &format!("unknown subcommand `{cmd}`")));
        }
        let c = cmd.as_str();
        self.precision.get_or_insert(default_precision);
        self.out.get_or_insert_with(|| "renormlab-out".into());
        self.family.get_or_insert_with(|| "arnold-cubic".into());
        match c {
            "rotnum" => {
                self.tol.get_or_insert(1e-9);
                self.orbit_cap.get_or_insert(10_000_000);
                self.depth.get_or_insert(20);
            }
            "tune" => {
                self.cf.get_or_insert_with(|| "golden".into());
                self.tune_depth.get_or_insert(30);
            }
            "partition" => {
                self.level.get_or_insert(15);
            }
            "renorm" => {
                self.n.get_or_insert(10);
            }
            "converge" => {
                self.family2.get_or_insert_with(|| "two-harmonic-0.1".into());
                self.n.get_or_insert(14);
                self.fit_from.get_or_insert(4);
            }
            "scaling" => {
                self.n.get_or_insert(20);
            }
            "delta" => {
                self.cf.get_or_insert_with(|| "golden".into());
                self.n.get_or_insert(16);
            }
            "rigidity" => {
                self.family2.get_or_insert_with(|| "two-harmonic-0.1".into());
                self.n.get_or_insert(26);
            }
            "fatou" => {
                self.rationals.get_or_insert_with(|| {
                    let mut v = vec![[0, 1]];
                    for q in 2..=5i64 {
                        v.extend((1..q).filter(|&p| gcd(p, q) == 1).map(|p| [p, q]));
                    }
                    v
                });
            }
            "grid-area" => {
                self.heights.get_or_insert_with(|| vec![50, 200, 1000]);
                self.lattice_elements.get_or_insert(150_000);
                self.window_max.get_or_insert(0.2);
            }
            "julia" => {
                self.level.get_or_insert(2);
                self.resolution.get_or_insert(512);
                self.max_iter.get_or_insert(512);
                self.k_range.get_or_insert(2.0);
            }
            "deep-point" => {
                self.level.get_or_insert(2);
                self.resolution.get_or_insert(2048);
                self.max_iter.get_or_insert(512);
                self.k_range.get_or_insert(2.0);
                self.half_width.get_or_insert(0.25);
                self.radii.get_or_insert_with(|| (3..=9).rev().map(|k| 2f64.powi(-k)).collect());
            }
            _ => unreachable!(),
        }
        if matches!(c, "partition" | "renorm" | "converge" | "scaling" | "rigidity" | "julia" | "deep-point")
            && self.theta.is_none()
            && self.map.is_none()
        {
            self.cf.get_or_insert_with(|| "golden".into());
        }
        if self.cf.is_some() && self.map.is_none() {
            self.tune_depth.get_or_insert(30);
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), SchemaError> {
        let c = self.command.as_deref().unwrap_or_default();
        for (name, f) in [("family", &self.family), ("family2", &self.family2)] {
            if let Some(f) = f {
                if MapFamily::by_name(f).is_none() {
                    return Err(SchemaError::new(name, &format!("unknown family `{f}`")));
                }
            }
        }
        for (name, m) in [("map", &self.map), ("map2", &self.map2)] {
            if let Some(m) = m {
                m.build().map_err(|e| SchemaError::new(name, &e.to_string()))?;
            }
        }
        if let Some(t) = self.theta {
            if !t.is_finite() {
                return Err(SchemaError::new("theta", "not finite"));
            }
        }
        if let Some(cf) = &self.cf {
            parse_cf(cf)?;
        }
        if c == "rotnum" && self.theta.is_none() && self.map.is_none() && self.cf.is_none() {
            return Err(SchemaError::new("theta", "rotnum needs theta, cf or map"));
        }
        if let Some(t) = self.tol {
            if !(t > 0.0 && t < 1.0) {
                return Err(SchemaError::new("tol", "must lie in (0, 1)"));
            }
        }
        if let Some(r) = self.resolution {
            if !r.is_power_of_two() || !(16..=4096).contains(&r) {
                return Err(SchemaError::new("resolution", "must be a power of two in [16, 4096]"));
            }
        }
        if let Some(k) = self.k_range {
            if !(k > 0.0 && k.is_finite()) {
                return Err(SchemaError::new("k_range", "must be positive"));
            }
        }
        if let Some(h) = self.half_width {
            if !(h > 0.0 && h.is_finite()) {
                return Err(SchemaError::new("half_width", "must be positive"));
            }
        }
        if let Some(r) = &self.radii {
            if r.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(SchemaError::new("radii", "radii must be positive"));
            }
        }
        if let Some(h) = &self.heights {
            if h.is_empty() || h.contains(&0) {
                return Err(SchemaError::new("heights", "heights must be positive"));
            }
        }
        if let Some(rs) = &self.rationals {
            for (i, &[p, q]) in rs.iter().enumerate() {
                if q < 1 || p < 0 || p >= q.max(1) && !(p == 0 && q == 1) || gcd(p, q) != 1 {
                    return Err(SchemaError::new(&format!("rationals[{i}]"), &format!("{p}/{q} is not a reduced fraction in [0, 1)")));
                }
            }
        }
        if let Some(w) = self.window_max {
            if !(w > 0.0 && w <= 1.0) {
                return Err(SchemaError::new("window_max", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        self.precision.unwrap_or_default()
    }
}

fn unknown_field(e: &serde_json::Error) -> String {
    // serde reports unknown fields at the parent path; pull the name out of
    // the message so that the error still names the offending field.
    let msg = e.to_string();
    msg.split('`').nth(1).map(str::to_string).unwrap_or_else(|| "config".into())
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// `golden`, `silver`, `1,2,3` or `3,(1,2)` for a periodic tail.
pub fn parse_cf(s: &str) -> Result<ContinuedFraction, SchemaError> {
    let bad = |m: &str| SchemaError::new("cf", &format!("`{s}`: {m}"));
    match s.trim() {
        "golden" => return Ok(ContinuedFraction::golden()),
        "silver" => return Ok(ContinuedFraction::silver()),
        _ => {}
    }
    let (head, period) = match s.find('(') {
        Some(i) => {
            let tail = s[i + 1..].strip_suffix(')').ok_or_else(|| bad("unclosed period"))?;
            (&s[..i], Some(tail))
        }
        None => (s, None),
    };
    let terms = |t: &str| -> Result<Vec<u64>, SchemaError> {
        t.split(',').map(str::trim).filter(|x| !x.is_empty()).map(|x| x.parse::<u64>().map_err(|_| bad("terms must be positive integers"))).collect()
    };
    let h = terms(head)?;
    let cf = match period {
        Some(p) => ContinuedFraction::periodic(h, terms(p)?),
        None => ContinuedFraction::finite(h),
    };
    cf.map_err(|e| bad(&e.to_string()))
}
