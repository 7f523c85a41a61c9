//! Subcommand bodies. Each returns its artifacts in memory; `main` writes
//! them and the manifest.

use std::time::Instant;

use renormlab_core::circlemap::DigitStop;
use renormlab_core::geometry::{self, bounds_stats};
use renormlab_core::pairs::CommutingPair;
use renormlab_core::parabolic::{self, LatticeSpec, Petal, RasterSpec, RasterView};
use renormlab_core::report::{num, sorted_json, Csv, Summary};
use renormlab_core::{AnalyticCircleMap, Fx, MapFamily, Precision};
use serde::Serialize;
use serde_json::json;

use crate::config::{parse_cf, ExperimentConfig};
use crate::RunError;

#[derive(Default)]
pub struct Outcome {
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub stdout: String,
    pub warnings: Vec<String>,
    /// Completed, but with precision or undecided flags: exit code 3.
    pub flagged: bool,
    pub stages: Vec<(String, f64)>,
}

impl Outcome {
    fn csv(&mut self, name: &str, c: &Csv) {
        self.artifacts.push((name.into(), c.render().into_bytes()));
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) {
        self.artifacts.push((name.into(), sorted_json(v).into_bytes()));
    }

    fn flag(&mut self, w: String) {
        self.warnings.push(w);
        self.flagged = true;
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let v = f();
        self.stages.push((name.into(), t.elapsed().as_secs_f64()));
        v
    }
}

fn family(name: &str, precision: Precision) -> MapFamily {
    // Names were checked during validation.
    MapFamily::by_name(name).expect("validated family").with_precision(precision)
}

/// The configured map: an inline spec, else `θ`, else tuned to `cf`.
fn first_map(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<AnalyticCircleMap, RunError> {
    select_map(cfg, cfg.map.as_ref(), cfg.family.as_deref().unwrap_or("arnold-cubic"), out)
}

fn second_map(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<AnalyticCircleMap, RunError> {
    select_map(cfg, cfg.map2.as_ref(), cfg.family2.as_deref().unwrap_or("arnold-cubic"), out)
}

fn select_map(
    cfg: &ExperimentConfig,
    spec: Option<&renormlab_core::circlemap::MapSpec>,
    fam: &str,
    out: &mut Outcome,
) -> Result<AnalyticCircleMap, RunError> {
    if let Some(s) = spec {
        return s.build().map_err(|e| RunError::new("circlemap", e));
    }
    let fam = family(fam, cfg.precision());
    if let Some(t) = cfg.theta {
        return Ok(fam.member(Fx::from_f64(t)));
    }
    let cf = parse_cf(cfg.cf.as_deref().unwrap_or("golden")).map_err(|e| RunError::new("contfrac", e.message))?;
    let depth = cfg.tune_depth.unwrap_or(30);
    let tuning = out.stage(&format!("tune {}", fam.name), || fam.tune_to_rotation(&cf, depth)).map_err(|e| RunError::new("circlemap", e))?;
    if !tuning.complete {
        out.flag(format!("tuning of {} matched {} of {depth} digits", fam.name, tuning.matched));
    }
    Ok(fam.member(tuning.theta))
}

fn geometry_err(e: geometry::GeometryError, out: &mut Outcome) -> Result<(), RunError> {
    // Precision exhaustion is a completed-but-flagged outcome.
    match e {
        geometry::GeometryError::PrecisionExhausted { .. } => {
            out.flag(e.to_string());
            Ok(())
        }
        e => Err(RunError::new("geometry", e)),
    }
}

pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    let mut out = Outcome::default();
    match cfg.command.as_deref().unwrap_or_default() {
        "rotnum" => rotnum(cfg, &mut out)?,
        "tune" => tune(cfg, &mut out)?,
        "partition" => partition(cfg, &mut out)?,
        "renorm" => renorm(cfg, &mut out)?,
        "converge" => converge(cfg, &mut out)?,
        "scaling" => scaling(cfg, &mut out)?,
        "delta" => delta(cfg, &mut out)?,
        "rigidity" => rigidity(cfg, &mut out)?,
        "fatou" => fatou(cfg, &mut out)?,
        "grid-area" => grid_area(cfg, &mut out)?,
        "julia" => julia(cfg, &mut out)?,
        "deep-point" => deep_point(cfg, &mut out)?,
        c => return Err(RunError::new("cli", format!("unknown subcommand `{c}`"))),
    }
    Ok(out)
}

fn rotnum(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let map = first_map(cfg, out)?;
    let est = out.stage("rotation number", || map.rotation_number(cfg.tol.unwrap_or(1e-9), cfg.orbit_cap.unwrap_or(10_000_000)));
    let digits = out.stage("digits", || map.rotation_digits(cfg.depth.unwrap_or(20)));
    // Closest returns that stop on a fixed point pin down `p/q` exactly.
    let fraction = est.rational.map(|(p, q)| [p, q as i64]).or_else(|| {
        digits.is_rational().then(|| {
            let c = digits.returns.last().expect("level −1 entry");
            [c.p, c.q as i64]
        })
    });
    let rational = fraction.is_some();
    if !est.converged && !rational {
        out.flag(format!("rotation number enclosure [{}, {}] wider than tol", num(est.lower), num(est.upper)));
    }
    match digits.stop {
        DigitStop::PrecisionExhausted => out.flag("digits stopped: precision exhausted".into()),
        DigitStop::Undecided { .. } => out.flag("digits stopped: undecided at the height cap".into()),
        _ => {}
    }
    let v = json!({
        "rho": fraction.map_or(est.rho, |[p, q]| p as f64 / q as f64),
        "rational": rational,
        "fraction": fraction,
        "lower": est.lower,
        "upper": est.upper,
        "iterations": est.iterations,
        "digits": digits.terms,
        "digit_stop": digits.stop,
    });
    out.stdout = sorted_json(&v);
    out.json("rotnum.json", &v);
    Ok(())
}

fn tune(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let fam = family(cfg.family.as_deref().unwrap_or("arnold-cubic"), cfg.precision());
    let cf = parse_cf(cfg.cf.as_deref().unwrap_or("golden")).map_err(|e| RunError::new("contfrac", e.message))?;
    let depth = cfg.tune_depth.unwrap_or(30);
    let t = out.stage("tune", || fam.tune_to_rotation(&cf, depth)).map_err(|e| RunError::new("circlemap", e))?;
    if !t.complete {
        out.flag(format!("matched {} of {depth} digits", t.matched));
    }
    let v = json!({
        "family": fam.name,
        "cf": cf.to_string(),
        "theta": t.theta.to_decimal(),
        "theta_f64": t.theta.to_f64(),
        "matched": t.matched,
        "complete": t.complete,
    });
    out.stdout = sorted_json(&v);
    out.json("tune.json", &v);
    Ok(())
}

fn partition(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let map = first_map(cfg, out)?;
    let m = cfg.level.unwrap_or(15);
    match out.stage("partition", || geometry::partition(&map, m)) {
        Ok(p) => {
            let stats = bounds_stats(&p);
            out.csv("partition.csv", &p.to_csv());
            out.json("bounds_stats.json", &stats);
            out.stdout = format!("atoms {} k_max {} total_length {}\n", p.len(), num(stats.k_max), num(p.total_length));
            Ok(())
        }
        Err(e) => geometry_err(e, out),
    }
}

fn renorm(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let map = first_map(cfg, out)?;
    let n = cfg.n.unwrap_or(10);
    let (chain, heights) = out.stage("renormalize", || geometry::renormalization_chain(&map, n)).map_err(|e| RunError::new("pairs", e))?;
    if chain.iter().any(CommutingPair::auto_extended) {
        out.warnings.push("some pairs switched to extended precision".into());
    }
    let pairs: Vec<_> = chain
        .iter()
        .zip(&heights)
        .enumerate()
        .map(|(k, (z, h))| json!({ "n": k, "height": h, "pair": z.manifest(), "precision": z.precision() }))
        .collect();
    out.json("pairs.json", &pairs);
    out.stdout = format!("heights {heights:?}\n");
    Ok(())
}

fn converge(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let (m1, m2) = (first_map(cfg, out)?, second_map(cfg, out)?);
    let n = cfg.n.unwrap_or(14);
    let c = out
        .stage("distances", || geometry::renorm_convergence(&m1, &m2, n, cfg.fit_from.unwrap_or(4)))
        .map_err(|e| RunError::new("geometry", e))?;
    out.csv("converge.csv", &c.to_csv());
    out.json("converge.json", &json!({ "summary": c.summary(), "c_hat": c.c_hat, "mu_hat": c.mu_hat, "fit": c.fit }));
    out.stdout = sorted_json(&c.summary());
    Ok(())
}

fn scaling(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let map = first_map(cfg, out)?;
    match out.stage("scaling", || geometry::scaling_ratios(&map, cfg.n.unwrap_or(20))) {
        Ok(s) => {
            out.csv("scaling.csv", &s.to_csv());
            out.json("scaling.json", &json!({ "summary": s.summary(), "limit": s.limit, "drift": s.drift }));
            out.stdout = sorted_json(&s.summary());
            Ok(())
        }
        Err(e) => geometry_err(e, out),
    }
}

fn delta(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let fam = family(cfg.family.as_deref().unwrap_or("arnold-cubic"), cfg.precision());
    let cf = parse_cf(cfg.cf.as_deref().unwrap_or("golden")).map_err(|e| RunError::new("contfrac", e.message))?;
    let d = out.stage("delta", || geometry::delta_estimate(&fam, &cf, cfg.n.unwrap_or(16))).map_err(|e| RunError::new("geometry", e))?;
    if d.truncated {
        out.flag("parameter differences reached the precision floor".into());
    }
    if !d.stable {
        out.warnings.push("last two extrapolated ratios differ by more than 1%".into());
    }
    out.csv("delta.csv", &d.to_csv());
    out.json("delta.json", &json!({ "summary": d.summary(), "delta_hat": d.delta_hat, "stable": d.stable, "truncated": d.truncated }));
    out.stdout = sorted_json(&d.summary());
    Ok(())
}

fn rigidity(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let (m1, m2) = (first_map(cfg, out)?, second_map(cfg, out)?);
    match out.stage("regularity", || geometry::regularity_fit(&m1, &m2, cfg.n.unwrap_or(26))) {
        Ok(r) => {
            out.csv("rigidity.csv", &r.to_csv());
            out.json(
                "rigidity.json",
                &json!({
                    "summary": r.summary(),
                    "s_limit": r.s_limit,
                    "mu_hat": r.mu_hat,
                    "lambda_hat": r.lambda_hat,
                    "alpha_hat": r.alpha_hat,
                    "identity": r.identity,
                }),
            );
            out.stdout = sorted_json(&r.summary());
            Ok(())
        }
        Err(e) => geometry_err(e, out),
    }
}

fn fatou(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let fam = family(cfg.family.as_deref().unwrap_or("arnold-cubic"), Precision::F64);
    let err = |e| RunError::new("parabolic", e);
    let mut table = Csv::new(&["p", "q", "petal", "theta", "point", "points", "max_residual"]);
    let mut worst: f64 = 0.0;
    let mut tau = None;
    for &[p, q] in cfg.rationals.as_deref().unwrap_or(&[[0, 1]]) {
        let par = out.stage(&format!("parabolic {p}/{q}"), || parabolic::parabolic_parameter(&fam, p, q as u64)).map_err(err)?;
        for petal in [Petal::Attracting, Petal::Repelling] {
            let fc = parabolic::FatouCoordinate::new(&par, petal, 100_000).map_err(err)?;
            let pts = fc.validation_points(32);
            let r = fc.abel_residual(&pts).map_err(err)?;
            worst = worst.max(r);
            table.push(vec![
                p.to_string(),
                q.to_string(),
                format!("{petal:?}").to_lowercase(),
                num(par.theta),
                num(par.point),
                pts.len().to_string(),
                num(r),
            ]);
        }
        if tau.is_none() {
            let eta = par.perturbed(par.dtheta_for_alpha(5e-3));
            let fp = parabolic::complex_fixed_points(&eta, par.point, 4.0 * par.petal_radius()).map_err(err)?;
            tau = Some(parabolic::tau_check(fp.z_minus()));
        }
    }
    out.csv("fatou.csv", &table);
    let v = json!({ "max_residual": worst, "tau": tau });
    out.json("fatou.json", &v);
    out.stdout = sorted_json(&v);
    Ok(())
}

fn grid_area(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let fam = family(cfg.family.as_deref().unwrap_or("arnold-cubic"), Precision::F64);
    let spec = LatticeSpec { max_elements: cfg.lattice_elements.unwrap_or(150_000), ..Default::default() };
    let mut windows = Csv::new(&["height", "index", "z0", "l", "y", "elements", "area_sum", "c_hat", "capacity_ratio", "capacity_ok"]);
    let mut lattice = Csv::new(&["height", "center_re", "center_im", "area", "generation"]);
    let mut sweeps = Vec::new();
    for &r in cfg.heights.as_deref().unwrap_or(&[50]) {
        let (lat, sw) = out
            .stage(&format!("lattice r={r}"), || parabolic::area_sweep(&fam, r, &spec, cfg.window_max.unwrap_or(0.2)))
            .map_err(|e| RunError::new("parabolic", e))?;
        if sw.truncated {
            out.warnings.push(format!("lattice for r={r} truncated at {} elements", sw.elements));
        }
        for (i, s) in &sw.windows {
            windows.push(vec![
                r.to_string(),
                i.to_string(),
                num(s.z0),
                num(s.l),
                num(s.y),
                s.elements.to_string(),
                num(s.area_sum),
                num(s.c_hat),
                num(s.capacity_ratio),
                s.capacity_ok.to_string(),
            ]);
        }
        for e in &lat.elements {
            lattice.push(vec![r.to_string(), num(e.center.re), num(e.center.im), num(e.area), e.generation.to_string()]);
        }
        sweeps.push(json!({
            "height": r,
            "theta": sw.theta,
            "elements": sw.elements,
            "truncated": sw.truncated,
            "min_c_hat": sw.min_c_hat,
            "capacity_ok": sw.capacity_ok,
        }));
    }
    out.csv("grid_area.csv", &windows);
    out.csv("lattice.csv", &lattice);
    out.json("grid_area.json", &sweeps);
    out.stdout = sorted_json(&sweeps);
    Ok(())
}

fn raster(cfg: &ExperimentConfig, out: &mut Outcome, view: Option<f64>) -> Result<(CommutingPair, parabolic::JuliaRaster), RunError> {
    let map = first_map(cfg, out)?;
    let level = cfg.level.unwrap_or(2);
    let pair = CommutingPair::from_circle_map(&map, level).map_err(|e| RunError::new("pairs", e))?;
    let len = (pair.eta0() - pair.xi0()).abs();
    let spec = RasterSpec {
        resolution: cfg.resolution.unwrap_or(512),
        max_iter: cfg.max_iter.unwrap_or(512),
        k_range: cfg.k_range.unwrap_or(2.0),
        view: view.or(cfg.half_width).map(|h| RasterView { center: 0.0, half_width: h * len }),
    };
    let r = out.stage("raster", || parabolic::julia_raster(&pair, &spec)).map_err(|e| RunError::new("parabolic", e))?;
    let f = r.marked_fraction();
    if f == 0.0 || f == 1.0 {
        out.flag(format!("degenerate raster: marked fraction {f}"));
    }
    Ok((pair, r))
}

fn julia(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let (_, r) = raster(cfg, out, None)?;
    out.artifacts.push(("julia.pgm".into(), r.to_pgm()));
    let side = json!({ "level": cfg.level.unwrap_or(2), "raster": r.sidecar(), "symmetric": r.is_conjugation_symmetric() });
    out.json("julia.json", &side);
    out.stdout = sorted_json(&side);
    Ok(())
}

fn deep_point(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), RunError> {
    let (_, r) = raster(cfg, out, Some(cfg.half_width.unwrap_or(0.25)))?;
    out.artifacts.push(("deep_point.pgm".into(), r.to_pgm()));
    let radii = cfg.radii.clone().unwrap_or_default();
    match parabolic::deep_point_profile(&r, &radii) {
        Ok(p) => {
            let mut c = Csv::new(&["r", "s", "usable", "beta"]);
            for row in &p.rows {
                c.push(vec![num(row.r), num(row.s), row.usable.to_string(), num(p.beta)]);
            }
            out.csv("deep_point.csv", &c);
            let usable = p.rows.iter().filter(|r| r.usable).count();
            let summary = Summary { estimate: Some(p.beta), window: Some([0, usable]), fit_r2: Some(p.fit.r2), precision_mode: Precision::F64 };
            let v = json!({ "summary": summary, "slope": p.slope, "beta": p.beta, "usable_radii": usable, "symmetric": r.is_conjugation_symmetric(), "raster": r.sidecar() });
            out.json("deep_point.json", &v);
            out.stdout = sorted_json(&v);
            if usable < radii.len() {
                out.warnings.push(format!("{} of {} radii unusable at this resolution or iteration count", radii.len() - usable, radii.len()));
            }
            Ok(())
        }
        Err(parabolic::ParabolicError::TooFewRadii(k)) => {
            out.flag(format!("fit refused: {k} usable radii"));
            Ok(())
        }
        Err(e) => Err(RunError::new("parabolic", e)),
    }
}
