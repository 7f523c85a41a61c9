//! `renormlab`: batch driver for the circle-map renormalization experiments.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use renormlab_core::circlemap::MapSpec;
use renormlab_core::report::sorted_json;
use renormlab_core::Precision;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::commands::Outcome;
use crate::config::ExperimentConfig;

/// A field-level configuration error; exit code 2.
#[derive(Debug)]
pub struct SchemaError {
    pub field: String,
    pub message: String,
}

impl SchemaError {
    pub fn new(field: &str, message: &str) -> Self {
        SchemaError { field: field.to_string(), message: message.to_string() }
    }
}

/// A failure inside one of the library modules; exit code 1.
#[derive(Debug)]
pub struct RunError {
    pub module: &'static str,
    pub message: String,
}

impl RunError {
    pub fn new(module: &'static str, e: impl std::fmt::Display) -> Self {
        RunError { module, message: e.to_string() }
    }
}

#[derive(Parser)]
#[command(name = "renormlab", version, about = "Renormalization experiments for analytic critical circle maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Upper bound on worker threads (default: available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(flatten)]
    fields: Fields,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Rotation number and continued-fraction digits of a map.
    Rotnum,
    /// Parameter with a prescribed rotation number.
    Tune,
    /// Dynamical partition and a priori bounds.
    Partition,
    /// Chain of renormalized commuting pairs.
    Renorm,
    /// Distances between renormalizations of two maps.
    Converge,
    /// Closest-return scaling ratios.
    Scaling,
    /// Parameter scaling at the convergents.
    Delta,
    /// Regularity of the conjugacy at the critical point.
    Rigidity,
    /// Fatou coordinates at parabolic parameters.
    Fatou,
    /// Area sums of the parabolic lattice.
    GridArea,
    /// Filled Julia set raster of a pair.
    Julia,
    /// Holes of the filled Julia set near the critical point.
    DeepPoint,
    /// Print the effective configuration and exit.
    EchoConfig,
}

impl Command {
    fn name(self) -> Option<&'static str> {
        Some(match self {
            Command::Rotnum => "rotnum",
            Command::Tune => "tune",
            Command::Partition => "partition",
            Command::Renorm => "renorm",
            Command::Converge => "converge",
            Command::Scaling => "scaling",
            Command::Delta => "delta",
            Command::Rigidity => "rigidity",
            Command::Fatou => "fatou",
            Command::GridArea => "grid-area",
            Command::Julia => "julia",
            Command::DeepPoint => "deep-point",
            Command::EchoConfig => return None,
        })
    }
}

/// One flag per configuration field.
#[derive(Args, Default)]
struct Fields {
    #[arg(long, global = true)]
    family: Option<String>,
    #[arg(long, global = true)]
    family2: Option<String>,
    /// Inline JSON map specification.
    #[arg(long, global = true)]
    map: Option<String>,
    #[arg(long, global = true)]
    map2: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, global = true)]
    cf: Option<String>,
    /// `f64` or `ext`.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    tune_depth: Option<usize>,
    #[arg(long, global = true)]
    depth: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    orbit_cap: Option<u64>,
    #[arg(long, global = true)]
    level: Option<usize>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    fit_from: Option<usize>,
    /// Comma-separated fractions, e.g. `0/1,1/2`.
    #[arg(long, global = true)]
    rationals: Option<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    heights: Option<Vec<u64>>,
    #[arg(long, global = true)]
    lattice_elements: Option<usize>,
    #[arg(long, global = true)]
    window_max: Option<f64>,
    #[arg(long, global = true)]
    resolution: Option<usize>,
    #[arg(long, global = true)]
    max_iter: Option<u32>,
    #[arg(long, global = true)]
    k_range: Option<f64>,
    #[arg(long, global = true)]
    half_width: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<String>,
}

impl Fields {
    fn to_config(&self) -> Result<ExperimentConfig, SchemaError> {
        let spec = |name: &str, s: &Option<String>| -> Result<Option<MapSpec>, SchemaError> {
            s.as_ref()
                .map(|t| serde_json::from_str(t).map_err(|e| SchemaError::new(name, &e.to_string())))
                .transpose()
        };
        let precision = self
            .precision
            .as_ref()
            .map(|p| Precision::parse(p).ok_or_else(|| SchemaError::new("precision", &format!("`{p}` is not f64 or ext"))))
            .transpose()?;
        let rationals = self
            .rationals
            .as_ref()
            .map(|s| {
                s.split(',')
                    .map(|r| {
                        let (p, q) = r.trim().split_once('/').ok_or_else(|| SchemaError::new("rationals", &format!("`{r}` is not p/q")))?;
                        let parse = |x: &str| x.trim().parse::<i64>().map_err(|_| SchemaError::new("rationals", &format!("`{r}` is not p/q")));
                        Ok([parse(p)?, parse(q)?])
                    })
                    .collect::<Result<Vec<_>, SchemaError>>()
            })
            .transpose()?;
        Ok(ExperimentConfig {
            command: None,
            family: self.family.clone(),
            family2: self.family2.clone(),
            map: spec("map", &self.map)?,
            map2: spec("map2", &self.map2)?,
            theta: self.theta,
            cf: self.cf.clone(),
            precision,
            tune_depth: self.tune_depth,
            depth: self.depth,
            tol: self.tol,
            orbit_cap: self.orbit_cap,
            level: self.level,
            n: self.n,
            fit_from: self.fit_from,
            rationals,
            heights: self.heights.clone(),
            lattice_elements: self.lattice_elements,
            window_max: self.window_max,
            resolution: self.resolution,
            max_iter: self.max_iter,
            k_range: self.k_range,
            half_width: self.half_width,
            radii: self.radii.clone(),
            out: self.out.clone(),
        })
    }
}

#[derive(Serialize)]
struct Stage {
    name: String,
    seconds: f64,
}

#[derive(Serialize)]
struct Artifact {
    file: String,
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct RunManifest {
    config: ExperimentConfig,
    config_hash: String,
    tool_version: &'static str,
    precision_mode: Precision,
    workers: usize,
    stages: Vec<Stage>,
    warnings: Vec<String>,
    flagged: bool,
    artifacts: Vec<Artifact>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Precision used when neither the configuration nor a flag sets one.
fn default_precision() -> Result<Precision, SchemaError> {
    match std::env::var("RENORMLAB_PRECISION") {
        Ok(v) => Precision::parse(&v).ok_or_else(|| SchemaError::new("RENORMLAB_PRECISION", &format!("`{v}` is not f64 or ext"))),
        Err(_) => Ok(Precision::F64),
    }
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, SchemaError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut flags = cli.fields.to_config()?;
    flags.command = cli.command.name().map(str::to_string);
    cfg.overlay(&flags);
    cfg.fill(default_precision()?)
}

fn write_artifacts(dir: &Path, outcome: &Outcome) -> Result<Vec<Artifact>, RunError> {
    std::fs::create_dir_all(dir).map_err(|e| RunError::new("io", format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for (name, bytes) in &outcome.artifacts {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| RunError::new("io", format!("{}: {e}", path.display())))?;
        out.push(Artifact { file: name.clone(), sha256: sha256_hex(bytes), bytes: bytes.len() });
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match effective_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[config]: field `{}`: {}", e.field, e.message);
            return ExitCode::from(2);
        }
    };
    if cli.command == Command::EchoConfig {
        print!("{}", sorted_json(&cfg));
        return ExitCode::SUCCESS;
    }
    let workers = cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global() {
        eprintln!("error[workers]: {e}");
        return ExitCode::from(1);
    }
    let config_json = sorted_json(&cfg);
    let started = Instant::now();
    let outcome = match commands::run(&cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error[{}]: {}", e.module, e.message);
            return ExitCode::from(1);
        }
    };
    let mut stages = outcome.stages.iter().map(|(n, s)| Stage { name: n.clone(), seconds: *s }).collect::<Vec<_>>();
    stages.push(Stage { name: "total".into(), seconds: started.elapsed().as_secs_f64() });
    let dir = PathBuf::from(cfg.out.clone().unwrap_or_default());
    let artifacts = match write_artifacts(&dir, &outcome) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error[{}]: {}", e.module, e.message);
            return ExitCode::from(1);
        }
    };
    let manifest = RunManifest {
        config_hash: sha256_hex(config_json.as_bytes()),
        config: cfg.clone(),
        tool_version: env!("CARGO_PKG_VERSION"),
        precision_mode: cfg.precision(),
        workers,
        stages,
        warnings: outcome.warnings.clone(),
        flagged: outcome.flagged,
        artifacts,
    };
    let path = dir.join("manifest.json");
    if let Err(e) = std::fs::write(&path, sorted_json(&manifest)) {
        eprintln!("error[io]: {}: {e}", path.display());
        return ExitCode::from(1);
    }
    print!("{}", outcome.stdout);
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    if outcome.flagged {
        ExitCode::from(3)
    } else {
        ExitCode::SUCCESS
    }
}
