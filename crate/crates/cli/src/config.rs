use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

pub const OUTPUT_DIR_ENV: &str = "GEOFLOW_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "geoflow-out";

/// Keys accepted in `tolerances`.
pub const TOLERANCE_KEYS: [&str; 5] = ["rtol", "atol", "min_b", "bundle_tol", "blowup_threshold"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Validate,
    Simulate,
    Scan,
    Green,
    Floor,
    Report,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model_spec: String,
    pub command: CommandKind,
    pub t_final: f64,
    pub n_geodesics: usize,
    pub seed: Option<u64>,
    pub tolerances: BTreeMap<String, f64>,
    pub output_dir: PathBuf,
    pub emit_plots: bool,
    pub workers: Option<usize>,
    /// Base point `(x₀, b₀, sign vy)` for simulate/green.
    pub x0: f64,
    pub b0: f64,
    pub side: f64,
    pub dt: f64,
    pub meridian_ray: bool,
}

impl RunConfig {
    pub fn tol(&self, key: &str) -> Option<f64> {
        self.tolerances.get(key).copied()
    }
}

/// Settings read from a JSON config file; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model_spec: Option<String>,
    pub t_final: Option<f64>,
    pub n_geodesics: Option<usize>,
    pub seed: Option<u64>,
    pub tolerances: Option<BTreeMap<String, f64>>,
    pub output_dir: Option<PathBuf>,
    pub emit_plots: Option<bool>,
    pub workers: Option<usize>,
    pub x0: Option<f64>,
    pub b0: Option<f64>,
    pub side: Option<f64>,
    pub dt: Option<f64>,
    pub meridian_ray: Option<bool>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Options shared by every subcommand; flags override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON config file supplying defaults for the flags below.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Surface preset, `name[:key=value,...]` (e.g. `exp_family:a=3`).
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub t_final: Option<f64>,
    /// Number of sampled geodesics.
    #[arg(long = "n", alias = "n-geodesics", global = true)]
    pub n_geodesics: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Artifact directory [default: $GEOFLOW_OUTPUT_DIR or ./geoflow-out].
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Write SVG plots next to the data files.
    #[arg(long, global = true)]
    pub plots: bool,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub x0: Option<f64>,
    /// Initial slope `x'(0)` in [-1, 1].
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub b0: Option<f64>,
    /// Sign of `y'(0)`.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub side: Option<f64>,
    /// Output sample spacing.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub dt: Option<f64>,
    /// Include the outgoing meridian from the window edge in scans.
    #[arg(long, global = true)]
    pub meridian_ray: bool,
    /// Tolerance override `key=value` (rtol, atol, min_b, bundle_tol, blowup_threshold).
    #[arg(long = "tol", global = true, value_parser = parse_tol)]
    pub tolerances: Vec<(String, f64)>,
}

fn parse_tol(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("tolerance `{k}`: {e}"))?;
    Ok((k.trim().to_string(), v))
}

pub fn resolve(command: CommandKind, o: &Overrides) -> Result<RunConfig> {
    let file = match &o.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut tolerances = file.tolerances.unwrap_or_default();
    for (k, v) in &o.tolerances {
        tolerances.insert(k.clone(), *v);
    }
    for (k, v) in &tolerances {
        if !TOLERANCE_KEYS.contains(&k.as_str()) {
            bail!("tolerances.{k}: unknown key (expected one of {})", TOLERANCE_KEYS.join(", "));
        }
        if !(*v > 0.0) || !v.is_finite() {
            bail!("tolerances.{k}: must be positive and finite, got {v}");
        }
    }
    let output_dir = o
        .output_dir
        .clone()
        .or(file.output_dir)
        .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));
    let cfg = RunConfig {
        model_spec: o.model.clone().or(file.model_spec).unwrap_or_default(),
        command,
        t_final: o.t_final.or(file.t_final).unwrap_or(50.0),
        n_geodesics: o.n_geodesics.or(file.n_geodesics).unwrap_or(64),
        seed: o.seed.or(file.seed),
        tolerances,
        output_dir,
        emit_plots: o.plots || file.emit_plots.unwrap_or(false),
        workers: o.workers.or(file.workers),
        x0: o.x0.or(file.x0).unwrap_or(0.0),
        b0: o.b0.or(file.b0).unwrap_or(1.0),
        side: o.side.or(file.side).unwrap_or(1.0),
        dt: o.dt.or(file.dt).unwrap_or(0.05),
        meridian_ray: o.meridian_ray || file.meridian_ray.unwrap_or(false),
    };
    check(&cfg)?;
    Ok(cfg)
}

fn check(cfg: &RunConfig) -> Result<()> {
    if cfg.command != CommandKind::Report && cfg.model_spec.is_empty() {
        bail!("model_spec: required (pass --model)");
    }
    if !(cfg.t_final > 0.0) || !cfg.t_final.is_finite() {
        bail!("t_final: must be positive, got {}", cfg.t_final);
    }
    if cfg.n_geodesics == 0 {
        bail!("n_geodesics: must be at least 1");
    }
    if cfg.command == CommandKind::Scan && cfg.seed.is_none() {
        bail!("seed: required for scan (pass --seed)");
    }
    if !(cfg.b0.abs() <= 1.0) {
        bail!("b0: must lie in [-1, 1], got {}", cfg.b0);
    }
    if !(cfg.dt > 0.0) || !cfg.dt.is_finite() {
        bail!("dt: must be positive, got {}", cfg.dt);
    }
    if cfg.workers == Some(0) {
        bail!("workers: must be at least 1");
    }
    Ok(())
}
