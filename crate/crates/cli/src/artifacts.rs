//! JSON artifacts written by the commands and read back by `report`.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use geoflow_core::diagnostics::{AngleDiagnostic, FloorReport};
use geoflow_core::geodesics::GeodesicState;
use geoflow_core::surfaces::ConditionReport;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const VALIDATE_JSON: &str = "validate.json";
pub const SIMULATE_JSON: &str = "simulate.json";
pub const SCAN_JSON: &str = "scan.json";
pub const GREEN_JSON: &str = "green.json";
pub const FLOOR_JSON: &str = "floor.json";

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const AVERAGE_CSV: &str = "average.csv";
pub const SUP_AVG_CSV: &str = "sup_avg.csv";
pub const ENVELOPE_CSV: &str = "envelope.csv";
pub const GREEN_CSV: &str = "green.csv";
pub const DET_CSV: &str = "green_det.csv";

/// Keeps JSON lossless: non-finite values become `null`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidateArtifact {
    pub schema_version: u32,
    pub model: String,
    pub all_ok: bool,
    pub report: ConditionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateArtifact {
    pub schema_version: u32,
    pub model: String,
    pub initial_state: GeodesicState,
    pub final_state: GeodesicState,
    pub t_final: f64,
    pub n_samples: usize,
    pub energy_drift: Option<f64>,
    pub clairaut_drift: Option<f64>,
    pub final_avg: Option<f64>,
    pub envelope_holds: Option<bool>,
    pub envelope_min_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorArtifact {
    pub schema_version: u32,
    pub model: String,
    pub applicable: bool,
    pub floor: Option<FloorReport>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreenArtifact {
    pub schema_version: u32,
    pub model: String,
    pub theta: GeodesicState,
    /// Set when the no-conjugate-points hypothesis fails; nothing else is computed then.
    pub conjugate_point: Option<f64>,
    pub u_s: Option<f64>,
    pub u_u: Option<f64>,
    pub residual_s: Option<f64>,
    pub residual_u: Option<f64>,
    pub r_used: Option<f64>,
    pub converged: bool,
    pub curvature_bound: Option<f64>,
    pub bound_ok: Option<bool>,
    pub sweep_points: usize,
    pub angle: Option<AngleDiagnostic>,
    pub lambda_s: Option<f64>,
    pub c_s: Option<f64>,
    pub lambda_u: Option<f64>,
    pub c_u: Option<f64>,
    pub liouville_horizon: Option<f64>,
    pub liouville_residual: Option<f64>,
    pub det_exponent: Option<f64>,
    pub notes: Vec<String>,
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// `Ok(None)` when the file does not exist.
pub fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<Option<T>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map(Some).with_context(|| format!("parsing {}", path.display()))
}

/// Numeric columns of a CSV written by this tool.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().with_context(|| format!("{}: bad number `{f}`", path.display())))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
