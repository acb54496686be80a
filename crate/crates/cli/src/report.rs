//! Human summary of the artifacts found in an output directory.

use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Result};
use geoflow_core::diagnostics::{ScanReport, Verdict};

use crate::artifacts::*;
use crate::commands::Outcome;
use crate::config::RunConfig;
use crate::plot::{line_plot, Series};

pub const REPORT_TXT: &str = "report.txt";

/// Six significant digits.
pub fn fmt6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), fmt6)
}

fn row(out: &mut String, key: &str, value: impl AsRef<str>) {
    let _ = writeln!(out, "{key:<28}{}", value.as_ref());
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    let dir = &cfg.output_dir;
    let validate: Option<ValidateArtifact> = read_json(dir, VALIDATE_JSON)?;
    let simulate: Option<SimulateArtifact> = read_json(dir, SIMULATE_JSON)?;
    let scan: Option<ScanReport> = read_json(dir, SCAN_JSON)?;
    let green: Option<GreenArtifact> = read_json(dir, GREEN_JSON)?;
    let floor: Option<FloorArtifact> = read_json(dir, FLOOR_JSON)?;
    if validate.is_none() && simulate.is_none() && scan.is_none() && green.is_none() && floor.is_none() {
        bail!(
            "missing artifacts: none of {VALIDATE_JSON}, {SIMULATE_JSON}, {SCAN_JSON}, {GREEN_JSON}, {FLOOR_JSON} in {}",
            dir.display()
        );
    }

    let mut out = String::new();
    let mut negative = false;
    if let Some(v) = &validate {
        row(&mut out, "model", &v.model);
        row(&mut out, "conditions (A)/(B)/(C)", format!(
            "{}/{}/{}",
            v.report.condA_ok, v.report.condB_ok, v.report.condC_ok
        ));
        negative |= !v.all_ok;
    }
    if let Some(f) = &floor {
        match &f.floor {
            Some(r) => {
                row(&mut out, "theoretical floor", fmt6(r.floor));
                row(&mut out, "t_star", fmt6(r.t_star));
            }
            None => row(&mut out, "theoretical floor", format!("n/a ({})", f.reason.as_deref().unwrap_or(""))),
        }
    }
    if let Some(s) = &scan {
        row(&mut out, "scan model", &s.model);
        row(&mut out, "measured sup avg(t_final)", fmt_opt(s.sup_final));
        if let (Some(sup), Some(r)) = (s.sup_final, floor.as_ref().and_then(|f| f.floor.as_ref())) {
            row(&mut out, "sup - floor", fmt6(sup - r.floor));
        }
        row(&mut out, "scan verdict", s.verdict.to_string());
        negative |= s.verdict != Verdict::CriterionMet;
    }
    if let Some(s) = &simulate {
        row(&mut out, "simulate avg(t_final)", fmt_opt(s.final_avg));
        row(&mut out, "energy drift", fmt_opt(s.energy_drift));
        if let Some(h) = s.envelope_holds {
            row(&mut out, "slope envelope holds", h.to_string());
        }
    }
    if let Some(g) = &green {
        if let Some(t) = g.conjugate_point {
            row(&mut out, "conjugate point", fmt6(t));
            negative = true;
        } else {
            row(&mut out, "u_s, u_u", format!("{}, {}", fmt_opt(g.u_s), fmt_opt(g.u_u)));
            row(&mut out, "bundles converged", g.converged.to_string());
            row(&mut out, "delta", fmt_opt(g.angle.map(|a| a.delta)));
            row(&mut out, "D check", g.angle.map_or("-".into(), |a| a.D_check.to_string()));
            row(&mut out, "lambda_s", fmt_opt(g.lambda_s));
            row(&mut out, "lambda_u", fmt_opt(g.lambda_u));
            row(&mut out, "liouville residual", fmt_opt(g.liouville_residual));
            row(&mut out, "det exponent", fmt_opt(g.det_exponent));
        }
    }
    print!("{out}");
    fs::write(dir.join(REPORT_TXT), &out)?;

    if cfg.emit_plots {
        plots(cfg)?;
    }
    Ok(if negative { Outcome::Negative } else { Outcome::Success })
}

fn column(rows: &[Vec<f64>], x: usize, y: usize) -> Vec<(f64, f64)> {
    rows.iter().map(|r| (r[x], r[y])).collect()
}

fn plots(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.output_dir;
    let avg = [AVERAGE_CSV, SUP_AVG_CSV]
        .iter()
        .filter(|n| dir.join(n).exists())
        .map(|n| Ok((*n, read_csv(&dir.join(n))?.1)))
        .collect::<Result<Vec<_>>>()?;
    if !avg.is_empty() {
        let series: Vec<Series> = avg
            .iter()
            .map(|(n, rows)| Series {
                label: if *n == AVERAGE_CSV { "average" } else { "sup average" },
                points: column(rows, 0, 1),
            })
            .collect();
        line_plot(&dir.join("avg.svg"), "curvature average", "t", "avg K", &series)?;
    }
    if dir.join(DET_CSV).exists() {
        let (_, rows) = read_csv(&dir.join(DET_CSV))?;
        let series = [Series { label: "log|det Y|", points: column(&rows, 0, 1) }];
        line_plot(&dir.join("log_det.svg"), "unstable Jacobi determinant", "t", "log|det Y|", &series)?;
    }
    if dir.join(ENVELOPE_CSV).exists() {
        let (_, rows) = read_csv(&dir.join(ENVELOPE_CSV))?;
        let series = [
            Series { label: "b", points: column(&rows, 0, 1) },
            Series { label: "lower", points: column(&rows, 0, 2) },
            Series { label: "upper", points: column(&rows, 0, 3) },
        ];
        line_plot(&dir.join("envelope.svg"), "slope envelope", "t", "b", &series)?;
    }
    Ok(())
}
