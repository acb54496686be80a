use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use geoflow_core::diagnostics::{
    self, angle_diagnostic, contraction_fit, contraction_samples, criterion_scan, theoretical_floor,
    DiagnosticsError, ScanConfig, Verdict,
};
use geoflow_core::export::{write_csv, SCHEMA_VERSION};
use geoflow_core::geodesics::{self, GeodesicState};
use geoflow_core::linearization::{
    self, check_bundle_bound, det_exponent, green_bundle, green_sweep, liouville_residual, propagate_jacobi,
    riccati_flow, CurvatureSource, LinearizationConfig, LinearizationError,
};
use geoflow_core::ode::{uniform_grid, IntegratorConfig};
use geoflow_core::surfaces::{default_grid_step, validate_conditions, ModelSpec, SurfaceModel, ValidationConfig};
use geoflow_core::DMatrix;

use crate::artifacts::*;
use crate::config::{CommandKind, RunConfig};
use crate::report;

/// How a successful run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The computation finished but its verdict is negative.
    Negative,
}

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    if cfg.command == CommandKind::Report {
        return report::run(cfg);
    }
    fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output dir {}", cfg.output_dir.display()))?;
    let spec: ModelSpec = cfg.model_spec.parse().with_context(|| format!("model `{}`", cfg.model_spec))?;
    let model = spec.build().with_context(|| format!("model `{}`", cfg.model_spec))?;
    match cfg.command {
        CommandKind::Validate => validate(cfg, &model),
        CommandKind::Simulate => simulate(cfg, &model),
        CommandKind::Scan => scan(cfg, &model),
        CommandKind::Green => green(cfg, &model),
        CommandKind::Floor => floor(cfg, &model),
        CommandKind::Report => unreachable!(),
    }
}

fn integrator(cfg: &RunConfig) -> IntegratorConfig {
    let d = IntegratorConfig::default();
    IntegratorConfig {
        rtol: cfg.tol("rtol").unwrap_or(d.rtol),
        atol: cfg.tol("atol").unwrap_or(d.atol),
        sample_dt: cfg.dt,
        ..d
    }
}

fn linearization_config(cfg: &RunConfig) -> LinearizationConfig {
    let d = LinearizationConfig::default();
    LinearizationConfig {
        integrator: IntegratorConfig { max_steps: d.integrator.max_steps, ..integrator(cfg) },
        bundle_tol: cfg.tol("bundle_tol").unwrap_or(d.bundle_tol),
        blowup_threshold: cfg.tol("blowup_threshold").unwrap_or(d.blowup_threshold),
        ..d
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).with_context(|| format!("writing {}", path.display()))?))
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "FAILED"
    }
}

fn validate(cfg: &RunConfig, m: &SurfaceModel) -> Result<Outcome> {
    let report = validate_conditions(m, default_grid_step(m), &ValidationConfig::default())?;
    let all_ok = report.all_ok();
    println!("model            {}", m.label());
    println!("condition (A)    {}", yes_no(report.condA_ok));
    let b = if report.condB_checkable { yes_no(report.condB_ok) } else { "FAILED (no period)" };
    println!("condition (B)    {b}");
    println!(
        "condition (C)    {} (measured C1 = {}, C2 = {})",
        yes_no(report.condC_ok),
        report::fmt6(report.measured_C1),
        report::fmt6(report.measured_C2)
    );
    if let Some(eta) = report.eta {
        println!("eta              {}", report::fmt6(eta));
    }
    write_json(&cfg.output_dir, VALIDATE_JSON, &ValidateArtifact {
        schema_version: SCHEMA_VERSION,
        model: m.label().to_string(),
        all_ok,
        report,
    })?;
    Ok(if all_ok { Outcome::Success } else { Outcome::Negative })
}

fn simulate(cfg: &RunConfig, m: &SurfaceModel) -> Result<Outcome> {
    let icfg = integrator(cfg);
    let s0 = GeodesicState::from_slope(m, cfg.x0, 0.0, cfg.b0, cfg.side);
    let traj = geodesics::integrate(m, &s0, cfg.t_final, &icfg).context("integrating geodesic")?;
    traj.write_csv(create(&cfg.output_dir, TRAJECTORY_CSV)?)?;
    let series = diagnostics::average_series(&traj);
    series.write_csv(create(&cfg.output_dir, AVERAGE_CSV)?)?;

    let mut envelope_holds = None;
    let mut envelope_min_margin = None;
    if m.slope_bounds().is_some() && cfg.b0.abs() < 1.0 - geodesics::MERIDIAN_SNAP {
        let env = geodesics::envelope_check(m, cfg.x0, cfg.b0, &traj.times, &icfg)?;
        write_csv(
            create(&cfg.output_dir, ENVELOPE_CSV)?,
            "t,b,lower,upper",
            (0..env.times.len()).map(|i| vec![env.times[i], env.b[i], env.lower[i], env.upper[i]]),
        )?;
        envelope_holds = Some(env.holds);
        envelope_min_margin = finite(env.min_margin);
    }
    let art = SimulateArtifact {
        schema_version: SCHEMA_VERSION,
        model: m.label().to_string(),
        initial_state: s0,
        final_state: *traj.states.last().unwrap(),
        t_final: traj.horizon(),
        n_samples: traj.len(),
        energy_drift: finite(traj.max_energy_drift()),
        clairaut_drift: finite(traj.max_clairaut_drift()),
        final_avg: series.avg.last().copied().and_then(finite),
        envelope_holds,
        envelope_min_margin,
    };
    println!("model            {}", art.model);
    println!("samples          {}", art.n_samples);
    println!("energy drift     {}", report::fmt_opt(art.energy_drift));
    println!("clairaut drift   {}", report::fmt_opt(art.clairaut_drift));
    println!("average K(t_f)   {}", report::fmt_opt(art.final_avg));
    if let Some(h) = envelope_holds {
        println!("slope envelope   {}", yes_no(h));
    }
    write_json(&cfg.output_dir, SIMULATE_JSON, &art)?;
    Ok(if envelope_holds == Some(false) { Outcome::Negative } else { Outcome::Success })
}

fn scan(cfg: &RunConfig, m: &SurfaceModel) -> Result<Outcome> {
    let d = ScanConfig::default();
    let scfg = ScanConfig {
        n_geodesics: cfg.n_geodesics,
        seed: cfg.seed.expect("checked in config"),
        t_final: cfg.t_final,
        min_b: cfg.tol("min_b").unwrap_or(d.min_b),
        include_meridian_ray: cfg.meridian_ray,
        integrator: integrator(cfg),
        workers: cfg.workers,
        ..d
    };
    let report = criterion_scan(m, &scfg)?;
    report.write_sup_csv(create(&cfg.output_dir, SUP_AVG_CSV)?)?;
    write_json(&cfg.output_dir, SCAN_JSON, &report)?;
    println!("model            {}", report.model);
    println!("geodesics        {} (seed {}, failed {})", report.n_geodesics, report.seed, report.n_failed);
    println!("sup avg(t_f)     {}", report::fmt_opt(report.sup_final));
    println!("B estimate       {}", report::fmt6(report.B_estimate));
    println!("t_star           {}", report::fmt_opt(report.t_star));
    println!("verdict          {}", report.verdict);
    for s in report.samples.iter().filter(|s| s.error.is_some()) {
        eprintln!("sample {} (x0 = {}, b0 = {}): {}", s.index, s.x0, s.b0, s.error.as_deref().unwrap_or(""));
    }
    Ok(if report.verdict == Verdict::CriterionMet { Outcome::Success } else { Outcome::Negative })
}

fn floor(cfg: &RunConfig, m: &SurfaceModel) -> Result<Outcome> {
    let (art, outcome) = match theoretical_floor(m) {
        Ok(f) => {
            println!("model            {}", f.model);
            println!("eta              {}", report::fmt6(f.eta));
            println!("period T         {}", report::fmt6(f.period));
            println!("C1               {}", report::fmt6(f.c1));
            println!("floor            {}", report::fmt6(f.floor));
            println!("t_star           {}", report::fmt6(f.t_star));
            let art = FloorArtifact {
                schema_version: SCHEMA_VERSION,
                model: m.label().to_string(),
                applicable: true,
                floor: Some(f),
                reason: None,
            };
            (art, Outcome::Success)
        }
        Err(DiagnosticsError::ConditionsNotMet(reason)) => {
            println!("model            {}", m.label());
            println!("floor            not applicable: {reason}");
            let art = FloorArtifact {
                schema_version: SCHEMA_VERSION,
                model: m.label().to_string(),
                applicable: false,
                floor: None,
                reason: Some(reason),
            };
            (art, Outcome::Negative)
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&cfg.output_dir, FLOOR_JSON, &art)?;
    Ok(outcome)
}

/// Base points of the bundle sweep along the orbit.
const SWEEP_POINTS: usize = 16;

/// Spacing of the grid used for the determinant formula check.
const LIOUVILLE_DT: f64 = 0.005;

fn green(cfg: &RunConfig, m: &SurfaceModel) -> Result<Outcome> {
    let lcfg = linearization_config(cfg);
    let theta = GeodesicState::from_slope(m, cfg.x0, 0.0, cfg.b0, cfg.side);
    let mut art = GreenArtifact {
        schema_version: SCHEMA_VERSION,
        model: m.label().to_string(),
        theta,
        conjugate_point: None,
        u_s: None,
        u_u: None,
        residual_s: None,
        residual_u: None,
        r_used: None,
        converged: false,
        curvature_bound: m.curvature_bound(),
        bound_ok: None,
        sweep_points: 0,
        angle: None,
        lambda_s: None,
        c_s: None,
        lambda_u: None,
        c_u: None,
        liouville_horizon: None,
        liouville_residual: None,
        det_exponent: None,
        notes: Vec::new(),
    };
    let est = match green_bundle(m, &theta, &lcfg) {
        Ok(e) => e,
        Err(LinearizationError::ConjugatePoint { t }) => {
            art.conjugate_point = Some(t);
            art.notes.push(format!("conjugate point at t = {t}"));
            println!("conjugate point  t = {}", report::fmt6(t));
            write_json(&cfg.output_dir, GREEN_JSON, &art)?;
            return Ok(Outcome::Negative);
        }
        Err(LinearizationError::NotConverged { estimate, .. }) => {
            art.notes.push("Green bundle doubling did not converge by the horizon cap".into());
            *estimate
        }
        Err(e) => return Err(e).context("Green bundle at theta"),
    };
    let (us, uu) = est.scalars().expect("surfaces have scalar bundles");
    art.u_s = finite(us);
    art.u_u = finite(uu);
    art.residual_s = finite(est.residual_s);
    art.residual_u = finite(est.residual_u);
    art.r_used = Some(est.r_used());
    art.converged = est.converged;
    art.bound_ok = m.curvature_bound().map(|c| check_bundle_bound(&est, c));

    // Sweep along the orbit.
    let traj = geodesics::integrate(m, &theta, cfg.t_final, &integrator(cfg)).context("integrating orbit")?;
    let stride = traj.len().div_ceil(SWEEP_POINTS).max(1);
    let sweep = green_sweep(m, &traj, stride, &lcfg).context("Green sweep")?;
    linearization::write_green_csv(create(&cfg.output_dir, GREEN_CSV)?, &sweep)?;
    art.sweep_points = sweep.len();
    let bundles: Vec<_> = sweep.iter().map(|s| s.estimate.clone()).collect();
    match angle_diagnostic(&bundles) {
        Ok(a) => art.angle = Some(a),
        Err(e) => art.notes.push(format!("angle diagnostic: {e}")),
    }

    // Contraction rates from the contracting Green solutions.
    let thetas: Vec<GeodesicState> = sweep.iter().take(8).map(|s| s.state).collect();
    let horizon = cfg.t_final.min(20.0);
    for backward in [false, true] {
        let fit = contraction_samples(m, &thetas, horizon, 1.0, backward, &lcfg).and_then(|s| contraction_fit(&s));
        match fit {
            Ok(f) if backward => (art.lambda_u, art.c_u) = (Some(f.lambda), Some(f.c)),
            Ok(f) => (art.lambda_s, art.c_s) = (Some(f.lambda), Some(f.c)),
            Err(e) => art.notes.push(format!("{} contraction: {e}", if backward { "unstable" } else { "stable" })),
        }
    }

    // Determinant formula along the unstable Green solution.
    let t_l = cfg.t_final.min(50.0);
    let times = uniform_grid(0.0, t_l, LIOUVILLE_DT);
    let source = CurvatureSource::geodesic(m, theta);
    let u0 = DMatrix::from_element(1, 1, uu);
    let frames = propagate_jacobi(&source, &times, &DMatrix::identity(1, 1), &u0, &lcfg)?;
    let ric = riccati_flow(&source, &times, &u0, &lcfg)?;
    write_csv(
        create(&cfg.output_dir, DET_CSV)?,
        "t,log_det",
        frames.iter().step_by(20).map(|f| vec![f.t, f.log_abs_det()]),
    )?;
    art.liouville_horizon = Some(t_l);
    if ric.len() == frames.len() {
        art.liouville_residual = liouville_residual(&frames, &ric).ok().and_then(finite);
    } else {
        art.notes.push("Riccati solution blew up along the unstable frame".into());
    }
    art.det_exponent = det_exponent(&frames, (0.0, t_l)).ok().and_then(finite);

    println!("model            {}", art.model);
    println!("u_s, u_u         {}, {}", report::fmt6(us), report::fmt6(uu));
    println!("converged        {} (r = {})", art.converged, report::fmt6(est.r_used()));
    if let Some(a) = &art.angle {
        println!("delta            {} (D check {})", report::fmt6(a.delta), yes_no(a.D_check));
    }
    println!("lambda_s         {}", report::fmt_opt(art.lambda_s));
    println!("lambda_u         {}", report::fmt_opt(art.lambda_u));
    println!("liouville resid  {}", report::fmt_opt(art.liouville_residual));
    println!("det exponent     {}", report::fmt_opt(art.det_exponent));
    for n in &art.notes {
        println!("note             {n}");
    }
    write_json(&cfg.output_dir, GREEN_JSON, &art)?;
    let certified = art.converged
        && art.angle.is_some_and(|a| a.D_check && a.delta > 0.0)
        && art.lambda_s.is_some()
        && art.lambda_u.is_some();
    Ok(if certified { Outcome::Success } else { Outcome::Negative })
}
