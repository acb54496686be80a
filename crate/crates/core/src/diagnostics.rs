//! Averaged-curvature statistics, phase-space scans and hyperbolicity checks.

use std::f64::consts::FRAC_PI_2;
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::{write_csv, SCHEMA_VERSION};
use crate::geodesics::{self, GeodesicError, GeodesicState, Trajectory};
use crate::linearization::{
    self, contracting_frame, BundleEstimate, CurvatureSource, LinearizationConfig, LinearizationError,
};
use crate::ode::{uniform_grid, IntegratorConfig};
use crate::surfaces::{default_grid_step, validate_conditions, SurfaceError, SurfaceModel, ValidationConfig};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("t = {t} exceeds the trajectory horizon {horizon}")]
    BeyondHorizon { t: f64, horizon: f64 },
    #[error("conditions not satisfied: {0}")]
    ConditionsNotMet(String),
    #[error("no sampled time with f(r) < 1: not contracting")]
    NotContracting,
    #[error("bundle estimate {index} did not converge")]
    Unconverged { index: usize },
    #[error("angle diagnostic needs scalar bundles (dimension 1)")]
    NotScalar,
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Linearization(#[from] LinearizationError),
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error("failed to build worker pool: {0}")]
    Pool(String),
}

/// `(1/t)∫₀ᵗ K(γ(s)) ds` on a grid of positive times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSeries {
    pub t_grid: Vec<f64>,
    pub avg: Vec<f64>,
}

impl AverageSeries {
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_csv(w, "t,avg", self.t_grid.iter().zip(&self.avg).map(|(t, a)| vec![*t, *a]))
    }

    /// Running averages of sampled curvature by the composite trapezoid rule.
    /// Linear in the samples; accuracy is second order in the grid spacing.
    pub fn from_samples(times: &[f64], k: &[f64]) -> Result<Self, DiagnosticsError> {
        if times.len() != k.len() || times.first() != Some(&0.0) {
            return Err(DiagnosticsError::InvalidArgument(
                "need matching samples on a grid starting at 0".into(),
            ));
        }
        let mut q = 0.0;
        let mut out = Self { t_grid: Vec::with_capacity(times.len()), avg: Vec::with_capacity(times.len()) };
        for i in 1..times.len() {
            q += 0.5 * (times[i] - times[i - 1]) * (k[i] + k[i - 1]);
            out.t_grid.push(times[i]);
            out.avg.push(q / times[i]);
        }
        Ok(out)
    }

    /// Every value multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { t_grid: self.t_grid.clone(), avg: self.avg.iter().map(|a| a * s).collect() }
    }
}

/// Average of `K` along `traj` over `[0, t]`.
///
/// On grid times this reads the curvature integral carried with the orbit;
/// elsewhere the orbit is re-integrated to `t`. At `t = 0` the limit `K(x₀)`
/// is returned.
pub fn average_curvature(m: &SurfaceModel, traj: &Trajectory, t: f64) -> Result<f64, DiagnosticsError> {
    let horizon = traj.horizon();
    if traj.is_empty() || !(t >= 0.0) || t > horizon * (1.0 + 1e-12) {
        return Err(DiagnosticsError::BeyondHorizon { t, horizon });
    }
    if t == 0.0 {
        return Ok(traj.curvature_samples[0]);
    }
    let i = traj.times.partition_point(|s| *s < t);
    if let Some(&s) = traj.times.get(i) {
        if (s - t).abs() <= 1e-12 * t {
            return Ok(traj.curvature_integral[i] / s);
        }
    }
    let short = geodesics::integrate_on_grid(m, &traj.initial_state(), &[0.0, t], &IntegratorConfig::default())?;
    Ok(short.curvature_integral[1] / t)
}

/// [`average_curvature`] at every positive grid time of `traj`.
pub fn average_series(traj: &Trajectory) -> AverageSeries {
    let (t_grid, avg) = traj
        .times
        .iter()
        .zip(&traj.curvature_integral)
        .filter(|(t, _)| **t > 0.0)
        .map(|(t, q)| (*t, q / t))
        .unzip();
    AverageSeries { t_grid, avg }
}

/// Average Ricci curvature along the geodesic; on a surface this is [`average_curvature`].
pub fn ricci_average(m: &SurfaceModel, traj: &Trajectory, t: f64) -> Result<f64, DiagnosticsError> {
    average_curvature(m, traj, t)
}

/// `(1/t)∫₀ᵗ tr R(s)/(n−1) ds` for a general curvature source.
pub fn ricci_average_for(source: &CurvatureSource, t: f64, cfg: &IntegratorConfig) -> Result<f64, DiagnosticsError> {
    if !(t > 0.0) {
        return Err(DiagnosticsError::InvalidArgument(format!("t must be positive, got {t}")));
    }
    Ok(linearization::trace_average_integral(source, t, cfg)? / t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CriterionMet,
    CriterionFailed,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::CriterionMet => "criterion_met",
            Self::CriterionFailed => "criterion_failed",
            Self::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanConfig {
    pub n_geodesics: usize,
    pub seed: u64,
    pub t_final: f64,
    /// Spacing of the averaging grid `grid_dt, 2·grid_dt, …, t_final`.
    pub grid_dt: f64,
    pub min_b: f64,
    /// Replaces the first sample by the outgoing meridian from the left edge
    /// of the sampling window.
    pub include_meridian_ray: bool,
    /// Overrides the model's sampling window for `x₀`.
    pub x_window: Option<(f64, f64)>,
    pub integrator: IntegratorConfig,
    /// Worker threads; `None` uses the global pool. Does not affect results.
    #[serde(skip)]
    pub workers: Option<usize>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            n_geodesics: 64,
            seed: 7,
            t_final: 60.0,
            grid_dt: 0.5,
            min_b: 1e-3,
            include_meridian_ray: false,
            x_window: None,
            integrator: IntegratorConfig::default(),
            workers: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicSummary {
    pub index: usize,
    pub x0: f64,
    pub b0: f64,
    pub side: f64,
    /// Average at `t_final`; absent when integration failed.
    pub final_avg: Option<f64>,
    pub max_avg_tail: Option<f64>,
    pub energy_drift: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ScanReport {
    pub schema_version: u32,
    pub model: String,
    pub config: ScanConfig,
    pub n_geodesics: usize,
    pub seed: u64,
    pub t_grid: Vec<f64>,
    /// Sup over successful samples of the average at each grid time.
    pub sup_avg: Vec<Option<f64>>,
    /// First grid time at which every sample average is negative.
    pub t_star: Option<f64>,
    pub sup_final: Option<f64>,
    /// `−sup_final` when the criterion is met, else 0.
    pub B_estimate: f64,
    /// Earliest grid time after which the sup stays `≤ −min_b`.
    pub t0_estimate: Option<f64>,
    pub n_failed: usize,
    pub verdict: Verdict,
    pub samples: Vec<GeodesicSummary>,
}

impl ScanReport {
    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// `t,sup_avg` rows; missing values are written as `nan`.
    pub fn write_sup_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_csv(
            w,
            "t,avg",
            self.t_grid.iter().zip(&self.sup_avg).map(|(t, s)| vec![*t, s.unwrap_or(f64::NAN)]),
        )
    }
}

/// Initial conditions `(x₀, b₀, side)` drawn sequentially from the seed.
pub fn sample_initial_conditions(m: &SurfaceModel, cfg: &ScanConfig) -> Vec<(f64, f64, f64)> {
    let (lo, hi) = cfg.x_window.unwrap_or_else(|| m.sampling_window());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out: Vec<(f64, f64, f64)> = (0..cfg.n_geodesics)
        .map(|_| {
            let x0 = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let b0 = rng.gen_range(-1.0..=1.0);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            (x0, b0, side)
        })
        .collect();
    if cfg.include_meridian_ray {
        if let Some(first) = out.first_mut() {
            *first = (lo, 1.0, 1.0);
        }
    }
    out
}

fn scan_one(
    m: &SurfaceModel,
    index: usize,
    (x0, b0, side): (f64, f64, f64),
    times: &[f64],
    cfg: &ScanConfig,
) -> (GeodesicSummary, Option<Vec<f64>>) {
    let s0 = GeodesicState::from_slope(m, x0, 0.0, b0, side);
    let mut summary = GeodesicSummary {
        index,
        x0,
        b0,
        side,
        final_avg: None,
        max_avg_tail: None,
        energy_drift: None,
        error: None,
    };
    match geodesics::integrate_on_grid(m, &s0, times, &cfg.integrator) {
        Ok(traj) => {
            let avg: Vec<f64> = traj.times[1..].iter().zip(&traj.curvature_integral[1..]).map(|(t, q)| q / t).collect();
            if avg.iter().any(|a| !a.is_finite()) {
                summary.error = Some("non-finite curvature average".into());
                return (summary, None);
            }
            summary.final_avg = avg.last().copied();
            let half = avg.len() / 2;
            summary.max_avg_tail = avg[half..].iter().copied().reduce(f64::max);
            summary.energy_drift = Some(traj.max_energy_drift());
            (summary, Some(avg))
        }
        Err(e) => {
            summary.error = Some(e.to_string());
            (summary, None)
        }
    }
}

/// Samples geodesics, integrates them, and aggregates the sup of the running
/// curvature average. The result does not depend on the worker count.
pub fn criterion_scan(m: &SurfaceModel, cfg: &ScanConfig) -> Result<ScanReport, DiagnosticsError> {
    if cfg.n_geodesics == 0 {
        return Err(DiagnosticsError::InvalidArgument("n_geodesics must be at least 1".into()));
    }
    if !(cfg.t_final > 0.0 && cfg.t_final.is_finite()) || !(cfg.grid_dt > 0.0) {
        return Err(DiagnosticsError::InvalidArgument(format!(
            "need t_final > 0 and grid_dt > 0, got {} and {}",
            cfg.t_final, cfg.grid_dt
        )));
    }
    let times = uniform_grid(0.0, cfg.t_final, cfg.grid_dt.min(cfg.t_final));
    let ics = sample_initial_conditions(m, cfg);

    let run = || -> Vec<(GeodesicSummary, Option<Vec<f64>>)> {
        ics.par_iter().enumerate().map(|(i, ic)| scan_one(m, i, *ic, &times, cfg)).collect()
    };
    let results = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| DiagnosticsError::Pool(e.to_string()))?
            .install(run),
        None => run(),
    };

    let t_grid = times[1..].to_vec();
    let mut sup: Vec<Option<f64>> = vec![None; t_grid.len()];
    let mut n_failed = 0;
    let mut samples = Vec::with_capacity(results.len());
    for (summary, avg) in results {
        match avg {
            Some(avg) => {
                for (s, a) in sup.iter_mut().zip(avg) {
                    *s = Some(s.map_or(a, |v| v.max(a)));
                }
            }
            None => n_failed += 1,
        }
        samples.push(summary);
    }

    let sup_final = sup.last().copied().flatten();
    let t_star = t_grid.iter().zip(&sup).find(|(_, s)| s.is_some_and(|v| v < 0.0)).map(|(t, _)| *t);
    let mut t0_estimate = None;
    for (t, s) in t_grid.iter().zip(&sup).rev() {
        if s.is_some_and(|v| v <= -cfg.min_b) {
            t0_estimate = Some(*t);
        } else {
            break;
        }
    }
    let verdict = if n_failed > 0 {
        Verdict::Inconclusive
    } else if sup_final.is_some_and(|s| s <= -cfg.min_b) {
        Verdict::CriterionMet
    } else {
        Verdict::CriterionFailed
    };
    let b_estimate = match (verdict, sup_final) {
        (Verdict::CriterionMet, Some(s)) => -s,
        _ => 0.0,
    };

    Ok(ScanReport {
        schema_version: SCHEMA_VERSION,
        model: m.label().to_string(),
        config: cfg.clone(),
        n_geodesics: cfg.n_geodesics,
        seed: cfg.seed,
        t_grid,
        sup_avg: sup,
        t_star,
        sup_final,
        B_estimate: b_estimate,
        t0_estimate,
        n_failed,
        verdict,
        samples,
    })
}

/// Lower bound on long-time curvature averages implied by the structural conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorReport {
    pub schema_version: u32,
    pub model: String,
    pub floor: f64,
    pub t_star: f64,
    pub eta: f64,
    pub period: f64,
    pub c1: f64,
    /// `(2/C₁) log 3`
    pub a_const: f64,
    /// `η/(16T)`
    pub term_short: f64,
    /// `η/(8T + 2A)`
    pub term_long: f64,
}

/// `(floor, t_star)` from `η`, the period `T` and the lower slope bound `C₁`.
pub fn floor_from(eta: f64, period: f64, c1: f64) -> (f64, f64) {
    let a = 2.0 / c1 * 3f64.ln();
    let floor = (eta / (16.0 * period)).max(eta / (8.0 * period + 2.0 * a));
    let t_star = 4.0 * period + (a + 4.0 * period).max(2.0 * a);
    (floor, t_star)
}

pub fn theoretical_floor(m: &SurfaceModel) -> Result<FloorReport, DiagnosticsError> {
    let report = validate_conditions(m, default_grid_step(m), &ValidationConfig::default())?;
    if !report.all_ok() {
        return Err(DiagnosticsError::ConditionsNotMet(format!(
            "`{}`: (A) {}, (B) {}, (C) {}",
            m.label(),
            report.condA_ok,
            report.condB_ok,
            report.condC_ok
        )));
    }
    let (Some(eta), Some(period)) = (report.eta, report.period) else {
        return Err(DiagnosticsError::ConditionsNotMet(format!("`{}` has no period", m.label())));
    };
    if !(eta < 0.0) {
        return Err(DiagnosticsError::ConditionsNotMet(format!("η = {eta} is not negative")));
    }
    let c1 = report.declared_C1.unwrap_or(report.measured_C1);
    let (floor, t_star) = floor_from(eta, period, c1);
    let a = 2.0 / c1 * 3f64.ln();
    Ok(FloorReport {
        schema_version: SCHEMA_VERSION,
        model: m.label().to_string(),
        floor,
        t_star,
        eta,
        period,
        c1,
        a_const: a,
        term_short: eta / (16.0 * period),
        term_long: eta / (8.0 * period + 2.0 * a),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct AngleDiagnostic {
    /// Smallest angle between the stable and unstable directions, radians.
    pub delta: f64,
    /// `(1 − cos δ)/(1 + cos δ)`
    pub D_bound: f64,
    pub min_norm_sq: f64,
    pub D_check: bool,
}

/// Angle between `(1, u)` and `(1, v)`.
pub fn bundle_angle(u: f64, v: f64) -> f64 {
    let cos = (1.0 + u * v) / ((1.0 + u * u).sqrt() * (1.0 + v * v).sqrt());
    cos.clamp(-1.0, 1.0).acos()
}

pub fn angle_diagnostic(bundles: &[BundleEstimate]) -> Result<AngleDiagnostic, DiagnosticsError> {
    if bundles.is_empty() {
        return Err(DiagnosticsError::InvalidArgument("no bundle estimates".into()));
    }
    let mut delta = FRAC_PI_2 * 2.0;
    let mut min_norm_sq = f64::INFINITY;
    for (index, b) in bundles.iter().enumerate() {
        if !b.converged {
            return Err(DiagnosticsError::Unconverged { index });
        }
        let (us, uu) = b.scalars().ok_or(DiagnosticsError::NotScalar)?;
        delta = delta.min(bundle_angle(us, uu));
        min_norm_sq = min_norm_sq.min(us * us + uu * uu);
    }
    let cos = delta.cos();
    let d_bound = (1.0 - cos) / (1.0 + cos);
    Ok(AngleDiagnostic { delta, D_bound: d_bound, min_norm_sq, D_check: min_norm_sq >= d_bound - 1e-9 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionFit {
    pub c: f64,
    pub lambda: f64,
    /// Sampled time used as the contraction step.
    pub r: f64,
    pub b: f64,
    pub f_max: f64,
    pub envelope_holds: bool,
}

/// Exponential envelope `f(t) ≤ C λᵗ` for a submultiplicative sample `(t, f(t))`.
pub fn contraction_fit(samples: &[(f64, f64)]) -> Result<ContractionFit, DiagnosticsError> {
    if samples.iter().any(|(t, f)| !t.is_finite() || !f.is_finite() || *t < 0.0 || *f < 0.0) {
        return Err(DiagnosticsError::InvalidArgument("samples must be finite, t ≥ 0, f ≥ 0".into()));
    }
    let (r, b) = samples
        .iter()
        .filter(|(t, f)| *t > 0.0 && *f < 1.0)
        .min_by(|p, q| p.0.total_cmp(&q.0))
        .copied()
        .ok_or(DiagnosticsError::NotContracting)?;
    let f_max = samples.iter().map(|p| p.1).fold(0.0, f64::max);
    let c = f_max / b;
    let lambda = b.powf(1.0 / r);
    let envelope_holds = samples.iter().all(|(t, f)| *f <= c * lambda.powf(*t) * (1.0 + 1e-12));
    Ok(ContractionFit { c, lambda, r, b, f_max, envelope_holds })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct HyperbolicityStats {
    pub min_angle_delta: f64,
    pub D_check: bool,
    pub lambda_s: f64,
    pub lambda_u: f64,
    pub C_s: f64,
    pub C_u: f64,
}

/// `(t, sup_θ |Y(t)|)` for the contracting Green solutions through `thetas`.
pub fn contraction_samples(
    m: &SurfaceModel,
    thetas: &[GeodesicState],
    horizon: f64,
    dt: f64,
    backward: bool,
    cfg: &LinearizationConfig,
) -> Result<Vec<(f64, f64)>, DiagnosticsError> {
    let times = uniform_grid(0.0, horizon, dt);
    let norms: Vec<Vec<f64>> = thetas
        .par_iter()
        .map(|theta| {
            let frames = contracting_frame(&CurvatureSource::geodesic(m, *theta), &times, backward, cfg)?;
            Ok(frames.iter().map(|f| f.log_norm().exp()).collect())
        })
        .collect::<Result<_, LinearizationError>>()?;
    Ok(times
        .iter()
        .enumerate()
        .map(|(i, t)| (*t, norms.iter().map(|n| n[i]).fold(0.0, f64::max)))
        .collect())
}

/// Angle bound and contraction statistics over a set of base points.
pub fn hyperbolicity_stats(
    m: &SurfaceModel,
    thetas: &[GeodesicState],
    horizon: f64,
    cfg: &LinearizationConfig,
) -> Result<HyperbolicityStats, DiagnosticsError> {
    let bundles: Vec<BundleEstimate> = thetas
        .par_iter()
        .map(|t| linearization::green_bundle(m, t, cfg))
        .collect::<Result<_, _>>()?;
    let angle = angle_diagnostic(&bundles)?;
    let stable = contraction_fit(&contraction_samples(m, thetas, horizon, 1.0, false, cfg)?)?;
    let unstable = contraction_fit(&contraction_samples(m, thetas, horizon, 1.0, true, cfg)?)?;
    Ok(HyperbolicityStats {
        min_angle_delta: angle.delta,
        D_check: angle.D_check,
        lambda_s: stable.lambda,
        lambda_u: unstable.lambda,
        C_s: stable.c,
        C_u: unstable.c,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlatnessConfig {
    /// Half-width of the truncation window around the origin.
    pub window: f64,
    pub grid_step: f64,
    pub tol: f64,
}

impl Default for FlatnessConfig {
    fn default() -> Self {
        Self { window: 1e3, grid_step: 0.01, tol: 1e-4 }
    }
}

/// Windowed estimate of `sup { |K(x)| : |x − x₀| ≥ r }`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessReport {
    pub radii: Vec<f64>,
    /// Infinite where `K` overflows inside the window.
    pub sup_k: Vec<f64>,
    pub window: (f64, f64),
    pub tol: f64,
    pub asymptotically_flat: bool,
}

pub fn asymptotic_flatness(
    m: &SurfaceModel,
    x_origin: f64,
    radii: &[f64],
    cfg: &FlatnessConfig,
) -> Result<FlatnessReport, DiagnosticsError> {
    if radii.is_empty() || radii[0] <= 0.0 || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(DiagnosticsError::InvalidArgument("radii must be positive and increasing".into()));
    }
    if !(cfg.grid_step > 0.0 && cfg.window > 0.0) {
        return Err(DiagnosticsError::InvalidArgument("window and grid_step must be positive".into()));
    }
    let n = (cfg.window / cfg.grid_step).ceil() as usize;
    // |K| at distance d on either side; suffix maxima over distance.
    let mut by_dist: Vec<f64> = (0..=n)
        .map(|i| {
            let d = i as f64 * cfg.grid_step;
            let a = m.curvature_unchecked(x_origin + d).abs();
            let b = m.curvature_unchecked(x_origin - d).abs();
            let v = a.max(b);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        })
        .collect();
    for i in (0..n).rev() {
        by_dist[i] = by_dist[i].max(by_dist[i + 1]);
    }
    let sup_k: Vec<f64> = radii
        .iter()
        .map(|r| {
            let i = (r / cfg.grid_step).ceil() as usize;
            by_dist.get(i).copied().unwrap_or(0.0)
        })
        .collect();
    let asymptotically_flat = sup_k.last().is_some_and(|s| *s < cfg.tol);
    Ok(FlatnessReport {
        radii: radii.to_vec(),
        sup_k,
        window: (x_origin - cfg.window, x_origin + cfg.window),
        tol: cfg.tol,
        asymptotically_flat,
    })
}
