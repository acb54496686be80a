//! Warped-product surfaces `ℝ ×_f 𝕊¹` with metric `dx² + f(x)² dy²`.
//!
//! A model is described either directly by `f, f', f''` or, when the warping
//! function is naturally an exponential `f = e^g`, by `g, g', g''`. The second
//! form keeps every geodesic and curvature computation in log space, which is
//! what makes long horizons on exponentially growing warpings (where `f`
//! itself overflows after a few hundred length units) tractable.
//!
//! Gaussian curvature is `K = -f''/f = -(g'' + g'²)`.

use std::f64::consts::{SQRT_2, TAU};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurfaceError {
    #[error("non-finite evaluation at x = {x}")]
    NonFinite { x: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown model `{0}` (expected flat, hyperbolic, exp_family:a=<a>, example2 or catenoid)")]
    UnknownModel(String),
    #[error("invalid validation grid: {0}")]
    InvalidGrid(String),
    #[error("structural conditions not satisfied: {0}")]
    ConditionsNotMet(String),
}

type Jet = Arc<dyn Fn(f64) -> [f64; 3] + Send + Sync>;

#[derive(Clone)]
enum Profile {
    /// `(f, f', f'')`
    Direct(Jet),
    /// `(g, g', g'')` with `f = e^g`
    Exponential(Jet),
}

/// An immutable warped-product surface. Cloning is cheap.
#[derive(Clone)]
pub struct SurfaceModel {
    profile: Profile,
    label: String,
    period: Option<f64>,
    slope_bounds: Option<(f64, f64)>,
    curvature_bound: Option<f64>,
    sample_window: Option<(f64, f64)>,
}

impl fmt::Debug for SurfaceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SurfaceModel")
            .field("label", &self.label)
            .field("period", &self.period)
            .field("slope_bounds", &self.slope_bounds)
            .field("curvature_bound", &self.curvature_bound)
            .field("sample_window", &self.sample_window)
            .finish()
    }
}

impl SurfaceModel {
    /// Model from the warping function and its first two derivatives.
    pub fn from_warping<F>(label: impl Into<String>, jet: F) -> Self
    where
        F: Fn(f64) -> [f64; 3] + Send + Sync + 'static,
    {
        Self::with_profile(label, Profile::Direct(Arc::new(jet)))
    }

    /// Model `f = e^g` from `g` and its first two derivatives.
    pub fn from_log_warping<F>(label: impl Into<String>, jet: F) -> Self
    where
        F: Fn(f64) -> [f64; 3] + Send + Sync + 'static,
    {
        Self::with_profile(label, Profile::Exponential(Arc::new(jet)))
    }

    fn with_profile(label: impl Into<String>, profile: Profile) -> Self {
        Self {
            profile,
            label: label.into(),
            period: None,
            slope_bounds: None,
            curvature_bound: None,
            sample_window: None,
        }
    }

    pub fn with_period(mut self, period: f64) -> Self {
        self.period = Some(period);
        self
    }

    /// Declares `(C₁, C₂)` with `C₁/2 < g' < C₂/2`.
    pub fn with_slope_bounds(mut self, c1: f64, c2: f64) -> Self {
        self.slope_bounds = Some((c1, c2));
        self
    }

    /// Declares `c` with `sup |K| ≤ c²`.
    pub fn with_curvature_bound(mut self, c: f64) -> Self {
        self.curvature_bound = Some(c);
        self
    }

    /// Window of `x` used for initial-condition sampling on models without a period.
    pub fn with_sample_window(mut self, lo: f64, hi: f64) -> Self {
        self.sample_window = Some((lo, hi));
        self
    }

    /// Computes and attaches `c = 1.01·√(max |K|)` from a grid over one period
    /// (or the sample window). Leaves the bound unset when `K ≡ 0`.
    pub fn with_computed_curvature_bound(mut self) -> Self {
        let (lo, hi) = self.sampling_window();
        let n = 20_000;
        let max_k = (0..=n)
            .map(|i| self.curvature_unchecked(lo + (hi - lo) * i as f64 / n as f64).abs())
            .fold(0.0, f64::max);
        self.curvature_bound = (max_k > 0.0 && max_k.is_finite()).then(|| 1.01 * max_k.sqrt());
        self
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn period(&self) -> Option<f64> {
        self.period
    }

    pub fn slope_bounds(&self) -> Option<(f64, f64)> {
        self.slope_bounds
    }

    pub fn curvature_bound(&self) -> Option<f64> {
        self.curvature_bound
    }

    /// `[0, T)` for periodic models, else the declared window, else `[-10, 10]`.
    pub fn sampling_window(&self) -> (f64, f64) {
        match (self.sample_window, self.period) {
            (Some(w), _) => w,
            (None, Some(t)) => (0.0, t),
            (None, None) => (-10.0, 10.0),
        }
    }

    pub fn f(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => j(x)[0],
            Profile::Exponential(j) => j(x)[0].exp(),
        }
    }

    pub fn df(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => j(x)[1],
            Profile::Exponential(j) => {
                let [g, dg, _] = j(x);
                dg * g.exp()
            }
        }
    }

    pub fn d2f(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => j(x)[2],
            Profile::Exponential(j) => {
                let [g, dg, d2g] = j(x);
                (d2g + dg * dg) * g.exp()
            }
        }
    }

    /// `g = log f`.
    pub fn log_f(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => j(x)[0].ln(),
            Profile::Exponential(j) => j(x)[0],
        }
    }

    /// `g' = f'/f`.
    pub fn log_slope(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => {
                let [f, df, _] = j(x);
                df / f
            }
            Profile::Exponential(j) => j(x)[1],
        }
    }

    /// `(g, g', K)` in one evaluation.
    pub(crate) fn log_jet(&self, x: f64) -> (f64, f64, f64) {
        match &self.profile {
            Profile::Direct(j) => {
                let [f, df, d2f] = j(x);
                (f.ln(), df / f, -d2f / f)
            }
            Profile::Exponential(j) => {
                let [g, dg, d2g] = j(x);
                (g, dg, -(d2g + dg * dg))
            }
        }
    }

    /// `K(x)` without the finiteness check.
    pub fn curvature_unchecked(&self, x: f64) -> f64 {
        match &self.profile {
            Profile::Direct(j) => {
                let [f, _, d2f] = j(x);
                -d2f / f
            }
            Profile::Exponential(j) => {
                let [_, dg, d2g] = j(x);
                -(d2g + dg * dg)
            }
        }
    }

    /// Checks the invariant `f(x) > 0` on the given points.
    pub fn check_positive(&self, xs: impl IntoIterator<Item = f64>) -> Result<(), SurfaceError> {
        for x in xs {
            let v = self.log_f(x);
            if v.is_nan() || v == f64::NEG_INFINITY {
                return Err(SurfaceError::NonFinite { x });
            }
        }
        Ok(())
    }
}

/// Gaussian curvature `K(x) = -f''(x)/f(x)`.
pub fn curvature(m: &SurfaceModel, x: f64) -> Result<f64, SurfaceError> {
    if !x.is_finite() {
        return Err(SurfaceError::NonFinite { x });
    }
    let k = m.curvature_unchecked(x);
    if k.is_finite() {
        Ok(k)
    } else {
        Err(SurfaceError::NonFinite { x })
    }
}

/// Threshold on `a` above which `g_a'' + g_a'² > 0` everywhere.
pub const EXP_FAMILY_MIN_A: f64 = 2.0 * SQRT_2;

/// `f = e^{g_a}` with `g_a(x) = a x − cos x + sin x`, requires `a > 2√2`.
pub fn make_exp_family(a: f64) -> Result<SurfaceModel, SurfaceError> {
    if !a.is_finite() || a <= SQRT_2 {
        return Err(SurfaceError::InvalidParameter(format!(
            "a = {a}: g' = a + sin x + cos x reaches a - √2 ≤ 0, no positive slope bounds exist"
        )));
    }
    if a <= EXP_FAMILY_MIN_A {
        return Err(SurfaceError::InvalidParameter(format!(
            "a = {a}: nonpositive curvature is only guaranteed for a > 2√2"
        )));
    }
    let model = SurfaceModel::from_log_warping(format!("exp_family:a={a}"), move |x| {
        let (s, c) = x.sin_cos();
        [a * x - c + s, a + s + c, c - s]
    })
    .with_period(TAU)
    .with_slope_bounds(2.0 * (a - SQRT_2), 2.0 * (a + SQRT_2))
    .with_computed_curvature_bound();
    Ok(model)
}

/// `g_a'' + g_a'²` in closed form.
pub fn exp_family_h(a: f64, x: f64) -> f64 {
    let (s, c) = x.sin_cos();
    1.0 + a * a + 2.0 * a * (s + c) + 2.0 * s * c + c - s
}

/// `f = e^{e^{-x}}`: negative curvature decaying to zero as `x → +∞`.
pub fn make_example2() -> SurfaceModel {
    SurfaceModel::from_log_warping("example2", |x| {
        let e = (-x).exp();
        [e, -e, e]
    })
    .with_sample_window(0.0, 20.0)
}

pub fn make_flat() -> SurfaceModel {
    SurfaceModel::from_log_warping("flat", |_| [0.0, 0.0, 0.0]).with_period(TAU)
}

/// `f = e^x`, constant curvature `-1`.
pub fn make_hyperbolic() -> SurfaceModel {
    SurfaceModel::from_log_warping("hyperbolic", |x| [x, 1.0, 0.0])
        .with_period(TAU)
        .with_slope_bounds(1.0, 3.0)
        .with_curvature_bound(1.0)
}

/// `f = √(1+x²)`, `K = -1/(1+x²)²`.
pub fn make_catenoid_like() -> SurfaceModel {
    SurfaceModel::from_warping("catenoid", |x| {
        let q = 1.0 + x * x;
        let r = q.sqrt();
        [r, x / r, 1.0 / (q * r)]
    })
    .with_sample_window(-10.0, 10.0)
    .with_computed_curvature_bound()
}

/// `f = e^{a x}` with slope bounds `(2a − ε, 2a + ε)`; `K ≡ -a²`.
pub fn make_linear_exp(a: f64, eps: f64) -> SurfaceModel {
    SurfaceModel::from_log_warping(format!("linear_exp:a={a}"), move |x| [a * x, a, 0.0])
        .with_period(TAU)
        .with_slope_bounds(2.0 * a - eps, 2.0 * a + eps)
        .with_curvature_bound(a.abs())
}

/// Preset selector, written `name[:key=value,...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    Flat,
    Hyperbolic,
    ExpFamily { a: f64 },
    Example2,
    Catenoid,
}

impl ModelSpec {
    pub fn build(&self) -> Result<SurfaceModel, SurfaceError> {
        Ok(match self {
            Self::Flat => make_flat(),
            Self::Hyperbolic => make_hyperbolic(),
            Self::ExpFamily { a } => make_exp_family(*a)?,
            Self::Example2 => make_example2(),
            Self::Catenoid => make_catenoid_like(),
        })
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Flat => f.write_str("flat"),
            Self::Hyperbolic => f.write_str("hyperbolic"),
            Self::ExpFamily { a } => write!(f, "exp_family:a={a}"),
            Self::Example2 => f.write_str("example2"),
            Self::Catenoid => f.write_str("catenoid"),
        }
    }
}

impl FromStr for ModelSpec {
    type Err = SurfaceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (name, params) = match s.split_once(':') {
            Some((n, p)) => (n, Some(p)),
            None => (s, None),
        };
        let mut a = None;
        for kv in params.into_iter().flat_map(|p| p.split(',')).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| SurfaceError::InvalidParameter(format!("expected key=value, got `{kv}`")))?;
            match (name, k.trim()) {
                ("exp_family", "a") => {
                    let parsed = v.trim().parse::<f64>().map_err(|_| {
                        SurfaceError::InvalidParameter(format!("a: `{v}` is not a number"))
                    })?;
                    a = Some(parsed);
                }
                _ => {
                    return Err(SurfaceError::InvalidParameter(format!(
                        "unexpected parameter `{k}` for model `{name}`"
                    )))
                }
            }
        }
        match name {
            "flat" => Ok(Self::Flat),
            "hyperbolic" => Ok(Self::Hyperbolic),
            "example2" => Ok(Self::Example2),
            "catenoid" | "catenoid_like" => Ok(Self::Catenoid),
            "exp_family" => a
                .map(|a| Self::ExpFamily { a })
                .ok_or_else(|| SurfaceError::InvalidParameter("exp_family requires a=<value>".into())),
            _ => Err(SurfaceError::UnknownModel(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub tol: f64,
    /// Window used for models without a declared period.
    pub aperiodic_window: (f64, f64),
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { tol: 1e-9, aperiodic_window: (-10.0, 10.0) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct ConditionReport {
    pub label: String,
    /// `g'' + g'² ≥ 0`
    pub condA_ok: bool,
    /// `K` periodic with the declared period.
    pub condB_ok: bool,
    pub condB_checkable: bool,
    /// `C₁/2 < g' < C₂/2` with `C₁ > 0`.
    pub condC_ok: bool,
    pub measured_C1: f64,
    pub measured_C2: f64,
    /// `∫₀ᵀ K`, present when the period is declared and `K` is periodic.
    pub eta: Option<f64>,
    pub period: Option<f64>,
    pub declared_C1: Option<f64>,
    pub declared_C2: Option<f64>,
    pub grid_resolution: f64,
}

impl ConditionReport {
    pub fn all_ok(&self) -> bool {
        self.condA_ok && self.condB_ok && self.condC_ok
    }
}

/// Grid of `[lo, hi]` with an even number of intervals no wider than `step`.
fn simpson_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let mut n = ((hi - lo) / step).ceil().max(2.0) as usize;
    if n % 2 == 1 {
        n += 1;
    }
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn simpson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() - 1;
    let h = (xs[n] - xs[0]) / n as f64;
    let mut acc = ys[0] + ys[n];
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * ys[i];
    }
    acc * h / 3.0
}

/// Grid check of the structural conditions (A)–(C) and `η = ∫₀ᵀ K`.
pub fn validate_conditions(
    m: &SurfaceModel,
    grid_step: f64,
    cfg: &ValidationConfig,
) -> Result<ConditionReport, SurfaceError> {
    if !(grid_step > 0.0) || !grid_step.is_finite() {
        return Err(SurfaceError::InvalidGrid(format!("grid_step must be positive, got {grid_step}")));
    }
    let (lo, hi) = match m.period() {
        Some(t) => (0.0, t),
        None => m.sample_window.unwrap_or(cfg.aperiodic_window),
    };
    if (hi - lo) / grid_step > 5e7 {
        return Err(SurfaceError::InvalidGrid(format!("grid_step {grid_step} too fine for [{lo}, {hi}]")));
    }
    let xs = simpson_grid(lo, hi, grid_step);
    let mut ks = Vec::with_capacity(xs.len());
    let mut slopes = Vec::with_capacity(xs.len());
    for &x in &xs {
        let (_, dg, k) = m.log_jet(x);
        if !k.is_finite() || !dg.is_finite() {
            return Err(SurfaceError::NonFinite { x });
        }
        ks.push(k);
        slopes.push(dg);
    }
    let tol = cfg.tol;
    let cond_a = ks.iter().all(|&k| -k >= -tol);

    let (cond_b, checkable) = match m.period() {
        Some(t) => {
            let periodic = xs.iter().zip(&ks).all(|(&x, &k)| {
                let shifted = m.curvature_unchecked(x + t);
                (shifted - k).abs() < tol * (1.0 + k.abs())
            });
            (periodic, true)
        }
        None => (false, false),
    };

    let min_slope = slopes.iter().copied().fold(f64::INFINITY, f64::min);
    let max_slope = slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cond_c = match m.slope_bounds() {
        Some((c1, c2)) => c1 > 0.0 && c1 < c2 && min_slope >= c1 / 2.0 - tol && max_slope <= c2 / 2.0 + tol,
        None => false,
    };
    let eta = cond_b.then(|| simpson(&xs, &ks));

    Ok(ConditionReport {
        label: m.label().to_string(),
        condA_ok: cond_a,
        condB_ok: cond_b,
        condB_checkable: checkable,
        condC_ok: cond_c,
        measured_C1: 2.0 * min_slope,
        measured_C2: 2.0 * max_slope,
        eta,
        period: m.period(),
        declared_C1: m.slope_bounds().map(|b| b.0),
        declared_C2: m.slope_bounds().map(|b| b.1),
        grid_resolution: (xs[1] - xs[0]).abs(),
    })
}

/// Default validation step: `10⁻³·T` for periodic models, `10⁻³` otherwise.
pub fn default_grid_step(m: &SurfaceModel) -> f64 {
    m.period().map_or(1e-3, |t| 1e-3 * t)
}
