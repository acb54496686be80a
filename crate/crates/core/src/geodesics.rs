//! Unit-speed geodesics of warped-product surfaces.
//!
//! Internally a unit tangent vector at `x` is carried as a rapidity
//! `β = atanh(x')` together with the sign `σ` of `y'`. In these coordinates
//! the geodesic equations read
//!
//! ```text
//! x' = tanh β,   β' = g'(x),   y' = σ sech β · e^{-g(x)}
//! ```
//!
//! which is `b'/(1-b²) = g'(x)` for `b = x'`. The unit-speed relation
//! `x'² + f²y'² = 1` holds identically (`tanh² + sech² = 1`), so velocity
//! renormalization reduces to keeping `(vx, f·vy)` on the unit circle by
//! construction, and `f(x)²y' = σ e^{g - log cosh β}` is the Clairaut integral.
//! Meridians (`|x'| = 1`) are the exact lines `x = x₀ ± t`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::write_csv_row;
use crate::ode::{self, IntegrationError, IntegratorConfig, OdeSystem};
use crate::surfaces::SurfaceModel;

/// Unit-speed phase point `(x, y, x', y')`. `y` is unwrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

impl GeodesicState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self { x, y, vx, vy }
    }

    /// Unit vector at `(x, y)` with `x' = b` and `y'` of the given sign.
    pub fn from_slope(m: &SurfaceModel, x: f64, y: f64, b: f64, vy_sign: f64) -> Self {
        let b = b.clamp(-1.0, 1.0);
        let w = (1.0 - b * b).max(0.0).sqrt();
        let vy = if w == 0.0 { 0.0 } else { vy_sign.signum() * (w.ln() - m.log_f(x)).exp() };
        Self { x, y, vx: b, vy }
    }

    /// Same point, opposite velocity.
    pub fn reversed(&self) -> Self {
        Self { x: self.x, y: self.y, vx: -self.vx, vy: -self.vy }
    }

    /// `y` reduced to `[0, 2π)`.
    pub fn y_mod_2pi(&self) -> f64 {
        self.y.rem_euclid(std::f64::consts::TAU)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeodesicError {
    #[error("initial state is not unit speed: |v|² = {speed_sq}")]
    NotUnitSpeed { speed_sq: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("integration failed: {0}")]
    Integration(#[from] IntegrationError),
}

/// `|b|` this close to 1 is treated as a meridian.
pub const MERIDIAN_SNAP: f64 = 1e-12;
const UNIT_SPEED_TOL: f64 = 1e-9;

/// `log cosh β` without overflow.
pub(crate) fn log_cosh(beta: f64) -> f64 {
    let a = beta.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Internal coordinates of a unit tangent vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phase {
    pub x: f64,
    pub y: f64,
    /// `atanh(x')`; unused on meridians.
    pub rapidity: f64,
    /// Sign of `y'`; zero on meridians.
    pub side: f64,
    /// `Some(±1)` for the exact line `x = x₀ ± t`.
    pub meridian: Option<f64>,
}

impl Phase {
    pub fn from_state(m: &SurfaceModel, s: &GeodesicState) -> Result<Self, GeodesicError> {
        if ![s.x, s.y, s.vx, s.vy].iter().all(|v| v.is_finite()) {
            return Err(GeodesicError::InvalidArgument("non-finite initial state".into()));
        }
        let w = normal_component(m, s.x, s.vy);
        let speed_sq = s.vx * s.vx + w * w;
        if (speed_sq - 1.0).abs() > UNIT_SPEED_TOL {
            return Err(GeodesicError::NotUnitSpeed { speed_sq });
        }
        Ok(Self::from_slope(s.x, s.y, s.vx, s.vy.signum()))
    }

    /// From `b = x'` and the sign of `y'`; `|b| ≥ 1 − 10⁻¹²` snaps to a meridian.
    pub fn from_slope(x: f64, y: f64, b: f64, side: f64) -> Self {
        if b.abs() >= 1.0 - MERIDIAN_SNAP {
            Self { x, y, rapidity: 0.0, side: 0.0, meridian: Some(b.signum()) }
        } else {
            let side = if side == 0.0 { 1.0 } else { side.signum() };
            Self { x, y, rapidity: b.atanh(), side, meridian: None }
        }
    }

    pub fn vx(&self) -> f64 {
        match self.meridian {
            Some(d) => d,
            None => self.rapidity.tanh(),
        }
    }

    /// `f·y'`, the velocity component along the circle in an orthonormal frame.
    pub fn normal_speed(&self) -> f64 {
        match self.meridian {
            Some(_) => 0.0,
            None => self.side * (-log_cosh(self.rapidity)).exp(),
        }
    }

    pub fn to_state(&self, m: &SurfaceModel) -> GeodesicState {
        let vy = match self.meridian {
            Some(_) => 0.0,
            None => self.side * (-log_cosh(self.rapidity) - m.log_f(self.x)).exp(),
        };
        GeodesicState { x: self.x, y: self.y, vx: self.vx(), vy }
    }

    /// Same point, opposite direction.
    pub fn reversed(&self) -> Self {
        Self {
            rapidity: -self.rapidity,
            side: -self.side,
            meridian: self.meridian.map(|d| -d),
            ..*self
        }
    }

    /// `f(x)²·y'`.
    pub fn clairaut(&self, m: &SurfaceModel) -> f64 {
        match self.meridian {
            Some(_) => 0.0,
            None => self.side * (m.log_f(self.x) - log_cosh(self.rapidity)).exp(),
        }
    }
}

/// `f(x)·vy` computed in log space.
pub fn normal_component(m: &SurfaceModel, x: f64, vy: f64) -> f64 {
    if vy == 0.0 {
        0.0
    } else {
        vy.signum() * (m.log_f(x) + vy.abs().ln()).exp()
    }
}

/// Unit-speed defect `vx² + f²vy² − 1`.
pub fn speed_defect(m: &SurfaceModel, s: &GeodesicState) -> f64 {
    let w = normal_component(m, s.x, s.vy);
    s.vx * s.vx + w * w - 1.0
}

/// Geodesic rates in `(x, β)`: returns `(x', β', K)`.
#[inline]
pub(crate) fn carrier_rates(m: &SurfaceModel, meridian: Option<f64>, x: f64, beta: f64) -> (f64, f64, f64) {
    let (_, dg, k) = m.log_jet(x);
    match meridian {
        Some(d) => (d, 0.0, k),
        None => (beta.tanh(), dg, k),
    }
}

/// State `[x, y, β, ∫K]`.
struct FullSystem<'a> {
    model: &'a SurfaceModel,
    side: f64,
    meridian: Option<f64>,
}

impl OdeSystem for FullSystem<'_> {
    fn dim(&self) -> usize {
        4
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let (g, dg, k) = self.model.log_jet(y[0]);
        match self.meridian {
            Some(d) => {
                dy[0] = d;
                dy[1] = 0.0;
                dy[2] = 0.0;
            }
            None => {
                dy[0] = y[2].tanh();
                dy[1] = self.side * (-g - log_cosh(y[2])).exp();
                dy[2] = dg;
            }
        }
        dy[3] = k;
    }
}

/// State `[x, β]`.
struct ReducedSystem<'a> {
    model: &'a SurfaceModel,
}

impl OdeSystem for ReducedSystem<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = y[1].tanh();
        dy[1] = self.model.log_slope(y[0]);
    }
}

/// Time-sampled orbit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub label: String,
    pub times: Vec<f64>,
    pub states: Vec<GeodesicState>,
    /// `K(x(tᵢ))`
    pub curvature_samples: Vec<f64>,
    /// `f(x₀)²·vy₀`
    pub clairaut0: f64,
    /// `f(x(tᵢ))²·vy(tᵢ)`
    pub clairaut: Vec<f64>,
    /// `f(x(tᵢ))·vy(tᵢ)`
    pub normal_speed: Vec<f64>,
    /// `∫₀^{tᵢ} K(x(s)) ds`, integrated alongside the orbit.
    pub curvature_integral: Vec<f64>,
    /// Internal rapidity `atanh(vx)`; zero on meridians.
    pub rapidity: Vec<f64>,
    pub meridian: Option<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn initial_state(&self) -> GeodesicState {
        self.states[0]
    }

    pub fn initial_phase(&self) -> Phase {
        let s = self.states[0];
        match self.meridian {
            Some(d) => Phase { x: s.x, y: s.y, rapidity: 0.0, side: 0.0, meridian: Some(d) },
            None => Phase {
                x: s.x,
                y: s.y,
                rapidity: self.rapidity[0],
                side: if self.normal_speed[0] < 0.0 { -1.0 } else { 1.0 },
                meridian: None,
            },
        }
    }

    /// Internal coordinates at sample `i`.
    pub fn phase_at(&self, i: usize) -> Phase {
        let s = self.states[i];
        let p0 = self.initial_phase();
        Phase { x: s.x, y: s.y, rapidity: self.rapidity[i], ..p0 }
    }

    /// `max |vx² + (f·vy)² − 1|` over samples.
    pub fn max_energy_drift(&self) -> f64 {
        self.states
            .iter()
            .zip(&self.normal_speed)
            .map(|(s, w)| (s.vx * s.vx + w * w - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `max |c(t) − c₀| / max(1, |c₀|)` over samples.
    pub fn max_clairaut_drift(&self) -> f64 {
        let scale = self.clairaut0.abs().max(1.0);
        self.clairaut
            .iter()
            .map(|c| (c - self.clairaut0).abs() / scale)
            .fold(0.0, f64::max)
    }

    /// Writes `t,x,y,vx,vy,K,clairaut`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,x,y,vx,vy,K,clairaut")?;
        for i in 0..self.len() {
            let s = &self.states[i];
            write_csv_row(
                &mut w,
                &[self.times[i], s.x, s.y, s.vx, s.vy, self.curvature_samples[i], self.clairaut[i]],
            )?;
        }
        Ok(())
    }
}

/// Christoffel symbols `(Γ¹₂₂, Γ²₁₂) = (−f f', f'/f)`; all others vanish.
pub fn christoffel(m: &SurfaceModel, x: f64) -> (f64, f64) {
    let g = m.log_f(x);
    let dg = m.log_slope(x);
    (-(2.0 * g).exp() * dg, dg)
}

/// Integrates the geodesic through `s0` on `[0, t_end]`, sampled every
/// `cfg.sample_dt`.
pub fn integrate(
    m: &SurfaceModel,
    s0: &GeodesicState,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, GeodesicError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(GeodesicError::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    let times = ode::uniform_grid(0.0, t_end, cfg.sample_dt);
    integrate_on_grid(m, s0, &times, cfg)
}

/// Integrates from `times[0] = 0` through the given monotone grid (forward or backward).
pub fn integrate_on_grid(
    m: &SurfaceModel,
    s0: &GeodesicState,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory, GeodesicError> {
    if times.first() != Some(&0.0) {
        return Err(GeodesicError::InvalidArgument("time grid must start at 0".into()));
    }
    let phase = Phase::from_state(m, s0)?;
    integrate_phase(m, &phase, times, cfg)
}

/// [`integrate_on_grid`] from internal coordinates; exact for states whose
/// slope has saturated to `±1` in floating point.
pub fn integrate_phase(
    m: &SurfaceModel,
    phase: &Phase,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory, GeodesicError> {
    let sys = FullSystem { model: m, side: phase.side, meridian: phase.meridian };
    let y0 = [phase.x, phase.y, phase.rapidity, 0.0];
    let raw = ode::solve_at(&sys, cfg, 0.0, &y0, times)?;

    let mut traj = Trajectory {
        label: m.label().to_string(),
        times: times.to_vec(),
        states: Vec::with_capacity(raw.len()),
        curvature_samples: Vec::with_capacity(raw.len()),
        clairaut0: phase.clairaut(m),
        clairaut: Vec::with_capacity(raw.len()),
        normal_speed: Vec::with_capacity(raw.len()),
        curvature_integral: Vec::with_capacity(raw.len()),
        rapidity: Vec::with_capacity(raw.len()),
        meridian: phase.meridian,
    };
    for v in raw {
        let p = Phase { x: v[0], y: v[1], rapidity: v[2], side: phase.side, meridian: phase.meridian };
        traj.states.push(p.to_state(m));
        traj.curvature_samples.push(m.curvature_unchecked(p.x));
        traj.clairaut.push(p.clairaut(m));
        traj.normal_speed.push(p.normal_speed());
        traj.curvature_integral.push(v[3]);
        traj.rapidity.push(v[2]);
    }
    Ok(traj)
}

/// Solution of `x' = b`, `b' = g'(x)(1 − b²)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedSolution {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    /// `atanh b`; infinite on the exact-line branch.
    pub rapidity: Vec<f64>,
}

/// Integrates the scalar reduction on a uniform grid of spacing `cfg.sample_dt`.
pub fn integrate_reduced(
    m: &SurfaceModel,
    x0: f64,
    b0: f64,
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<ReducedSolution, GeodesicError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(GeodesicError::InvalidArgument(format!("t_end must be positive, got {t_end}")));
    }
    let times = ode::uniform_grid(0.0, t_end, cfg.sample_dt);
    integrate_reduced_on_grid(m, x0, b0, &times, cfg)
}

pub fn integrate_reduced_on_grid(
    m: &SurfaceModel,
    x0: f64,
    b0: f64,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<ReducedSolution, GeodesicError> {
    if !(b0.abs() <= 1.0) {
        return Err(GeodesicError::InvalidArgument(format!("|b0| must be ≤ 1, got {b0}")));
    }
    if b0.abs() >= 1.0 - MERIDIAN_SNAP {
        let d = b0.signum();
        return Ok(ReducedSolution {
            times: times.to_vec(),
            x: times.iter().map(|t| x0 + d * t).collect(),
            b: vec![d; times.len()],
            rapidity: vec![d * f64::INFINITY; times.len()],
        });
    }
    let raw = ode::solve_at(&ReducedSystem { model: m }, cfg, 0.0, &[x0, b0.atanh()], times)?;
    Ok(ReducedSolution {
        times: times.to_vec(),
        x: raw.iter().map(|v| v[0]).collect(),
        b: raw.iter().map(|v| v[1].tanh()).collect(),
        rapidity: raw.iter().map(|v| v[1]).collect(),
    })
}

/// `1 − 2/(B₀ e^{C t} + 1)` with `B₀ = (1+b₀)/(1−b₀)`.
pub fn envelope_bound(b0: f64, c: f64, t: f64) -> f64 {
    let b_0 = (1.0 + b0) / (1.0 - b0);
    1.0 - 2.0 / (b_0 * (c * t).exp() + 1.0)
}

/// Outcome of the two-sided slope envelope check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCheck {
    pub holds: bool,
    /// Smallest margin over `t > 0`, measured in rapidity `atanh b`.
    pub min_margin: f64,
    pub times: Vec<f64>,
    pub b: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Per-time margin `min(β − β_lo, β_hi − β)`; zero at `t = 0`.
    pub margins: Vec<f64>,
}

/// Checks `1 − 2/(B₀e^{C₁t}+1) < b(t) < 1 − 2/(B₀e^{C₂t}+1)` at every `t > 0` of the grid.
///
/// The comparison is carried out on `atanh b`, where the bounds become the
/// lines `atanh b₀ + C t/2` and no precision is lost once `b` saturates at 1.
pub fn envelope_check(
    m: &SurfaceModel,
    x0: f64,
    b0: f64,
    t_grid: &[f64],
    cfg: &IntegratorConfig,
) -> Result<EnvelopeCheck, GeodesicError> {
    let (c1, c2) = m.slope_bounds().ok_or_else(|| {
        GeodesicError::NotApplicable(format!("model `{}` declares no slope bounds", m.label()))
    })?;
    if !(b0.abs() < 1.0) {
        return Err(GeodesicError::InvalidArgument(format!("|b0| must be < 1, got {b0}")));
    }
    if t_grid.is_empty() || t_grid.windows(2).any(|w| w[1] <= w[0]) || t_grid[0] < 0.0 {
        return Err(GeodesicError::InvalidArgument("t_grid must be increasing and non-negative".into()));
    }
    let mut times = t_grid.to_vec();
    let prepend = times[0] != 0.0;
    if prepend {
        times.insert(0, 0.0);
    }
    let sol = integrate_reduced_on_grid(m, x0, b0, &times, cfg)?;
    let beta0 = b0.atanh();
    let skip = usize::from(prepend);

    let mut out = EnvelopeCheck {
        holds: true,
        min_margin: f64::INFINITY,
        times: t_grid.to_vec(),
        b: Vec::with_capacity(t_grid.len()),
        lower: Vec::with_capacity(t_grid.len()),
        upper: Vec::with_capacity(t_grid.len()),
        margins: Vec::with_capacity(t_grid.len()),
    };
    for i in skip..times.len() {
        let t = times[i];
        let beta = sol.rapidity[i];
        out.b.push(sol.b[i]);
        out.lower.push(envelope_bound(b0, c1, t));
        out.upper.push(envelope_bound(b0, c2, t));
        if t <= 0.0 {
            out.margins.push(0.0);
            continue;
        }
        let margin = (beta - (beta0 + 0.5 * c1 * t)).min(beta0 + 0.5 * c2 * t - beta);
        out.margins.push(margin);
        out.min_margin = out.min_margin.min(margin);
        if !(margin > 0.0) {
            out.holds = false;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surfaces::{make_exp_family, make_flat, make_hyperbolic};
    use std::f64::consts::FRAC_1_SQRT_2;

    #[test]
    fn christoffel_values() {
        assert_eq!(christoffel(&make_flat(), 2.0), (0.0, 0.0));
        let (a, b) = christoffel(&make_hyperbolic(), 0.0);
        assert!((a + 1.0).abs() < 1e-15 && (b - 1.0).abs() < 1e-15);
        let m = make_exp_family(3.0).unwrap();
        let (a, b) = christoffel(&m, 0.0);
        assert!((a + 4.0 * (-2.0f64).exp()).abs() < 1e-14);
        assert!((b - 4.0).abs() < 1e-14);
    }

    #[test]
    fn flat_geodesics_are_straight() {
        let m = make_flat();
        let s0 = GeodesicState::new(0.0, 0.0, FRAC_1_SQRT_2, FRAC_1_SQRT_2);
        let traj = integrate(&m, &s0, 10.0, &IntegratorConfig::default()).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.x - t * FRAC_1_SQRT_2).abs() < 1e-12);
            assert!((s.y - t * FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn meridian_is_exact_line() {
        let m = make_exp_family(3.0).unwrap();
        let s0 = GeodesicState::new(0.4, 1.0, 1.0, 0.0);
        let traj = integrate(&m, &s0, 5.0, &IntegratorConfig::default()).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.x - 0.4 - t).abs() < 1e-12);
            assert_eq!(s.y, 1.0);
            assert_eq!(s.vx, 1.0);
        }
    }

    #[test]
    fn hyperbolic_turning_geodesic() {
        let m = make_hyperbolic();
        let s0 = GeodesicState::new(0.0, 0.0, 0.0, 1.0);
        let traj = integrate(&m, &s0, 8.0, &IntegratorConfig::default()).unwrap();
        for (t, s) in traj.times.iter().zip(&traj.states) {
            assert!((s.vx - t.tanh()).abs() < 1e-10, "t={t}");
        }
    }

    #[test]
    fn rejects_non_unit_speed() {
        let m = make_flat();
        let err = integrate(&m, &GeodesicState::new(0.0, 0.0, 0.5, 0.5), 1.0, &IntegratorConfig::default());
        assert!(matches!(err, Err(GeodesicError::NotUnitSpeed { .. })));
    }

    #[test]
    fn rejects_bad_horizon() {
        let m = make_flat();
        let s0 = GeodesicState::new(0.0, 0.0, 1.0, 0.0);
        assert!(integrate(&m, &s0, 0.0, &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn reduced_meridian_and_flat() {
        let m = make_flat();
        let cfg = IntegratorConfig::default();
        let sol = integrate_reduced(&m, 1.0, 1.0, 3.0, &cfg).unwrap();
        assert!(sol.b.iter().all(|&b| b == 1.0));
        assert!((sol.x.last().unwrap() - 4.0).abs() < 1e-15);
        let sol = integrate_reduced(&m, 0.0, 0.3, 3.0, &cfg).unwrap();
        for (t, (x, b)) in sol.times.iter().zip(sol.x.iter().zip(&sol.b)) {
            assert!((b - 0.3).abs() < 1e-15);
            assert!((x - 0.3 * t).abs() < 1e-12);
        }
        assert!(integrate_reduced(&m, 0.0, 1.5, 1.0, &cfg).is_err());
    }

    #[test]
    fn envelope_requires_slope_bounds() {
        let m = make_flat();
        let err = envelope_check(&m, 0.0, 0.0, &[1.0], &IntegratorConfig::default());
        assert!(matches!(err, Err(GeodesicError::NotApplicable(_))));
    }

    #[test]
    fn envelope_bound_at_zero_slope() {
        // b₀ = 0 gives B₀ = 1, so the bound is tanh(C t / 2).
        for t in [0.0, 0.5, 2.0] {
            assert!((envelope_bound(0.0, 3.0, t) - (1.5 * t).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_cosh_is_stable() {
        assert!((log_cosh(0.3) - 0.3f64.cosh().ln()).abs() < 1e-15);
        assert!((log_cosh(-2.0) - 2.0f64.cosh().ln()).abs() < 1e-14);
        assert!((log_cosh(1e4) - (1e4 - std::f64::consts::LN_2)).abs() < 1e-9);
    }
}
