//! Explicit Runge-Kutta integration with Dormand-Prince 5(4) coefficients,
//! adaptive step control and continuous (dense) output of order 4.
//!
//! The solver is deliberately small: it drives an [`OdeSystem`] from `t0`
//! towards `t_end` (either direction) and hands every accepted step to an
//! observer as a [`DenseStep`], which can be evaluated anywhere inside the
//! step. Sampling on a time grid, event location and early termination are
//! all built on top of that observer.

use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Right-hand side of a first-order system `y' = F(t, y)`.
pub trait OdeSystem {
    fn dim(&self) -> usize;

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]);

    /// Hook applied to the state after every accepted step (constraint
    /// projection, rescaling). Returns `true` when `y` was modified.
    fn project(&self, _t: f64, _y: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; `0.0` selects one automatically.
    pub h_init: f64,
    /// Largest allowed step magnitude.
    pub h_max: f64,
    /// Smallest step magnitude before the integration is abandoned.
    pub h_min: f64,
    pub max_steps: usize,
    /// Allowed drift of conserved quantities per unit time.
    pub drift_tol: f64,
    /// Output spacing used by trajectory sampling.
    pub sample_dt: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-10,
            h_init: 0.0,
            h_max: 1.0,
            h_min: 1e-13,
            max_steps: 50_000_000,
            drift_tol: 1e-8,
            sample_dt: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrationError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64 },
    #[error("maximum number of steps exceeded at t = {t}")]
    MaxSteps { t: f64 },
    #[error("invalid time span: {0}")]
    InvalidSpan(String),
}

impl IntegrationError {
    /// Last time at which the solution was known to be valid.
    pub fn last_valid_time(&self) -> Option<f64> {
        match self {
            Self::StepUnderflow { t, .. } | Self::NonFinite { t } | Self::MaxSteps { t } => Some(*t),
            Self::InvalidSpan(_) => None,
        }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// One accepted step with its continuous extension.
pub struct DenseStep<'a> {
    t0: f64,
    t1: f64,
    n: usize,
    rcont: &'a [f64],
    y1: &'a [f64],
}

impl DenseStep<'_> {
    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn t1(&self) -> f64 {
        self.t1
    }

    /// State at the end of the step.
    pub fn end(&self) -> &[f64] {
        self.y1
    }

    /// Whether `t` lies in the closed interval spanned by the step.
    pub fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.t0 <= self.t1 { (self.t0, self.t1) } else { (self.t1, self.t0) };
        t >= lo && t <= hi
    }

    pub fn eval(&self, t: f64, out: &mut [f64]) {
        if t == self.t1 {
            out.copy_from_slice(self.y1);
            return;
        }
        let theta = (t - self.t0) / (self.t1 - self.t0);
        let theta1 = 1.0 - theta;
        let n = self.n;
        for i in 0..n {
            let r = |k: usize| self.rcont[k * n + i];
            out[i] = r(0) + theta * (r(1) + theta1 * (r(2) + theta * (r(3) + theta1 * r(4))));
        }
    }

    /// Single component of the interpolant.
    pub fn eval_component(&self, t: f64, i: usize) -> f64 {
        if t == self.t1 {
            return self.y1[i];
        }
        let theta = (t - self.t0) / (self.t1 - self.t0);
        let theta1 = 1.0 - theta;
        let n = self.n;
        let r = |k: usize| self.rcont[k * n + i];
        r(0) + theta * (r(1) + theta1 * (r(2) + theta * (r(3) + theta1 * r(4))))
    }
}

fn error_norm(y0: &[f64], y1: &[f64], err: &[f64], cfg: &IntegratorConfig) -> f64 {
    let n = y0.len();
    let mut acc = 0.0;
    for i in 0..n {
        let sc = cfg.atol + cfg.rtol * y0[i].abs().max(y1[i].abs());
        let e = err[i] / sc;
        acc += e * e;
    }
    (acc / n as f64).sqrt()
}

fn initial_step<S: OdeSystem>(
    sys: &S,
    t0: f64,
    y0: &[f64],
    f0: &[f64],
    dir: f64,
    cfg: &IntegratorConfig,
) -> f64 {
    let n = y0.len();
    let scale = |i: usize| cfg.atol + cfg.rtol * y0[i].abs();
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for i in 0..n {
        d0 += (y0[i] / scale(i)).powi(2);
        d1 += (f0[i] / scale(i)).powi(2);
    }
    d0 = (d0 / n as f64).sqrt();
    d1 = (d1 / n as f64).sqrt();
    let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h0 = h0.min(cfg.h_max);
    let y1: Vec<f64> = (0..n).map(|i| y0[i] + dir * h0 * f0[i]).collect();
    let mut f1 = vec![0.0; n];
    sys.rhs(t0 + dir * h0, &y1, &mut f1);
    let mut d2 = 0.0;
    for i in 0..n {
        d2 += ((f1[i] - f0[i]) / scale(i)).powi(2);
    }
    d2 = (d2 / n as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(0.2)
    };
    (100.0 * h0).min(h1).min(cfg.h_max)
}

/// Integrates `sys` from `(t0, y0)` to `t_end`, calling `on_step` after every
/// accepted step. The observer may stop the integration early by returning
/// `ControlFlow::Break`. Returns the final time and state.
pub fn solve<S, F>(
    sys: &S,
    cfg: &IntegratorConfig,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    on_step: F,
) -> Result<(f64, Vec<f64>), IntegrationError>
where
    S: OdeSystem,
    F: FnMut(&DenseStep<'_>) -> ControlFlow<()>,
{
    solve_with_stops(sys, cfg, t0, y0, t_end, &[], on_step)
}

/// Like [`solve`], but steps land exactly on every time in `stops` (monotone
/// in the integration direction), so those states carry full step accuracy
/// rather than interpolation accuracy.
pub fn solve_with_stops<S, F>(
    sys: &S,
    cfg: &IntegratorConfig,
    t0: f64,
    y0: &[f64],
    t_end: f64,
    stops: &[f64],
    mut on_step: F,
) -> Result<(f64, Vec<f64>), IntegrationError>
where
    S: OdeSystem,
    F: FnMut(&DenseStep<'_>) -> ControlFlow<()>,
{
    let n = sys.dim();
    if y0.len() != n {
        return Err(IntegrationError::InvalidSpan(format!(
            "state length {} does not match system dimension {n}",
            y0.len()
        )));
    }
    if !t0.is_finite() || !t_end.is_finite() {
        return Err(IntegrationError::InvalidSpan("non-finite time bound".into()));
    }
    let mut y = y0.to_vec();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(IntegrationError::NonFinite { t: t0 });
    }
    if t_end == t0 {
        return Ok((t0, y));
    }
    let dir = (t_end - t0).signum();

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut k5 = vec![0.0; n];
    let mut k6 = vec![0.0; n];
    let mut k7 = vec![0.0; n];
    let mut ytmp = vec![0.0; n];
    let mut ynew = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut rcont = vec![0.0; 5 * n];

    let mut t = t0;
    sys.rhs(t, &y, &mut k1);
    let mut h = if cfg.h_init > 0.0 {
        cfg.h_init.min(cfg.h_max)
    } else {
        initial_step(sys, t, &y, &k1, dir, cfg)
    };
    let mut steps = 0usize;
    let mut last_rejected = false;
    let mut next_stop = 0usize;

    loop {
        let remaining = (t_end - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if steps >= cfg.max_steps {
            return Err(IntegrationError::MaxSteps { t });
        }
        while next_stop < stops.len() && (stops[next_stop] - t) * dir <= 0.0 {
            next_stop += 1;
        }
        // Land exactly on the next stop (or t_end) instead of leaving a sliver.
        let target = stops.get(next_stop).copied().unwrap_or(t_end);
        let to_target = ((target - t) * dir).min(remaining);
        let last = h >= to_target * (1.0 - 1e-12);
        let mut unclipped = None;
        if last {
            if to_target < h {
                unclipped = Some(h);
            }
            h = to_target;
        }
        if h < cfg.h_min && !last {
            return Err(IntegrationError::StepUnderflow { t, h });
        }
        let hs = dir * h;

        for i in 0..n {
            ytmp[i] = y[i] + hs * A21 * k1[i];
        }
        sys.rhs(t + C2 * hs, &ytmp, &mut k2);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A31 * k1[i] + A32 * k2[i]);
        }
        sys.rhs(t + C3 * hs, &ytmp, &mut k3);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        sys.rhs(t + C4 * hs, &ytmp, &mut k4);
        for i in 0..n {
            ytmp[i] = y[i] + hs * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        sys.rhs(t + C5 * hs, &ytmp, &mut k5);
        for i in 0..n {
            ytmp[i] = y[i]
                + hs * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        let t_new = if !last {
            t + hs
        } else if to_target == remaining {
            t_end
        } else {
            target
        };
        sys.rhs(t + hs, &ytmp, &mut k6);
        for i in 0..n {
            ynew[i] = y[i]
                + hs * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        sys.rhs(t_new, &ynew, &mut k7);
        steps += 1;

        for i in 0..n {
            err[i] = hs
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let en = error_norm(&y, &ynew, &err, cfg);
        let finite = en.is_finite() && ynew.iter().all(|v| v.is_finite());

        if finite && en <= 1.0 {
            for i in 0..n {
                let ydiff = ynew[i] - y[i];
                let bspl = hs * k1[i] - ydiff;
                rcont[i] = y[i];
                rcont[n + i] = ydiff;
                rcont[2 * n + i] = bspl;
                rcont[3 * n + i] = ydiff - hs * k7[i] - bspl;
                rcont[4 * n + i] = hs
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i]
                        + D7 * k7[i]);
            }
            let step = DenseStep { t0: t, t1: t_new, n, rcont: &rcont, y1: &ynew };
            let flow = on_step(&step);
            t = t_new;
            std::mem::swap(&mut y, &mut ynew);
            if sys.project(t, &mut y) {
                sys.rhs(t, &y, &mut k1);
            } else {
                std::mem::swap(&mut k1, &mut k7);
            }
            if flow.is_break() {
                break;
            }
            let mut fac = SAFETY * en.max(1e-10).powf(-0.2);
            fac = fac.clamp(FAC_MIN, FAC_MAX);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).max(unclipped.unwrap_or(0.0)).min(cfg.h_max);
            last_rejected = false;
        } else {
            let fac = if finite {
                (SAFETY * en.powf(-0.2)).max(FAC_MIN)
            } else {
                0.25
            };
            h *= fac;
            last_rejected = true;
            if h < cfg.h_min {
                return Err(if finite {
                    IntegrationError::StepUnderflow { t, h }
                } else {
                    IntegrationError::NonFinite { t }
                });
            }
        }
    }
    Ok((t, y))
}

/// Integrates from `t0` and samples the solution at `times`, which must be
/// monotone in the direction of integration and not precede `t0`.
pub fn solve_at<S: OdeSystem>(
    sys: &S,
    cfg: &IntegratorConfig,
    t0: f64,
    y0: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<f64>>, IntegrationError> {
    let Some(&t_end) = times.last() else {
        return Ok(Vec::new());
    };
    let dir = if t_end >= t0 { 1.0 } else { -1.0 };
    if times.windows(2).any(|w| (w[1] - w[0]) * dir < 0.0) || (times[0] - t0) * dir < 0.0 {
        return Err(IntegrationError::InvalidSpan(
            "output times must be monotone in the integration direction".into(),
        ));
    }
    let n = sys.dim();
    let mut out = Vec::with_capacity(times.len());
    let mut next = 0;
    while next < times.len() && times[next] == t0 {
        out.push(y0.to_vec());
        next += 1;
    }
    solve_with_stops(sys, cfg, t0, y0, t_end, times, |step| {
        while next < times.len() && step.contains(times[next]) {
            let mut v = vec![0.0; n];
            step.eval(times[next], &mut v);
            out.push(v);
            next += 1;
        }
        ControlFlow::Continue(())
    })?;
    Ok(out)
}

/// Uniform grid `t0, t0 + dt, ...` ending exactly at `t_end` (either direction).
pub fn uniform_grid(t0: f64, t_end: f64, dt: f64) -> Vec<f64> {
    let span = t_end - t0;
    if span == 0.0 {
        return vec![t0];
    }
    let n = (span.abs() / dt.abs()).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..n).map(|i| t0 + span * (i as f64) / (n as f64)).collect();
    grid.push(t_end);
    grid
}
