//! Linearization of the geodesic flow along an orbit.
//!
//! Perpendicular Jacobi fields solve the matrix equation `Y'' + R(t) Y = 0`
//! where `R(t)` is the curvature operator along the orbit (on a surface,
//! `R(t) = K(x(t))`). Nonsingular solutions give `U = Y' Y⁻¹`, which solves
//! the Riccati equation `U' + U² + R = 0`.
//!
//! The Green bundles are limits of boundary-value solutions: `Y_r` with
//! `Y_r(0) = I`, `Y_r(r) = 0`, and `U_r = Y_r'(0)`, taking `r → +∞` for the
//! stable bundle and `r → −∞` for the unstable one. With fundamental
//! solutions `A` (from `(I, 0)`) and `B` (from `(0, I)`), `Y_r = A + B C` and
//! `U_r = C = −B(r)⁻¹ A(r)`, so a single propagation serves every `r`.
//!
//! Long propagations are kept in range by rescaling: frames carry a
//! `log_scale`, and the true solution is `e^{log_scale}·(Y, Y')`.

use std::ops::ControlFlow;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesics::{carrier_rates, GeodesicError, GeodesicState, Phase, Trajectory};
use crate::ode::{self, DenseStep, IntegrationError, IntegratorConfig, OdeSystem};
use crate::surfaces::SurfaceModel;

pub type CurvatureField = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;

/// Where `R(t)` comes from.
#[derive(Clone)]
pub enum CurvatureSource {
    /// Along the geodesic through `start` (time 0); `R(t) = K(x(t))`, dimension 1.
    Geodesic { model: SurfaceModel, start: GeodesicState },
    /// Constant symmetric `R`.
    Constant(DMatrix<f64>),
    /// Time-dependent symmetric `R(t)` of the given dimension.
    Field { dim: usize, field: CurvatureField },
}

impl std::fmt::Debug for CurvatureSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Geodesic { model, start } => f
                .debug_struct("Geodesic")
                .field("model", &model.label())
                .field("start", start)
                .finish(),
            Self::Constant(r) => f.debug_tuple("Constant").field(r).finish(),
            Self::Field { dim, .. } => f.debug_struct("Field").field("dim", dim).finish_non_exhaustive(),
        }
    }
}

impl CurvatureSource {
    pub fn geodesic(model: &SurfaceModel, start: GeodesicState) -> Self {
        Self::Geodesic { model: model.clone(), start }
    }

    /// `R ≡ k` in dimension 1.
    pub fn constant_scalar(k: f64) -> Self {
        Self::Constant(DMatrix::from_element(1, 1, k))
    }

    pub fn diagonal(entries: &[f64]) -> Self {
        Self::Constant(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(entries)))
    }

    pub fn field<F>(dim: usize, f: F) -> Self
    where
        F: Fn(f64) -> DMatrix<f64> + Send + Sync + 'static,
    {
        Self::Field { dim, field: Arc::new(f) }
    }

    /// Dimension `n − 1` of the perpendicular space.
    pub fn dim(&self) -> usize {
        match self {
            Self::Geodesic { .. } => 1,
            Self::Constant(r) => r.nrows(),
            Self::Field { dim, .. } => *dim,
        }
    }

    pub fn theta(&self) -> Option<GeodesicState> {
        match self {
            Self::Geodesic { start, .. } => Some(*start),
            _ => None,
        }
    }

    fn carrier(&self) -> Result<Carrier<'_>, LinearizationError> {
        Ok(match self {
            Self::Geodesic { model, start } => {
                let phase = Phase::from_state(model, start)?;
                Carrier {
                    k: 1,
                    kind: CarrierKind::Geodesic { model, meridian: phase.meridian },
                    base0: vec![phase.x, phase.rapidity],
                }
            }
            Self::Constant(r) => {
                if !r.is_square() || r.nrows() == 0 {
                    return Err(LinearizationError::DimensionMismatch(format!(
                        "curvature matrix must be square and nonempty, got {}x{}",
                        r.nrows(),
                        r.ncols()
                    )));
                }
                Carrier { k: r.nrows(), kind: CarrierKind::Constant(r), base0: Vec::new() }
            }
            Self::Field { dim, field } => {
                if *dim == 0 {
                    return Err(LinearizationError::DimensionMismatch("dimension must be positive".into()));
                }
                Carrier { k: *dim, kind: CarrierKind::Field(field.as_ref()), base0: Vec::new() }
            }
        })
    }
}

enum CarrierKind<'a> {
    Geodesic { model: &'a SurfaceModel, meridian: Option<f64> },
    Constant(&'a DMatrix<f64>),
    Field(&'a (dyn Fn(f64) -> DMatrix<f64> + Send + Sync)),
}

/// The orbit part of a linearized system: the base ODE and `R(t)`.
struct Carrier<'a> {
    k: usize,
    kind: CarrierKind<'a>,
    base0: Vec<f64>,
}

enum Curv {
    Scalar(f64),
    Matrix(DMatrix<f64>),
}

impl Curv {
    /// `dst = −R·src` for a `k×m` column-major block.
    fn neg_apply(&self, k: usize, src: &[f64], dst: &mut [f64]) {
        match self {
            Curv::Scalar(c) => {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = -c * s;
                }
            }
            Curv::Matrix(r) => {
                let m = src.len() / k;
                for j in 0..m {
                    for i in 0..k {
                        let mut acc = 0.0;
                        for l in 0..k {
                            acc += r[(i, l)] * src[j * k + l];
                        }
                        dst[j * k + i] = -acc;
                    }
                }
            }
        }
    }

    fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Curv::Scalar(c) => {
                if i == j {
                    *c
                } else {
                    0.0
                }
            }
            Curv::Matrix(r) => r[(i, j)],
        }
    }
}

impl Carrier<'_> {
    fn base_len(&self) -> usize {
        self.base0.len()
    }

    /// Writes base rates and returns `R(t)`.
    fn eval(&self, t: f64, base: &[f64], dbase: &mut [f64]) -> Curv {
        match &self.kind {
            CarrierKind::Geodesic { model, meridian } => {
                let (dx, db, k) = carrier_rates(model, *meridian, base[0], base[1]);
                dbase[0] = dx;
                dbase[1] = db;
                Curv::Scalar(k)
            }
            CarrierKind::Constant(r) => {
                if self.k == 1 {
                    Curv::Scalar(r[(0, 0)])
                } else {
                    Curv::Matrix((*r).clone())
                }
            }
            CarrierKind::Field(f) => {
                let r = f(t);
                if self.k == 1 {
                    Curv::Scalar(r[(0, 0)])
                } else {
                    Curv::Matrix(r)
                }
            }
        }
    }

    /// Base state at time `t`, integrating the orbit from 0 when needed.
    fn base_at(&self, t: f64, cfg: &IntegratorConfig) -> Result<Vec<f64>, LinearizationError> {
        if self.base0.is_empty() || t == 0.0 {
            return Ok(self.base0.clone());
        }
        let sys = BaseSystem { carrier: self };
        let (_, y) = ode::solve(&sys, cfg, 0.0, &self.base0, t, |_| ControlFlow::Continue(()))?;
        Ok(y)
    }
}

struct BaseSystem<'a, 'b> {
    carrier: &'a Carrier<'b>,
}

impl OdeSystem for BaseSystem<'_, '_> {
    fn dim(&self) -> usize {
        self.carrier.base_len()
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.carrier.eval(t, y, dy);
    }
}

/// `[base | Y (k×m) | Y' (k×m) | log_scale]`
struct JacobiSystem<'a, 'b> {
    carrier: &'a Carrier<'b>,
    cols: usize,
    rescale_threshold: f64,
}

impl JacobiSystem<'_, '_> {
    fn block(&self) -> usize {
        self.carrier.k * self.cols
    }

    fn y_range(&self) -> std::ops::Range<usize> {
        let b = self.carrier.base_len();
        b..b + 2 * self.block()
    }
}

impl OdeSystem for JacobiSystem<'_, '_> {
    fn dim(&self) -> usize {
        self.carrier.base_len() + 2 * self.block() + 1
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let nb = self.carrier.base_len();
        let blk = self.block();
        let r = self.carrier.eval(t, &y[..nb], &mut dy[..nb]);
        dy[nb..nb + blk].copy_from_slice(&y[nb + blk..nb + 2 * blk]);
        r.neg_apply(self.carrier.k, &y[nb..nb + blk], &mut dy[nb + blk..nb + 2 * blk]);
        dy[nb + 2 * blk] = 0.0;
    }

    fn project(&self, _t: f64, y: &mut [f64]) -> bool {
        let range = self.y_range();
        let norm = y[range.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > self.rescale_threshold {
            for v in &mut y[range.clone()] {
                *v /= norm;
            }
            y[range.end] += norm.ln();
            true
        } else {
            false
        }
    }
}

/// `[base | U (k×k)]`
struct RiccatiSystem<'a, 'b> {
    carrier: &'a Carrier<'b>,
}

fn riccati_rhs(carrier: &Carrier<'_>, t: f64, y: &[f64], dy: &mut [f64], nb: usize) -> Curv {
    let k = carrier.k;
    let r = carrier.eval(t, &y[..nb], &mut dy[..nb]);
    let u = &y[nb..nb + k * k];
    for j in 0..k {
        for i in 0..k {
            let mut acc = 0.0;
            for l in 0..k {
                acc += u[l * k + i] * u[j * k + l];
            }
            dy[nb + j * k + i] = -acc - r.entry(i, j);
        }
    }
    r
}

impl OdeSystem for RiccatiSystem<'_, '_> {
    fn dim(&self) -> usize {
        self.carrier.base_len() + self.carrier.k * self.carrier.k
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        riccati_rhs(self.carrier, t, y, dy, self.carrier.base_len());
    }
}

/// `[base | U (k×k) | Z (k×k) | log_scale]` with `Z' = U Z`.
struct TransportSystem<'a, 'b> {
    carrier: &'a Carrier<'b>,
    rescale_threshold: f64,
}

impl OdeSystem for TransportSystem<'_, '_> {
    fn dim(&self) -> usize {
        self.carrier.base_len() + 2 * self.carrier.k * self.carrier.k + 1
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let nb = self.carrier.base_len();
        let k = self.carrier.k;
        let kk = k * k;
        riccati_rhs(self.carrier, t, y, dy, nb);
        let u = &y[nb..nb + kk];
        let z = &y[nb + kk..nb + 2 * kk];
        for j in 0..k {
            for i in 0..k {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += u[l * k + i] * z[j * k + l];
                }
                dy[nb + kk + j * k + i] = acc;
            }
        }
        dy[nb + 2 * kk] = 0.0;
    }

    fn project(&self, _t: f64, y: &mut [f64]) -> bool {
        let nb = self.carrier.base_len();
        let kk = self.carrier.k * self.carrier.k;
        let zr = nb + kk..nb + 2 * kk;
        let norm = y[zr.clone()].iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if norm > self.rescale_threshold {
            for v in &mut y[zr.clone()] {
                *v /= norm;
            }
            y[zr.end] += norm.ln();
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearizationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("conjugate point at t = {t}: no-conjugate-points hypothesis violated")]
    ConjugatePoint { t: f64 },
    #[error("Green bundle did not converge by |r| = {r_used} (residual {residual:e})")]
    NotConverged { r_used: f64, residual: f64, estimate: Box<BundleEstimate> },
    #[error("singular Jacobi frame at t = {t}")]
    SingularFrame { t: f64 },
    #[error("need at least {needed} samples in the fit window, found {found}")]
    TooFewSamples { found: usize, needed: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error("integration failed: {0}")]
    Integration(#[from] IntegrationError),
}

impl LinearizationError {
    /// The best available bundle estimate when the doubling did not converge.
    pub fn estimate(&self) -> Option<&BundleEstimate> {
        match self {
            Self::NotConverged { estimate, .. } => Some(estimate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearizationConfig {
    pub integrator: IntegratorConfig,
    /// `‖U‖` beyond which a Riccati solution is declared blown up.
    pub blowup_threshold: f64,
    /// Stopping tolerance on `‖U_r − U_{2r}‖`.
    pub bundle_tol: f64,
    /// First horizon of the doubling sequence.
    pub r0: f64,
    /// Horizon cap.
    pub r_max: f64,
    /// Frames are rescaled once an entry exceeds this magnitude.
    pub rescale_threshold: f64,
    /// Extra horizon used to let a Riccati solution settle onto a bundle.
    pub burn_in: f64,
}

impl Default for LinearizationConfig {
    fn default() -> Self {
        Self {
            integrator: IntegratorConfig { max_steps: 2_000_000, ..IntegratorConfig::default() },
            blowup_threshold: 1e6,
            bundle_tol: 1e-8,
            r0: 8.0,
            r_max: 8192.0,
            rescale_threshold: 1e15,
            burn_in: 16.0,
        }
    }
}

/// Jacobi data at one time. The true solution is `e^{log_scale}·(y, yp)`.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobiFrame {
    pub t: f64,
    pub y: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub log_scale: f64,
}

impl JacobiFrame {
    /// `log |det Y|` including the accumulated scale.
    pub fn log_abs_det(&self) -> f64 {
        self.y.determinant().abs().ln() + self.y.nrows() as f64 * self.log_scale
    }

    /// `Y' Y⁻¹` when `Y` is invertible.
    pub fn riccati(&self) -> Option<DMatrix<f64>> {
        self.y.clone().try_inverse().map(|inv| &self.yp * inv)
    }

    /// Spectral norm of the unscaled `Y`, as a logarithm.
    pub fn log_norm(&self) -> f64 {
        self.y.norm().ln().max(f64::MIN) + self.log_scale
    }
}

fn unpack_frame(t: f64, v: &[f64], nb: usize, k: usize, cols: usize) -> JacobiFrame {
    let blk = k * cols;
    JacobiFrame {
        t,
        y: DMatrix::from_column_slice(k, cols, &v[nb..nb + blk]),
        yp: DMatrix::from_column_slice(k, cols, &v[nb + blk..nb + 2 * blk]),
        log_scale: v[nb + 2 * blk],
    }
}

fn check_times(times: &[f64]) -> Result<f64, LinearizationError> {
    let Some(&first) = times.first() else {
        return Err(LinearizationError::InvalidArgument("empty time grid".into()));
    };
    if first != 0.0 {
        return Err(LinearizationError::InvalidArgument("time grid must start at 0".into()));
    }
    let dir = times.last().map_or(1.0, |t| if *t < 0.0 { -1.0 } else { 1.0 });
    if times.windows(2).any(|w| (w[1] - w[0]) * dir <= 0.0) {
        return Err(LinearizationError::InvalidArgument("time grid must be strictly monotone".into()));
    }
    Ok(dir)
}

/// Propagates `Y'' + R Y = 0` from `(y0, yp0)` at `t = 0` over `times`.
/// `y0`, `yp0` are `k×m` for any number of columns `m`.
pub fn propagate_jacobi(
    source: &CurvatureSource,
    times: &[f64],
    y0: &DMatrix<f64>,
    yp0: &DMatrix<f64>,
    cfg: &LinearizationConfig,
) -> Result<Vec<JacobiFrame>, LinearizationError> {
    check_times(times)?;
    let carrier = source.carrier()?;
    let k = carrier.k;
    if y0.nrows() != k || yp0.shape() != y0.shape() || y0.ncols() == 0 {
        return Err(LinearizationError::DimensionMismatch(format!(
            "expected {k}×m initial data with matching shapes, got {:?} and {:?}",
            y0.shape(),
            yp0.shape()
        )));
    }
    let cols = y0.ncols();
    let sys = JacobiSystem { carrier: &carrier, cols, rescale_threshold: cfg.rescale_threshold };
    let mut state = carrier.base0.clone();
    state.extend_from_slice(y0.as_slice());
    state.extend_from_slice(yp0.as_slice());
    state.push(0.0);
    let raw = ode::solve_at(&sys, &cfg.integrator, 0.0, &state, times)?;
    let nb = carrier.base_len();
    Ok(times.iter().zip(raw).map(|(&t, v)| unpack_frame(t, &v, nb, k, cols)).collect())
}

/// [`propagate_jacobi`] along a sampled geodesic, on the trajectory's grid.
pub fn propagate_jacobi_along(
    m: &SurfaceModel,
    traj: &Trajectory,
    y0: &DMatrix<f64>,
    yp0: &DMatrix<f64>,
    cfg: &LinearizationConfig,
) -> Result<Vec<JacobiFrame>, LinearizationError> {
    let source = CurvatureSource::geodesic(m, traj.initial_state());
    propagate_jacobi(&source, &traj.times, y0, yp0, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiState {
    pub t: f64,
    pub u: DMatrix<f64>,
    pub blown_up: bool,
    pub blowup_time: Option<f64>,
}

impl RiccatiState {
    pub fn trace(&self) -> f64 {
        self.u.trace()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.u - self.u.transpose()).amax()
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
}

/// Bisection for the crossing of `h` from `≤ 0` to `> 0` inside a step.
fn bisect_in_step<H: FnMut(&DenseStep<'_>, f64) -> f64>(step: &DenseStep<'_>, mut h: H) -> f64 {
    let (mut a, mut b) = (step.t0(), step.t1());
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid == a || mid == b {
            break;
        }
        if h(step, mid) > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    0.5 * (a + b)
}

/// Integrates `U' = −U² − R` from `u0` at `t = 0`. On `‖U‖ > blowup_threshold`
/// the series ends with a state flagged `blown_up` at the located time.
pub fn riccati_flow(
    source: &CurvatureSource,
    times: &[f64],
    u0: &DMatrix<f64>,
    cfg: &LinearizationConfig,
) -> Result<Vec<RiccatiState>, LinearizationError> {
    check_times(times)?;
    let carrier = source.carrier()?;
    let k = carrier.k;
    if u0.shape() != (k, k) {
        return Err(LinearizationError::DimensionMismatch(format!(
            "expected {k}×{k} initial value, got {:?}",
            u0.shape()
        )));
    }
    let nb = carrier.base_len();
    let sys = RiccatiSystem { carrier: &carrier };
    let mut state = carrier.base0.clone();
    state.extend_from_slice(u0.as_slice());
    let unpack = |t: f64, v: &[f64]| RiccatiState {
        t,
        u: DMatrix::from_column_slice(k, k, &v[nb..nb + k * k]),
        blown_up: false,
        blowup_time: None,
    };

    let mut out = vec![unpack(0.0, &state)];
    let mut next = 1;
    let t_end = *times.last().unwrap();
    let threshold = cfg.blowup_threshold;
    let mut buf = vec![0.0; state.len()];
    ode::solve_with_stops(&sys, &cfg.integrator, 0.0, &state, t_end, times, |step| {
        let blowup = if max_abs(&step.end()[nb..]) > threshold {
            let mut tmp = vec![0.0; step.end().len()];
            Some(bisect_in_step(step, |s, t| {
                s.eval(t, &mut tmp);
                max_abs(&tmp[nb..]) - threshold
            }))
        } else {
            None
        };
        let limit = blowup.unwrap_or(step.t1());
        while next < times.len() && step.contains(times[next]) && (times[next] - limit) * (t_end.signum()) <= 0.0 {
            step.eval(times[next], &mut buf);
            out.push(unpack(times[next], &buf));
            next += 1;
        }
        match blowup {
            Some(tb) => {
                step.eval(tb, &mut buf);
                let mut s = unpack(tb, &buf);
                s.blown_up = true;
                s.blowup_time = Some(tb);
                out.push(s);
                ControlFlow::Break(())
            }
            None => ControlFlow::Continue(()),
        }
    })?;
    Ok(out)
}

/// Green stable/unstable Riccati values at `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleEstimate {
    pub u_s: DMatrix<f64>,
    pub u_u: DMatrix<f64>,
    pub r_used_s: f64,
    pub r_used_u: f64,
    /// Last doubling increment `‖U_r − U_{2r}‖`, stable side.
    pub residual_s: f64,
    pub residual_u: f64,
    /// All doubling increments, in order.
    pub residuals_s: Vec<f64>,
    pub residuals_u: Vec<f64>,
    pub converged: bool,
    pub theta: Option<GeodesicState>,
}

impl BundleEstimate {
    pub fn r_used(&self) -> f64 {
        self.r_used_s.max(self.r_used_u)
    }

    pub fn residual(&self) -> f64 {
        self.residual_s.max(self.residual_u)
    }

    /// Scalar values in dimension 1.
    pub fn scalars(&self) -> Option<(f64, f64)> {
        (self.u_s.shape() == (1, 1)).then(|| (self.u_s[(0, 0)], self.u_u[(0, 0)]))
    }
}

struct HalfBundle {
    u: DMatrix<f64>,
    r_used: f64,
    residuals: Vec<f64>,
    converged: bool,
}

fn half_bundle(
    carrier: &Carrier<'_>,
    dir: f64,
    cfg: &LinearizationConfig,
) -> Result<HalfBundle, LinearizationError> {
    let k = carrier.k;
    let nb = carrier.base_len();
    let sys = JacobiSystem { carrier, cols: 2 * k, rescale_threshold: cfg.rescale_threshold };
    let mut state = carrier.base0.clone();
    let mut y0 = DMatrix::zeros(k, 2 * k);
    let mut yp0 = DMatrix::zeros(k, 2 * k);
    for i in 0..k {
        y0[(i, i)] = 1.0;
        yp0[(i, k + i)] = 1.0;
    }
    state.extend_from_slice(y0.as_slice());
    state.extend_from_slice(yp0.as_slice());
    state.push(0.0);

    // det B(t) ≈ det(t·I) right after t = 0.
    let initial_sign = if dir < 0.0 && k % 2 == 1 { -1.0 } else { 1.0 };
    let det_b = |v: &[f64]| -> f64 {
        let b = DMatrix::from_column_slice(k, k, &v[nb + k * k..nb + 2 * k * k]);
        b.determinant()
    };
    let u_at = |v: &[f64]| -> Option<DMatrix<f64>> {
        let a = DMatrix::from_column_slice(k, k, &v[nb..nb + k * k]);
        let b = DMatrix::from_column_slice(k, k, &v[nb + k * k..nb + 2 * k * k]);
        b.lu().solve(&a).map(|c| -c)
    };

    let mut r = cfg.r0;
    let mut prev: Option<DMatrix<f64>> = None;
    let mut residuals = Vec::new();
    let mut result: Option<(DMatrix<f64>, f64, bool)> = None;
    let mut conjugate: Option<f64> = None;
    let mut buf = vec![0.0; state.len()];
    let mut failure: Option<LinearizationError> = None;

    let mut stops = Vec::new();
    let mut rs = cfg.r0;
    while rs <= cfg.r_max {
        stops.push(dir * rs);
        rs *= 2.0;
    }
    ode::solve_with_stops(&sys, &cfg.integrator, 0.0, &state, dir * cfg.r_max, &stops, |step| {
        let d_end = det_b(step.end());
        if d_end * initial_sign <= 0.0 {
            let mut tmp = vec![0.0; step.end().len()];
            let tc = bisect_in_step(step, |s, t| {
                s.eval(t, &mut tmp);
                if t == 0.0 {
                    -1.0
                } else {
                    -det_b(&tmp) * initial_sign
                }
            });
            conjugate = Some(tc);
            return ControlFlow::Break(());
        }
        while r <= cfg.r_max && step.contains(dir * r) {
            step.eval(dir * r, &mut buf);
            let Some(u) = u_at(&buf) else {
                conjugate = Some(dir * r);
                return ControlFlow::Break(());
            };
            if let Some(p) = &prev {
                let res = (&u - p).amax();
                residuals.push(res);
                if res < cfg.bundle_tol {
                    result = Some((u, r, true));
                    return ControlFlow::Break(());
                }
            }
            prev = Some(u);
            r *= 2.0;
        }
        ControlFlow::Continue(())
    })
    .inspect_err(|e| failure = Some(e.clone().into()))
    .ok();
    if let Some(t) = conjugate {
        return Err(LinearizationError::ConjugatePoint { t });
    }
    // An integration failure past the first horizon (curvature blowing up
    // along the orbit) ends the doubling like the horizon cap does.
    if let Some(e) = failure {
        if prev.is_none() {
            return Err(e);
        }
    }
    let (u, r_used, converged) = match result {
        Some(v) => v,
        None => {
            let u = prev.ok_or_else(|| {
                LinearizationError::InvalidArgument("r_max smaller than r0; no horizon evaluated".into())
            })?;
            (u, r / 2.0, false)
        }
    };
    Ok(HalfBundle { u, r_used, residuals, converged })
}

/// Green bundles at `θ` by the doubling boundary-value limit.
pub fn green_bundle(
    m: &SurfaceModel,
    theta: &GeodesicState,
    cfg: &LinearizationConfig,
) -> Result<BundleEstimate, LinearizationError> {
    green_bundle_for(&CurvatureSource::geodesic(m, *theta), cfg)
}

pub fn green_bundle_for(
    source: &CurvatureSource,
    cfg: &LinearizationConfig,
) -> Result<BundleEstimate, LinearizationError> {
    if !(cfg.r0 > 0.0 && cfg.r_max >= cfg.r0) {
        return Err(LinearizationError::InvalidArgument(format!(
            "need 0 < r0 ≤ r_max, got r0 = {}, r_max = {}",
            cfg.r0, cfg.r_max
        )));
    }
    let carrier = source.carrier()?;
    let stable = half_bundle(&carrier, 1.0, cfg)?;
    let unstable = half_bundle(&carrier, -1.0, cfg)?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(f64::INFINITY);
    let est = BundleEstimate {
        residual_s: last(&stable.residuals),
        residual_u: last(&unstable.residuals),
        u_s: stable.u,
        u_u: unstable.u,
        r_used_s: stable.r_used,
        r_used_u: unstable.r_used,
        residuals_s: stable.residuals,
        residuals_u: unstable.residuals,
        converged: stable.converged && unstable.converged,
        theta: source.theta(),
    };
    if est.converged {
        Ok(est)
    } else {
        Err(LinearizationError::NotConverged {
            r_used: est.r_used(),
            residual: est.residual(),
            estimate: Box::new(est),
        })
    }
}

/// Green bundle, falling back to the unconverged estimate.
pub fn green_bundle_estimate(
    source: &CurvatureSource,
    cfg: &LinearizationConfig,
) -> Result<BundleEstimate, LinearizationError> {
    match green_bundle_for(source, cfg) {
        Err(LinearizationError::NotConverged { estimate, .. }) => Ok(*estimate),
        other => other,
    }
}

/// `max |d/dt log|det Y| − tr U|` over interior grid points, with the
/// derivative taken by centered differences.
pub fn liouville_residual(frames: &[JacobiFrame], riccati: &[RiccatiState]) -> Result<f64, LinearizationError> {
    if frames.len() != riccati.len() {
        return Err(LinearizationError::DimensionMismatch(format!(
            "{} frames vs {} Riccati states",
            frames.len(),
            riccati.len()
        )));
    }
    if frames.len() < 3 {
        return Err(LinearizationError::TooFewSamples { found: frames.len(), needed: 3 });
    }
    let mut logs = Vec::with_capacity(frames.len());
    for f in frames {
        if !f.y.is_square() {
            return Err(LinearizationError::DimensionMismatch("frames must be square".into()));
        }
        let l = f.log_abs_det();
        if !l.is_finite() {
            return Err(LinearizationError::SingularFrame { t: f.t });
        }
        logs.push(l);
    }
    let n = frames.len();
    for i in 0..n {
        if (riccati[i].t - frames[i].t).abs() > 1e-12 * (1.0 + frames[i].t.abs()) {
            return Err(LinearizationError::InvalidArgument(format!(
                "time grids differ at index {i}: {} vs {}",
                frames[i].t, riccati[i].t
            )));
        }
    }
    // Five-point stencil on uniform grids, three-point otherwise.
    let h = (frames[n - 1].t - frames[0].t) / (n - 1) as f64;
    let uniform = n >= 5 && frames.windows(2).all(|w| ((w[1].t - w[0].t) - h).abs() <= 1e-9 * h.abs());
    let mut worst = 0.0f64;
    if uniform {
        for i in 2..n - 2 {
            let d = (logs[i - 2] - 8.0 * logs[i - 1] + 8.0 * logs[i + 1] - logs[i + 2]) / (12.0 * h);
            worst = worst.max((d - riccati[i].trace()).abs());
        }
    } else {
        for i in 1..n - 1 {
            let d = (logs[i + 1] - logs[i - 1]) / (frames[i + 1].t - frames[i - 1].t);
            worst = worst.max((d - riccati[i].trace()).abs());
        }
    }
    Ok(worst)
}

/// Least-squares slope of `log |det Y(t)|` on `[t_a, t_b]`.
pub fn det_exponent(frames: &[JacobiFrame], window: (f64, f64)) -> Result<f64, LinearizationError> {
    let (ta, tb) = window;
    if !(tb > ta) {
        return Err(LinearizationError::InvalidArgument(format!("empty window [{ta}, {tb}]")));
    }
    let pts: Vec<(f64, f64)> = frames
        .iter()
        .filter(|f| f.t >= ta && f.t <= tb)
        .map(|f| (f.t, f.log_abs_det()))
        .collect();
    if pts.len() < 4 {
        return Err(LinearizationError::TooFewSamples { found: pts.len(), needed: 4 });
    }
    if let Some((t, _)) = pts.iter().find(|p| !p.1.is_finite()) {
        return Err(LinearizationError::SingularFrame { t: *t });
    }
    Ok(least_squares_slope(&pts))
}

pub(crate) fn least_squares_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, l) in pts {
        sxy += (t - mt) * (l - ml);
        sxx += (t - mt) * (t - mt);
    }
    sxy / sxx
}

/// `‖U_s‖ ≤ c` and `‖U_u‖ ≤ c` (spectral norms) up to `1e-8`.
pub fn check_bundle_bound(est: &BundleEstimate, c: f64) -> bool {
    let tol = 1e-8 * (1.0 + c);
    spectral_norm(&est.u_s) <= c + tol && spectral_norm(&est.u_u) <= c + tol
}

pub(crate) fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.shape() == (1, 1) {
        m[(0, 0)].abs()
    } else {
        m.clone().svd(false, false).singular_values.max()
    }
}

/// Jacobi solution tangent to a Green bundle, sampled on `times ≥ 0` in the
/// direction in which it contracts: the stable solution `Y_s(t)` forward
/// (`backward = false`), or the unstable one `Y_u(−t)` backward.
///
/// Contracting solutions cannot be propagated stably in their own direction,
/// so the bundle is first settled by integrating the Riccati equation from
/// beyond the window back towards `t = 0` (where it attracts), and the frame
/// is transported along with it, `Z' = U Z`, `Y(t) = Z(t) Z(0)⁻¹`.
pub fn contracting_frame(
    source: &CurvatureSource,
    times: &[f64],
    backward: bool,
    cfg: &LinearizationConfig,
) -> Result<Vec<JacobiFrame>, LinearizationError> {
    if times.first() != Some(&0.0) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(LinearizationError::InvalidArgument(
            "times must start at 0 and increase".into(),
        ));
    }
    let carrier = source.carrier()?;
    let k = carrier.k;
    let kk = k * k;
    let nb = carrier.base_len();
    let d = if backward { -1.0 } else { 1.0 };
    let t_last = d * times.last().unwrap();
    let t_far = t_last + d * cfg.burn_in;

    // Settle the Riccati solution onto the bundle.
    let base_far = carrier.base_at(t_far, &cfg.integrator)?;
    let mut state = base_far;
    state.extend(std::iter::repeat_n(0.0, kk));
    let ric = RiccatiSystem { carrier: &carrier };
    let (_, settled) = ode::solve(&ric, &cfg.integrator, t_far, &state, t_last, |_| ControlFlow::Continue(()))?;

    // Transport back to 0.
    let mut state = settled;
    let mut z0 = DMatrix::<f64>::identity(k, k);
    state.extend_from_slice(z0.as_slice());
    state.push(0.0);
    let grid: Vec<f64> = times.iter().rev().map(|t| d * t).collect();
    let sys = TransportSystem { carrier: &carrier, rescale_threshold: cfg.rescale_threshold };
    let raw = ode::solve_at(&sys, &cfg.integrator, t_last, &state, &grid)?;

    let last = raw.last().unwrap();
    z0.copy_from_slice(&last[nb + kk..nb + 2 * kk]);
    let s0 = last[nb + 2 * kk];
    let z0_inv = z0.try_inverse().ok_or(LinearizationError::SingularFrame { t: 0.0 })?;
    let mut frames: Vec<JacobiFrame> = grid
        .iter()
        .zip(&raw)
        .map(|(&t, v)| {
            let u = DMatrix::from_column_slice(k, k, &v[nb..nb + kk]);
            let z = DMatrix::from_column_slice(k, k, &v[nb + kk..nb + 2 * kk]);
            let y = z * &z0_inv;
            JacobiFrame { t, yp: &u * &y, y, log_scale: v[nb + 2 * kk] - s0 }
        })
        .collect();
    frames.reverse();
    Ok(frames)
}

/// `∫₀ᵗ tr R(s) ds / (n − 1)`.
pub fn trace_average_integral(
    source: &CurvatureSource,
    t: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, LinearizationError> {
    struct TraceSystem<'a, 'b> {
        carrier: &'a Carrier<'b>,
    }
    impl OdeSystem for TraceSystem<'_, '_> {
        fn dim(&self) -> usize {
            self.carrier.base_len() + 1
        }
        fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
            let nb = self.carrier.base_len();
            let k = self.carrier.k;
            let r = self.carrier.eval(t, &y[..nb], &mut dy[..nb]);
            dy[nb] = (0..k).map(|i| r.entry(i, i)).sum::<f64>() / k as f64;
        }
    }
    let carrier = source.carrier()?;
    if t == 0.0 {
        return Ok(0.0);
    }
    let mut y0 = carrier.base0.clone();
    y0.push(0.0);
    let (_, y) = ode::solve(&TraceSystem { carrier: &carrier }, cfg, 0.0, &y0, t, |_| ControlFlow::Continue(()))?;
    Ok(y[carrier.base_len()])
}

/// Green bundles at one point of a sweep along an orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenSample {
    pub t: f64,
    pub state: GeodesicState,
    pub estimate: BundleEstimate,
}

/// Green bundles at every `stride`-th sample of `traj`, in parallel.
/// Unconverged estimates (flat directions) are kept with `converged = false`.
pub fn green_sweep(
    m: &SurfaceModel,
    traj: &Trajectory,
    stride: usize,
    cfg: &LinearizationConfig,
) -> Result<Vec<GreenSample>, LinearizationError> {
    use rayon::prelude::*;
    let stride = stride.max(1);
    let idx: Vec<usize> = (0..traj.len()).step_by(stride).collect();
    idx.par_iter()
        .map(|&i| {
            let state = traj.states[i];
            let estimate = green_bundle_estimate(&CurvatureSource::geodesic(m, state), cfg)?;
            Ok(GreenSample { t: traj.times[i], state, estimate })
        })
        .collect()
}

/// Writes `t,x,y,u_s,u_u,residual_s,residual_u` (dimension 1 sweeps).
pub fn write_green_csv<W: std::io::Write>(w: W, samples: &[GreenSample]) -> std::io::Result<()> {
    crate::export::write_csv(
        w,
        "t,x,y,u_s,u_u,residual_s,residual_u",
        samples.iter().map(|s| {
            vec![
                s.t,
                s.state.x,
                s.state.y,
                s.estimate.u_s[(0, 0)],
                s.estimate.u_u[(0, 0)],
                s.estimate.residual_s,
                s.estimate.residual_u,
            ]
        }),
    )
}
