//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use geoflow_core::diagnostics::{
    angle_diagnostic, average_curvature, contraction_fit, contraction_samples, criterion_scan,
    sample_initial_conditions, theoretical_floor, ScanConfig, Verdict,
};
use geoflow_core::geodesics::{
    envelope_check, integrate, integrate_on_grid, integrate_phase, integrate_reduced_on_grid, GeodesicState,
};
use geoflow_core::linearization::{
    det_exponent, green_bundle, green_bundle_estimate, green_bundle_for, liouville_residual, propagate_jacobi,
    riccati_flow, CurvatureSource, LinearizationConfig, LinearizationError,
};
use geoflow_core::ode::{uniform_grid, IntegratorConfig};
use geoflow_core::surfaces::{
    make_catenoid_like, make_example2, make_exp_family, make_flat, make_hyperbolic, make_linear_exp, SurfaceModel,
};
use geoflow_core::DMatrix;

/// Outcome of one criterion: failed sub-checks are listed.
struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Self { failures: Vec::new(), notes: Vec::new() }
    }

    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn near(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.expect((got - want).abs() <= tol, format!("{name} = {got:.10} (want {want:.10} ± {tol:e})"));
    }

    fn within(&mut self, name: &str, elapsed: Duration, limit: Duration) {
        self.expect(elapsed <= limit, format!("{name} ran {:.1} s (limit {} s)", elapsed.as_secs_f64(), limit.as_secs()));
    }
}

type Criterion = (&'static str, fn() -> Check);

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

fn presets() -> Vec<SurfaceModel> {
    vec![make_flat(), make_hyperbolic(), make_exp_family(3.0).unwrap(), make_example2(), make_catenoid_like()]
}

/// Seeded random base points; on example2 they escape to `x → +∞`.
fn random_states(m: &SurfaceModel, n: usize, seed: u64) -> Vec<GeodesicState> {
    let cfg = ScanConfig { n_geodesics: n, seed, ..ScanConfig::default() };
    sample_initial_conditions(m, &cfg)
        .into_iter()
        .map(|(x0, b0, side)| {
            if m.label() == "example2" {
                GeodesicState::from_slope(m, 5.0 + x0, 0.0, 0.2 + 0.7 * b0.abs(), side)
            } else {
                GeodesicState::from_slope(m, x0, 0.0, 0.98 * b0, side)
            }
        })
        .collect()
}

fn constant_curvature_oracles() -> Check {
    let mut c = Check::new();
    let start = Instant::now();
    let m = make_hyperbolic();
    let icfg = IntegratorConfig::default();
    let lcfg = LinearizationConfig::default();

    let mut worst = 0.0f64;
    for s0 in random_states(&m, 10, 101) {
        let traj = integrate(&m, &s0, 50.0, &icfg).unwrap();
        worst = worst.max((average_curvature(&m, &traj, 50.0).unwrap() + 1.0).abs());
    }
    c.expect(worst <= 1e-8, format!("max |avg K(50) + 1| over 10 geodesics = {worst:e} (tol 1e-8)"));

    let theta = GeodesicState::from_slope(&m, 0.4, 0.0, -0.3, 1.0);
    let est = green_bundle(&m, &theta, &lcfg).unwrap();
    let (us, uu) = est.scalars().unwrap();
    c.near("u_u", uu, 1.0, 1e-6);
    c.near("u_s", us, -1.0, 1e-6);

    // Unstable solution Y' = u_u Y grows like e^t.
    let times = uniform_grid(0.0, 50.0, 0.01);
    let frames =
        propagate_jacobi(&CurvatureSource::geodesic(&m, theta), &times, &scalar(1.0), &scalar(uu), &lcfg).unwrap();
    c.near("det exponent (unstable)", det_exponent(&frames, (0.0, 50.0)).unwrap(), 1.0, 1e-3);

    let angle = angle_diagnostic(&[est]).unwrap();
    c.near("angle delta", angle.delta, FRAC_PI_2, 1e-6);
    c.within("suite", start.elapsed(), Duration::from_secs(10));
    c
}

fn exp_family_floor_and_scan() -> Check {
    let mut c = Check::new();
    let start = Instant::now();
    let a = 3.0f64;
    let m = make_exp_family(a).unwrap();

    // Independent closed forms for the structural constants.
    let eta = -2.0 * PI * (1.0 + a * a);
    let period = 2.0 * PI;
    let c1 = 2.0 * (a - SQRT_2);
    let big_a = 2.0 / c1 * 3f64.ln();
    let floor_oracle = (eta / (16.0 * period)).max(eta / (8.0 * period + 2.0 * big_a));
    let t_star_oracle = 4.0 * period + (big_a + 4.0 * period).max(2.0 * big_a);

    let f = theoretical_floor(&m).unwrap();
    c.near("floor vs closed form", f.floor, floor_oracle, 1e-9);
    c.near("floor", f.floor, -0.625, 1e-9);
    c.near("t_star vs closed form", f.t_star, t_star_oracle, 1e-9);
    c.near("t_star", f.t_star, 51.0, 0.05);

    let cfg = ScanConfig { n_geodesics: 256, seed: 7, t_final: 60.0, ..ScanConfig::default() };
    let report = criterion_scan(&m, &cfg).unwrap();
    let bound = f.floor + 1e-3;
    let sup = report.sup_final.unwrap_or(f64::INFINITY);
    c.expect(sup <= bound, format!("sup avg(60) = {sup:.6} ≤ {bound}"));
    let tail_ok = report.t_grid.iter().zip(&report.sup_avg).all(|(t, s)| *t < f.t_star || s.is_some_and(|s| s <= bound));
    c.expect(tail_ok, "sup avg ≤ floor + 1e-3 at every grid time past t_star");
    c.expect(report.n_failed == 0, format!("{} failed geodesics", report.n_failed));
    c.expect(report.verdict == Verdict::CriterionMet, format!("verdict {}", report.verdict));
    c.within("reproduction", start.elapsed(), Duration::from_secs(120));
    c
}

fn example2_failure() -> Check {
    let mut c = Check::new();
    let start = Instant::now();
    let m = make_example2();
    let t: f64 = 100.0;
    let meridian = GeodesicState::new(0.0, 0.0, 1.0, 0.0);
    let traj = integrate(&m, &meridian, t, &IntegratorConfig::default()).unwrap();
    let closed = -(1.0 - (-t).exp()) / t - (1.0 - (-2.0 * t).exp()) / (2.0 * t);
    let avg = average_curvature(&m, &traj, t).unwrap();
    c.near("meridian average vs closed form", avg, closed, 1e-10);
    c.near("meridian average", avg, -0.015, 1e-4);

    let cfg = ScanConfig { n_geodesics: 64, seed: 7, t_final: 200.0, ..ScanConfig::default() };
    let report = criterion_scan(&m, &cfg).unwrap();
    c.expect(report.verdict == Verdict::CriterionFailed, format!("verdict {}", report.verdict));

    let dir = std::env::temp_dir().join(format!("geoflow-acceptance-{}", std::process::id()));
    let status = Command::new(env!("CARGO_BIN_EXE_geoflow"))
        .args(["scan", "--model", "example2", "--t-final", "200", "--n", "64", "--seed", "7", "--output-dir"])
        .arg(&dir)
        .output()
        .map(|o| o.status.code());
    let _ = std::fs::remove_dir_all(&dir);
    c.expect(matches!(status, Ok(Some(2))), format!("CLI exit status {status:?} (want 2)"));
    c.within("reproduction", start.elapsed(), Duration::from_secs(60));
    c
}

fn slope_envelope() -> Check {
    let mut c = Check::new();
    let icfg = IntegratorConfig::default();
    let m = make_linear_exp(1.0, 0.1);
    let times = uniform_grid(0.0, 20.0, 0.05);
    for b0 in [-0.9f64, 0.0, 0.5] {
        let sol = integrate_reduced_on_grid(&m, 0.0, b0, &times, &icfg).unwrap();
        let err = times.iter().zip(&sol.b).map(|(t, b)| (b - (t + b0.atanh()).tanh()).abs()).fold(0.0, f64::max);
        c.expect(err <= 1e-8, format!("b0 = {b0}: max |b − tanh(t + atanh b0)| = {err:e} (tol 1e-8)"));
    }

    let g3 = make_exp_family(3.0).unwrap();
    let grid = uniform_grid(0.0, 20.0, 0.05);
    let mut held = 0;
    for s in random_states(&g3, 32, 23) {
        if envelope_check(&g3, s.x, s.vx, &grid, &icfg).unwrap().holds {
            held += 1;
        }
    }
    c.expect(held == 32, format!("strict envelope on {held}/32 random g3 initial conditions"));
    c
}

fn liouville_formula() -> Check {
    let mut c = Check::new();
    let lcfg = LinearizationConfig::default();
    let times = uniform_grid(0.0, 50.0, 0.005);
    for m in presets() {
        let thetas = if m.label() == "example2" {
            vec![GeodesicState::from_slope(&m, 0.0, 0.0, 1.0, 1.0), GeodesicState::from_slope(&m, 5.0, 0.0, 0.3, 1.0)]
        } else {
            vec![GeodesicState::from_slope(&m, 0.0, 0.0, 1.0, 1.0), GeodesicState::from_slope(&m, 0.3, 0.0, 0.6, -1.0)]
        };
        for theta in thetas {
            let source = CurvatureSource::geodesic(&m, theta);
            let (_, uu) = green_bundle_estimate(&source, &lcfg).unwrap().scalars().unwrap();
            let frames = propagate_jacobi(&source, &times, &scalar(1.0), &scalar(uu), &lcfg).unwrap();
            let ric = riccati_flow(&source, &times, &scalar(uu), &lcfg).unwrap();
            let res = liouville_residual(&frames, &ric).unwrap_or(f64::INFINITY);
            c.expect(res < 1e-5, format!("{} at b0 = {}: residual {res:e}", m.label(), theta.vx));
        }
    }

    let source = CurvatureSource::diagonal(&[-1.0, -2.0, -3.0]);
    let est = green_bundle_for(&source, &lcfg).unwrap();
    let times = uniform_grid(0.0, 20.0, 0.005);
    let frames = propagate_jacobi(&source, &times, &DMatrix::identity(3, 3), &est.u_u, &lcfg).unwrap();
    let ric = riccati_flow(&source, &times, &est.u_u, &lcfg).unwrap();
    let res = liouville_residual(&frames, &ric).unwrap_or(f64::INFINITY);
    c.expect(res < 1e-5, format!("diag(-1,-2,-3): residual {res:e}"));
    let rate = 1.0 + SQRT_2 + 3f64.sqrt();
    c.near("diag(-1,-2,-3) det exponent", det_exponent(&frames, (0.0, 20.0)).unwrap(), rate, 1e-2);
    c
}

fn conjugate_points() -> Check {
    let mut c = Check::new();
    let lcfg = LinearizationConfig::default();
    let source = CurvatureSource::constant_scalar(1.0);
    let ric = riccati_flow(&source, &uniform_grid(0.0, 3.0, 0.01), &scalar(0.0), &lcfg).unwrap();
    match ric.last().and_then(|s| s.blowup_time) {
        Some(tb) => c.near("Riccati blow-up time", tb, FRAC_PI_2, 1e-3),
        None => c.expect(false, "no Riccati blow-up detected"),
    }
    let err = green_bundle_for(&source, &lcfg);
    c.expect(
        matches!(err, Err(LinearizationError::ConjugatePoint { .. })),
        format!("green bundle on K = +1 returns {:?}", err.as_ref().err()),
    );
    c
}

fn angle_bound_and_contraction() -> Check {
    let mut c = Check::new();
    let lcfg = LinearizationConfig::default();
    let g3 = make_exp_family(3.0).unwrap();
    let bundles: Result<Vec<_>, _> = random_states(&g3, 64, 31).iter().map(|t| green_bundle(&g3, t, &lcfg)).collect();
    match bundles.map_err(|e| e.to_string()).and_then(|b| angle_diagnostic(&b).map_err(|e| e.to_string())) {
        Ok(a) => c.expect(a.D_check, format!("D check on 64 g3 bundles (delta = {:.6})", a.delta)),
        Err(e) => c.expect(false, format!("g3 bundles: {e}")),
    }

    let h = make_hyperbolic();
    let thetas = random_states(&h, 8, 41);
    let samples = contraction_samples(&h, &thetas, 12.0, 1.0, false, &lcfg).unwrap();
    let fit = contraction_fit(&samples).unwrap();
    let e = (-1f64).exp();
    c.expect((fit.lambda - e).abs() <= 0.02 * e, format!("lambda = {:.6} (want e^-1 ± 2%)", fit.lambda));
    let all = samples.iter().all(|(t, f)| *f <= fit.c * fit.lambda.powf(*t) * (1.0 + 1e-12));
    c.expect(fit.envelope_holds && all, format!("f(t) ≤ C λ^t on all {} samples (C = {:.6})", samples.len(), fit.c));
    c
}

fn conservation_and_determinism() -> Check {
    let mut c = Check::new();
    let icfg = IntegratorConfig::default();
    for m in presets() {
        let mut energy = 0.0f64;
        let mut clairaut = 0.0f64;
        let mut reversal = 0.0f64;
        for s0 in random_states(&m, 4, 53) {
            let traj = integrate(&m, &s0, 1000.0, &icfg).unwrap();
            energy = energy.max(traj.max_energy_drift());
            clairaut = clairaut.max(traj.max_clairaut_drift());

            let fwd = integrate_on_grid(&m, &s0, &[0.0, 50.0], &icfg).unwrap();
            let back = integrate_phase(&m, &fwd.phase_at(1).reversed(), &[0.0, 50.0], &icfg).unwrap();
            let end = back.phase_at(1).reversed().to_state(&m);
            let err =
                [end.x - s0.x, end.y - s0.y, end.vx - s0.vx, end.vy - s0.vy].iter().fold(0.0f64, |a, d| a.max(d.abs()));
            reversal = reversal.max(err);
        }
        c.expect(energy < 1e-7, format!("{}: energy drift {energy:e}", m.label()));
        c.expect(clairaut < 1e-7, format!("{}: Clairaut drift {clairaut:e}", m.label()));
        c.expect(reversal < 1e-6, format!("{}: time reversal error {reversal:e}", m.label()));
    }

    let m = make_exp_family(3.0).unwrap();
    let base = ScanConfig { n_geodesics: 64, t_final: 30.0, seed: 7, ..ScanConfig::default() };
    let one = criterion_scan(&m, &ScanConfig { workers: Some(1), ..base.clone() }).unwrap();
    let many = criterion_scan(&m, &ScanConfig { workers: Some(4), ..base }).unwrap();
    c.expect(one.to_json().unwrap() == many.to_json().unwrap(), "scan with 1 vs 4 workers is bit-identical");
    c
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("constant-curvature oracle suite", constant_curvature_oracles),
        ("exp_family a = 3: floor and scan", exp_family_floor_and_scan),
        ("example2: meridian average and failed scan", example2_failure),
        ("slope envelope", slope_envelope),
        ("Liouville determinant formula", liouville_formula),
        ("conjugate-point detection", conjugate_points),
        ("bundle angle bound and contraction envelope", angle_bound_and_contraction),
        ("conservation and determinism", conservation_and_determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let check = run();
        let secs = start.elapsed().as_secs_f64();
        if check.failures.is_empty() {
            println!("PASS  criterion {}: {name} ({secs:.1} s)", i + 1);
        } else {
            failed += 1;
            println!("FAIL  criterion {}: {name} ({secs:.1} s): {}", i + 1, check.failures.join("; "));
        }
        for n in &check.notes {
            println!("        {n}");
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
