//! Geodesic flows on warped cylinders `ℝ ×_f 𝕊¹`: trajectories, Jacobi and
//! Riccati propagation, Green bundles and averaged-curvature diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod diagnostics;
pub mod export;
pub mod geodesics;
pub mod linearization;
pub mod ode;
pub mod surfaces;

pub use diagnostics::{
    angle_diagnostic, asymptotic_flatness, average_curvature, average_series, contraction_fit, criterion_scan,
    hyperbolicity_stats, ricci_average, theoretical_floor, AngleDiagnostic, AverageSeries, ContractionFit,
    DiagnosticsError, FlatnessConfig, FlatnessReport, FloorReport, HyperbolicityStats, ScanConfig, ScanReport,
    Verdict,
};
pub use geodesics::{
    envelope_check, integrate, integrate_reduced, EnvelopeCheck, GeodesicError, GeodesicState, Trajectory,
};
pub use linearization::{
    check_bundle_bound, det_exponent, green_bundle, liouville_residual, propagate_jacobi, riccati_flow,
    BundleEstimate, CurvatureSource, JacobiFrame, LinearizationConfig, LinearizationError, RiccatiState,
};
pub use ode::{IntegrationError, IntegratorConfig};
pub use surfaces::{
    curvature, make_catenoid_like, make_example2, make_exp_family, make_flat, make_hyperbolic, validate_conditions,
    ConditionReport, ModelSpec, SurfaceError, SurfaceModel, ValidationConfig,
};

/// Matrix type used for Jacobi and Riccati data.
pub use nalgebra::DMatrix;
