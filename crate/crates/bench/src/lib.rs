//! Shared fixtures for the benchmarks.

use geoflow_core::geodesics::GeodesicState;
use geoflow_core::surfaces::{make_exp_family, SurfaceModel};

/// The `a = 3` exp-family surface and a generic base point on it.
pub fn g3_fixture() -> (SurfaceModel, GeodesicState) {
    let m = make_exp_family(3.0).expect("a = 3 is admissible");
    let theta = GeodesicState::from_slope(&m, 0.4, 0.0, -0.3, 1.0);
    (m, theta)
}
