#![allow(dead_code)]

use std::sync::Arc;

use mftc_core::measure::GridDensity;
use mftc_core::model::{
    build_model, AssumptionConstants, BuiltinFamily, ModelSpec, QuadraticControl, SquaredMean,
};
use mftc_core::{Grid1D, TimeMesh};

pub fn lq_model(horizon: f64) -> ModelSpec {
    build_model(
        BuiltinFamily::LqMeanField {
            mean_coupling: 1.0,
            terminal_curvature: 1.0,
            terminal_mean_coupling: 0.5,
        },
        (0.0, horizon),
        &[1.0],
        AssumptionConstants::default(),
    )
    .unwrap()
}

/// The LQ model rebuilt as a custom family that does not claim convexity.
pub fn nonconvex_model(horizon: f64) -> ModelSpec {
    build_model(
        BuiltinFamily::Custom {
            local: Arc::new(QuadraticControl {
                terminal_curvature: 1.0,
            }),
            running: Arc::new(SquaredMean { weight: 1.0 }),
            terminal: Arc::new(SquaredMean { weight: 0.5 }),
            convex: false,
        },
        (0.0, horizon),
        &[1.0],
        AssumptionConstants::default(),
    )
    .unwrap()
}

pub fn default_grid() -> Grid1D {
    Grid1D::new(-8.0, 8.0, 401).unwrap()
}

pub fn coarse_grid() -> Grid1D {
    Grid1D::new(-8.0, 8.0, 161).unwrap()
}

pub fn m0(grid: Grid1D) -> GridDensity {
    GridDensity::gaussian(grid, 0.5, 0.5).unwrap()
}

pub fn mesh(horizon: f64, dt: f64) -> TimeMesh {
    TimeMesh::with_step(0.0, horizon, dt).unwrap()
}
