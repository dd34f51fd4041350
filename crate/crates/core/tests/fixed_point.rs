mod common;

use common::*;
use mftc_core::fixedpoint::{flow_property_check, solve_mftc, FixedPointConfig, Verdict};
use mftc_core::majorant::MajorantMode;
use mftc_core::oracle::LQClosedForm;
use mftc_core::quad::quadratic_fit;

#[test]
fn lq_fixed_point_matches_riccati_oracle() {
    let model = lq_model(0.5);
    let grid = default_grid();
    let mesh = mesh(0.5, 1e-3);
    let m0 = m0(grid);
    let out = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
    assert_eq!(out.report.verdict, Verdict::Converged);
    assert!(out.report.majorant_certified());
    let oracle = LQClosedForm::for_model(&model, &m0).unwrap();
    let core = grid.core();
    let xs = grid.nodes()[core.clone()].to_vec();
    for n in [0, 250, 499] {
        let s = mesh.time(n);
        let c = quadratic_fit(&xs, &out.solution.v.slice(n)[core.clone()]);
        assert!((2.0 * c[2] - oracle.p(s)).abs() < 1e-3, "P at {s}: {c:?}");
        assert!((c[1] - oracle.r(s)).abs() < 1e-3, "r at {s}: {c:?}");
        assert!((c[0] - oracle.k(s)).abs() < 1e-3, "k at {s}: {c:?}");
    }
    for n in 0..mesh.n_nodes() {
        let mean = out.flow.slice(n).as_measure().mean();
        assert!((mean - oracle.mbar(mesh.time(n))).abs() < 2e-3, "node {n}");
    }
}

#[test]
fn damping_does_not_change_the_limit() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let m0 = m0(grid);
    let full = solve_mftc(&model, &m0, &mesh, &grid, &FixedPointConfig::default()).unwrap();
    let cfg = FixedPointConfig {
        damping: 0.5,
        max_iters: 100,
        ..FixedPointConfig::default()
    };
    let damped = solve_mftc(&model, &m0, &mesh, &grid, &cfg).unwrap();
    assert_eq!(full.report.verdict, Verdict::Converged);
    assert_eq!(damped.report.verdict, Verdict::Converged);
    assert!(damped.report.iterations.len() > full.report.iterations.len());
    let diff = full
        .solution
        .v
        .values()
        .iter()
        .flatten()
        .zip(damped.solution.v.values().iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn residuals_decrease_once_contracting() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let out = solve_mftc(
        &model,
        &m0(grid),
        &mesh,
        &grid,
        &FixedPointConfig::default(),
    )
    .unwrap();
    let res: Vec<f64> = out
        .report
        .iterations
        .iter()
        .map(|r| r.max_residual)
        .collect();
    assert!(res.len() >= 4);
    for w in res[1..].windows(2) {
        assert!(w[1] < w[0], "{res:?}");
    }
    let last = out.report.last().unwrap();
    assert_eq!(last.value_dominated, Some(true));
    assert_eq!(last.gradient_dominated, Some(true));
}

#[test]
fn restarted_problem_reproduces_the_solution() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let cfg = FixedPointConfig::default();
    let out = solve_mftc(&model, &m0(grid), &mesh, &grid, &cfg).unwrap();
    let err =
        flow_property_check(&model, &out.solution, &out.flow, mesh.n_nodes() / 2, &cfg).unwrap();
    assert!(err <= 5e-3, "{err}");
}

#[test]
fn long_horizon_without_convexity_is_not_certified() {
    let model = nonconvex_model(1.0);
    let grid = coarse_grid();
    let mesh = mesh(1.0, 1e-2);
    let out = solve_mftc(
        &model,
        &m0(grid),
        &mesh,
        &grid,
        &FixedPointConfig::default(),
    )
    .unwrap();
    assert!(out.report.verdict != Verdict::Converged || !out.report.majorant_certified());
    assert_eq!(out.report.majorant_mode, None);
}

#[test]
fn short_horizon_uses_small_time_majorants() {
    let model = lq_model(0.15);
    let grid = coarse_grid();
    let mesh = mesh(0.15, 5e-3);
    let out = solve_mftc(
        &model,
        &m0(grid),
        &mesh,
        &grid,
        &FixedPointConfig::default(),
    )
    .unwrap();
    assert_eq!(out.report.verdict, Verdict::Converged);
    assert_eq!(out.report.majorant_mode, Some(MajorantMode::SmallTime));
    assert!(out.report.majorant_certified());
}
