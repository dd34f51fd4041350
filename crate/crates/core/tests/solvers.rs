mod common;

use common::*;
use mftc_core::fixedpoint::{solve_mftc, FixedPointConfig};
use mftc_core::flow::{
    dual_expectation, flow_from_gradient, girsanov_batch, girsanov_diagnostics, FlowMethod,
    MCParams,
};
use mftc_core::hjb::solve_hjb;
use mftc_core::measure::{MeasureFlow, MeasureSlice};
use mftc_core::model::{build_model, AssumptionConstants, BuiltinFamily};
use mftc_core::oracle::{brute_force_dual, cole_hopf_solution, ColeHopfOracle, LQClosedForm};
use mftc_core::pde::BoundaryPolicy;
use mftc_core::valuefn::{mc_cost, value_derivative_check, value_from_solution};

#[test]
fn cole_hopf_hjb_tracks_the_closed_form() {
    let model = build_model(
        BuiltinFamily::ColeHopf {
            terminal_curvature: 1.0,
        },
        (0.0, 0.5),
        &[1.0],
        AssumptionConstants::default(),
    )
    .unwrap();
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let frozen = MeasureFlow::frozen(mesh, MeasureSlice::Grid(m0(grid)));
    let sol = solve_hjb(&model, &frozen, &mesh, &grid, BoundaryPolicy::default()).unwrap();
    let exact = cole_hopf_solution(1.0, 1.0, (0.0, 0.5), &grid, &mesh).unwrap();
    let err = sol.v.max_diff_on(&exact, grid.core());
    assert!(err < 1e-2, "{err}");
}

#[test]
fn cole_hopf_closed_form_solves_the_pde() {
    let o = ColeHopfOracle::new(0.7, 1.3, 1.0).unwrap();
    for s in [0.0, 0.4, 0.9] {
        for x in [-2.0, 0.0, 1.5] {
            assert!(o.pde_residual(s, x).abs() < 1e-6);
            assert!((o.closed_form(s, x) - o.by_quadrature(s, x).unwrap()).abs() < 1e-10);
        }
    }
    assert!((o.closed_form(1.0, 2.0) - 0.5 * 0.7 * 4.0).abs() < 1e-14);
}

#[test]
fn lq_oracle_satisfies_its_odes() {
    let grid = default_grid();
    let model = lq_model(0.5);
    let oracle = LQClosedForm::for_model(&model, &m0(grid)).unwrap();
    assert!(oracle.shooting_residual < 1e-10);
    assert!(oracle.max_ode_residual() < 1e-6);
    assert!((oracle.mbar(0.0) - 0.5).abs() < 1e-12);
    assert!((oracle.p(0.5) - 1.0).abs() < 1e-12);
}

#[test]
fn grid_flow_and_dual_sweep_agree_with_brute_force() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let m0 = m0(grid);
    let dv = LQClosedForm::for_model(&model, &m0)
        .unwrap()
        .gradient_field(&mesh, &grid)
        .unwrap();
    let bc = BoundaryPolicy::default();
    let flow = flow_from_gradient(
        &model,
        &dv,
        &MeasureSlice::Grid(m0.clone()),
        FlowMethod::FpGrid,
        &MCParams::default(),
        bc,
    )
    .unwrap();
    let last = mesh.n_steps();
    let dual = dual_expectation(&model, &dv, |z| z * z, &m0, last, bc).unwrap();
    let direct = flow.slice(last).as_measure().integrate(&|z| z * z);
    assert!((dual - direct).abs() < 1e-10);
    let bf = brute_force_dual(&model, &dv, &|z| z * z, &m0, last, 20_000, 3).unwrap();
    assert!(
        (bf.value - dual).abs() < 4.0 * bf.stderr + 5e-3,
        "{bf:?} vs {dual}"
    );
}

#[test]
fn girsanov_weights_have_unit_mean() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let m0 = m0(grid);
    let dv = LQClosedForm::for_model(&model, &m0)
        .unwrap()
        .gradient_field(&mesh, &grid)
        .unwrap();
    let mc = MCParams {
        n_particles: 20_000,
        seed: 5,
        substeps: 1,
        record_every: 10,
    };
    let batch = girsanov_batch(&model, &dv, &MeasureSlice::Grid(m0), &mc).unwrap();
    let d = girsanov_diagnostics(&batch);
    let (m, se) = (*d.mean_m.last().unwrap(), *d.stderr_m.last().unwrap());
    assert!((m - 1.0).abs() < 4.0 * se, "{m} ± {se}");
    assert!(d.mean_m_x2.iter().all(|v| v.is_finite()));
    assert!(!d.flagged);
}

#[test]
fn value_matches_simulated_cost_and_derivative() {
    let model = lq_model(0.5);
    let grid = coarse_grid();
    let mesh = mesh(0.5, 5e-3);
    let m0 = m0(grid);
    let cfg = FixedPointConfig::default();
    let out = solve_mftc(&model, &m0, &mesh, &grid, &cfg).unwrap();
    let phi = value_from_solution(&model, &out.solution, &out.flow)
        .unwrap()
        .phi;
    let mc = MCParams {
        n_particles: 20_000,
        seed: 9,
        ..MCParams::default()
    };
    let j = mc_cost(&model, &out.solution.policy, &m0, &mc).unwrap();
    assert!(
        (j.value - phi).abs() < 4.0 * j.stderr + 1e-2,
        "{j:?} vs {phi}"
    );
    let check =
        value_derivative_check(&model, &out.solution, &out.flow, |_| 1.0, 1e-3, &cfg).unwrap();
    assert!(check.discrepancy < 5e-3, "{check:?}");
}

#[test]
fn wide_initial_law_does_not_leak() {
    let grid = default_grid();
    let mesh = mesh(0.5, 1e-3);
    let m0 = mftc_core::measure::GridDensity::gaussian(grid, 0.0, 1.0).unwrap();
    let zero = mftc_core::VectorField::zeros(mesh, grid);
    let flow =
        mftc_core::pde::solve_forward_fp(&zero, 1.0, &mesh, &grid, &m0, BoundaryPolicy::default())
            .unwrap();
    assert!(flow.leak() < 1e-8, "{}", flow.leak());
    let var = flow
        .slice(mesh.n_steps())
        .as_measure()
        .integrate(&|x| x * x);
    assert!((var - 1.5).abs() < 1e-3, "{var}");
}
