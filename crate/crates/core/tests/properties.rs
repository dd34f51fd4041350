use mftc_core::field::{gradient_slice, gradient_transpose};
use mftc_core::majorant::{eta_objective, eta_star, feasibility_windows};
use mftc_core::measure::{wasserstein2_1d, GridDensity, InverseCdf, Measure, ParticleEnsemble};
use mftc_core::model::AssumptionConstants;
use mftc_core::pde::{BackwardStep, BoundaryPolicy};
use mftc_core::quad::quadratic_fit;
use mftc_core::rng::{self, Purpose};
use mftc_core::Grid1D;
use proptest::prelude::*;
use rand::Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn policy(extrapolate: bool) -> BoundaryPolicy {
    if extrapolate {
        BoundaryPolicy::QuadraticExtrapolation
    } else {
        BoundaryPolicy::Neumann
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn backward_step_transpose_is_adjoint(
        drift in prop::collection::vec(-5.0f64..5.0, 12),
        u in prop::collection::vec(-1.0f64..1.0, 12),
        y in prop::collection::vec(-1.0f64..1.0, 12),
        a in 0.1f64..2.0,
        dt in 1e-4f64..1e-1,
        extrapolate: bool,
    ) {
        let step = BackwardStep::new(a, 0.25, dt, &drift, policy(extrapolate));
        let lhs = dot(&step.apply(&u, None).unwrap(), &y);
        let rhs = dot(&u, &step.apply_transpose(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn backward_step_preserves_constants(
        drift in prop::collection::vec(-5.0f64..5.0, 9),
        c in -3.0f64..3.0,
        a in 0.1f64..2.0,
        dt in 1e-4f64..1e-1,
        extrapolate: bool,
    ) {
        let step = BackwardStep::new(a, 0.5, dt, &drift, policy(extrapolate));
        let out = step.apply(&[c; 9], None).unwrap();
        prop_assert!(out.iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn forward_density_conserves_mass(
        drift in prop::collection::vec(-5.0f64..5.0, 21),
        m in prop::collection::vec(0.0f64..1.0, 21),
        dt in 1e-4f64..5e-2,
        extrapolate: bool,
    ) {
        let grid = Grid1D::new(-2.0, 2.0, 21).unwrap();
        let w = grid.weights();
        let step = BackwardStep::new(1.0, grid.dx(), dt, &drift, policy(extrapolate));
        let next = step.forward_density(&m, &w).unwrap();
        prop_assert!((dot(&next, &w) - dot(&m, &w)).abs() < 1e-12);
    }

    #[test]
    fn gradient_transpose_is_adjoint(
        v in prop::collection::vec(-1.0f64..1.0, 15),
        y in prop::collection::vec(-1.0f64..1.0, 15),
        dx in 0.01f64..1.0,
    ) {
        let lhs = dot(&gradient_slice(&v, dx), &y);
        let rhs = dot(&v, &gradient_transpose(&y, dx));
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn inverse_cdf_is_monotone_and_in_range(
        mean in -2.0f64..2.0,
        std in 0.2f64..1.5,
        mut us in prop::collection::vec(0.0f64..1.0, 2..40),
    ) {
        let grid = Grid1D::new(-8.0, 8.0, 161).unwrap();
        let m = GridDensity::gaussian(grid, mean, std).unwrap();
        let inv = InverseCdf::new(&m);
        us.sort_by(f64::total_cmp);
        let xs: Vec<f64> = us.iter().map(|&u| inv.sample(u)).collect();
        prop_assert!(xs.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(xs.iter().all(|x| (-8.0..=8.0).contains(x)));
    }

    #[test]
    fn w2_is_a_symmetric_metric_on_shifts(
        a in prop::collection::vec(-3.0f64..3.0, 1..30),
        shift in -2.0f64..2.0,
    ) {
        let p = ParticleEnsemble::uniform(a.clone(), 0).unwrap();
        let q = ParticleEnsemble::uniform(a.iter().map(|x| x + shift).collect(), 0).unwrap();
        prop_assert!(wasserstein2_1d(&p, &p) < 1e-12);
        let d = wasserstein2_1d(&p, &q);
        prop_assert!((d - wasserstein2_1d(&q, &p)).abs() < 1e-12);
        prop_assert!((d - shift.abs()).abs() < 1e-9);
    }

    #[test]
    fn quadratic_fit_recovers_quadratics(
        c in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let xs: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| c[0] + c[1] * x + c[2] * x * x).collect();
        let fit = quadratic_fit(&xs, &ys);
        for k in 0..3 {
            prop_assert!((fit[k] - c[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn rng_streams_are_reproducible(seed: u64, index: u64) {
        let mut a = rng::stream(seed, Purpose::ParticleSde, index);
        let mut b = rng::stream(seed, Purpose::ParticleSde, index);
        let mut c = rng::stream(seed, Purpose::Girsanov, index);
        let xa: [u64; 4] = std::array::from_fn(|_| a.random());
        let xb: [u64; 4] = std::array::from_fn(|_| b.random());
        let xc: [u64; 4] = std::array::from_fn(|_| c.random());
        prop_assert_eq!(xa, xb);
        prop_assert_ne!(xa, xc);
    }

    #[test]
    fn windows_shrink_as_constants_grow(c in 0.2f64..3.0, bump in 1.01f64..3.0) {
        let base = AssumptionConstants { c, c_t: c, delta: c, ..AssumptionConstants::default() };
        let bigger = AssumptionConstants { c: c * bump, c_t: c * bump, delta: c * bump, ..base };
        let (v0, d0) = feasibility_windows(&base);
        let (v1, d1) = feasibility_windows(&bigger);
        prop_assert!(v1 < v0 && d1 < d0);
    }
}

#[test]
fn eta_root_is_accurate() {
    let eta = eta_star(1e-14).unwrap();
    assert!(eta > 0.5 && eta < 1.0);
    assert!(eta_objective(eta).abs() <= 1e-12);
}

#[test]
fn gaussian_grid_density_moments() {
    let grid = Grid1D::new(-10.0, 10.0, 801).unwrap();
    let m = GridDensity::gaussian(grid, 0.3, 0.8).unwrap();
    assert!((m.mass() - 1.0).abs() < 1e-12);
    assert!((m.mean() - 0.3).abs() < 1e-9);
    assert!((m.integrate(&|x| x * x) - (0.09 + 0.64)).abs() < 1e-4);
}
