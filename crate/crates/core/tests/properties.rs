use std::sync::Arc;

use bsde_core::condexp::{lsmc_fit, quad_project, RegressionBasis, StateFunction, WeightKind};
use bsde_core::make_grid;
use bsde_core::metrics::{scheme_error, Evaluation};
use bsde_core::models::*;
use bsde_core::oracle::{brute_force_dp, closed_form};
use bsde_core::paths::{simulate, WeightVariant};
use bsde_core::rng::GaussianStream;
use bsde_core::schemes::{solve, Backend, QuadSpec, SchemeKind};
use proptest::prelude::*;

const BETAS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[test]
fn theta_bound_holds_on_the_full_sweep() {
    for beta in BETAS {
        for theta in [0.25, 0.5, 0.75, 1.0] {
            for n in [4, 16, 64, 256, 1024] {
                let c = make_grid(1.0, n, beta).unwrap().theta_bound(theta).unwrap();
                assert!(c.holds, "beta {beta} theta {theta} N {n}: {c:?}");
            }
        }
    }
}

#[test]
fn grids_are_deterministic_and_monotone_in_beta() {
    for n in [3, 17, 100] {
        let a = make_grid(2.0, n, 0.6).unwrap();
        let b = make_grid(2.0, n, 0.6).unwrap();
        assert!(a.points().iter().zip(b.points()).all(|(x, y)| x.to_bits() == y.to_bits()));
        for w in BETAS.windows(2) {
            let lo = make_grid(2.0, n, w[0]).unwrap();
            let hi = make_grid(2.0, n, w[1]).unwrap();
            for i in 1..n {
                assert!(lo.t(i) > hi.t(i), "N {n} i {i}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn kernel_bound_on_random_tuples(
        b in 0usize..5,
        delta in 0.05f64..=1.0,
        rho in 0.05f64..=1.0,
        n in 2usize..200,
        a in 0.0f64..1.0,
        c in 0.0f64..1.0,
    ) {
        let grid = make_grid(1.0, n, BETAS[b]).unwrap();
        let k = 1 + ((n as f64 * c) as usize).min(n - 1);
        let i = ((k as f64 * a) as usize).min(k - 1);
        let chk = grid.kernel_bound(delta, rho, i, k).unwrap();
        prop_assert!(chk.holds, "{chk:?} beta {} i {i} k {k} N {n}", BETAS[b]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn right_inverse_is_bounded(x in -20.0f64..20.0, t in 0.0f64..1.0) {
        let model = SdeModel::tanh(0.0, 0.3, 1.0, 0.5).unwrap();
        let inv = model.sigma_right_inverse(t, &[x]).unwrap();
        let sig = model.vol_matrix(t, &[x]);
        prop_assert!(inv.norm() <= sig.norm() / model.ellipticity_lb() * (1.0 + 1e-12));
        // x -> 1/σ(x) has Lipschitz constant s1 / (s0 - |s1|)^2 = 2.
        let h = 1e-4;
        let fd = (model.sigma_right_inverse(t, &[x + h]).unwrap()[(0, 0)] - inv[(0, 0)]).abs() / h;
        prop_assert!(fd <= 2.0 + 1e-6);
    }

    #[test]
    fn truncation_is_idempotent(z in proptest::collection::vec(-10.0f64..10.0, 1..4), level in 0.0f64..5.0) {
        let once = truncate(&z, level);
        prop_assert_eq!(truncate(&once, level), once);
    }

    #[test]
    fn cuts_compose_to_the_larger_level(
        e1 in 0.01f64..0.9, e2 in 0.01f64..0.9,
        t in 0.0f64..1.0, x in -2.0f64..2.0, y in -2.0f64..2.0, z in -3.0f64..3.0,
    ) {
        let base = Driver::truncated_quadratic(1.0, 0.5, 1.0, 0.5, 1).unwrap();
        let twice = cut_driver(&cut_driver(&base, e1).unwrap(), e2).unwrap();
        let once = cut_driver(&base, e1.max(e2)).unwrap();
        prop_assert_eq!(twice.eval(t, &[x], y, &[z]), once.eval(t, &[x], y, &[z]));
        prop_assert_eq!(twice.cut_level(), once.cut_level());
    }

    #[test]
    fn gamma_respects_both_minima(alpha in 0.01f64..=1.0, tl in 0.01f64..=1.0, tc in 0.01f64..=1.0) {
        let g = gamma_exponent(alpha, tl, tc).unwrap();
        prop_assert!(g <= tc && g <= (alpha + tl) / 2.0 + 1e-15);
    }
}

#[test]
fn weight_second_moments_respect_the_derivative_bound() {
    let (s0, s1) = (1.0, 0.5);
    let model = SdeModel::tanh(0.1, 0.3, s0, s1).unwrap();
    let grid = make_grid(1.0, 8, 0.7).unwrap();
    let batch = simulate(&model, &grid, 20_000, 4).unwrap();
    let inv_sup = 1.0 / (s0 - s1);
    for i in [0, 3, 6] {
        let set = batch.malliavin_weights(i, WeightVariant::Consistent).unwrap();
        let d_moment = (i..=grid.steps())
            .map(|k| {
                let d = batch.malliavin_derivative(i, k).unwrap();
                d.iter().map(|v| v * v).sum::<f64>() / batch.paths() as f64
            })
            .fold(0.0, f64::max);
        for j in i + 1..=grid.steps() {
            let h2 = set.at(j).iter().map(|v| v * v).sum::<f64>() / batch.paths() as f64;
            let lhs = (grid.t(j) - grid.t(i)) * h2;
            assert!(lhs <= inv_sup * inv_sup * d_moment * 1.1, "i {i} j {j}: {lhs}");
        }
    }
}

#[test]
fn flow_inverse_defect_is_small() {
    let model = SdeModel::tanh(0.0, 0.5, 1.0, 0.4).unwrap();
    let batch = simulate(&model, &make_grid(1.0, 64, 0.5).unwrap(), 500, 2).unwrap();
    assert!(batch.max_flow_inverse_defect() < 1e-8);
}

#[test]
fn constant_coefficient_paths_follow_the_exact_transition() {
    let (x0, b, s) = (0.3, 0.2, 0.8);
    let model = SdeModel::brownian(x0, b, s).unwrap();
    let grid = make_grid(1.5, 12, 0.6).unwrap();
    let batch = simulate(&model, &grid, 50, 9).unwrap();
    for m in 0..50 {
        let mut stream = GaussianStream::new(9, m as u64, 1);
        let mut x = x0;
        let mut xi = [0.0];
        for k in 0..12 {
            stream.fill_step(k, &mut xi);
            let dt = grid.dt(k);
            x = x + b * dt + s * (xi[0] * dt.sqrt());
            assert_eq!(x.to_bits(), batch.state(m, k + 1)[0].to_bits());
        }
    }
}

#[test]
fn two_stage_regression_matches_one_stage() {
    let model = SdeModel::brownian(0.0, 0.1, 1.0).unwrap();
    let grid = make_grid(1.0, 3, 1.0).unwrap();
    let batch = simulate(&model, &grid, 50_000, 12).unwrap();
    let basis = RegressionBasis::polynomial(2);
    let g: Vec<f64> = (0..batch.paths()).map(|m| 1.0 + 2.0 * batch.state(m, 3)[0]).collect();
    let inner = lsmc_fit(&batch, 2, &g, &basis).unwrap();
    let staged: Vec<f64> = (0..batch.paths()).map(|m| inner.eval(batch.state(m, 2))).collect();
    let two = lsmc_fit(&batch, 1, &staged, &basis).unwrap();
    let one = lsmc_fit(&batch, 1, &g, &basis).unwrap();
    for x in [-0.8, 0.0, 0.5, 1.0] {
        let se = one.prediction_se(&[x]).hypot(two.prediction_se(&[x]));
        assert!((one.eval(&[x]) - two.eval(&[x])).abs() <= 5.0 * se, "{x}");
    }
}

#[test]
fn regression_agrees_with_quadrature_on_the_bulk() {
    // The conditional expectation of X^2 + X lies in the cubic span, so any
    // disagreement beyond sampling error would be a defect of either backend.
    let model = SdeModel::brownian(0.0, 0.0, 1.0).unwrap();
    let grid = make_grid(1.0, 4, 1.0).unwrap();
    let g = |x: &[f64]| x[0] * x[0] + x[0];
    let batch = simulate(&model, &grid, 200_000, 21).unwrap();
    let targets: Vec<f64> = (0..batch.paths()).map(|m| g(batch.state(m, 4))).collect();
    let fit = lsmc_fit(&batch, 3, &targets, &RegressionBasis::polynomial(3)).unwrap();
    let quad = quad_project(&model, &grid, 3, 4, &StateFunction::from_fn(g), WeightKind::Plain, 16).unwrap();
    let mut xs = batch.states_at(3);
    xs.sort_by(f64::total_cmp);
    for q in 1..=9 {
        let x = xs[q * xs.len() / 10 - 1];
        let diff = (fit.eval(&[x]) - quad.eval(&[x])).abs();
        assert!(diff <= 5.0 * fit.prediction_se(&[x]), "x {x}: {diff} vs se {}", fit.prediction_se(&[x]));
    }
}

fn bm() -> SdeModel {
    SdeModel::brownian(0.0, 0.0, 1.0).unwrap()
}

#[test]
fn schemes_agree_with_the_projection_at_zero_driver() {
    let term = TerminalCondition::capped_call(0.1, 0.8).unwrap();
    let zero = Driver::zero(1.0).unwrap();
    let exact = closed_form(&bm(), &term, &zero).unwrap();
    let grid = make_grid(1.0, 16, 0.6).unwrap();
    let backend = Backend::Quadrature(QuadSpec::for_problem(&bm(), &term));
    let e = solve(SchemeKind::Euler, &bm(), &zero, &term, &grid, &backend, None).unwrap();
    let m = solve(SchemeKind::Malliavin, &bm(), &zero, &term, &grid, &backend, None).unwrap();
    for i in 0..16 {
        for x in [-1.5, -0.3, 0.0, 0.4, 1.2] {
            let want = exact.y(grid.t(i), &[x]);
            assert!((e.y(i, &[x]) - want).abs() < 1e-7, "euler {i} {x}");
            assert!((m.y(i, &[x]) - want).abs() < 1e-7, "malliavin {i} {x}");
        }
    }
    for x in [-2.0, 0.1, 0.5, 0.9, 3.0] {
        assert_eq!(e.y(16, &[x]), term.eval(&[x]));
        assert_eq!(m.y(16, &[x]), term.eval(&[x]));
    }
}

#[test]
fn comparison_principle_spot_check() {
    let term = TerminalCondition::capped_call(0.0, 1.0).unwrap();
    let driver = Driver::affine(1.0, 0.5, vec![0.3], 0.2).unwrap();
    let grid = make_grid(1.0, 12, 0.5).unwrap();
    let backend = Backend::Quadrature(QuadSpec::for_problem(&bm(), &term));
    for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
        let sol = solve(scheme, &bm(), &driver, &term, &grid, &backend, None).unwrap();
        for i in 0..=12 {
            for k in -40..=40 {
                let x = k as f64 * 0.1;
                assert!(sol.y(i, &[x]) >= -1e-10, "{scheme:?} {i} {x}");
            }
        }
    }
}

#[test]
fn error_decreases_under_refinement() {
    let bm = bm();
    let zero = Driver::zero(1.0).unwrap();
    let affine = Driver::affine(1.0, 0.5, vec![0.0], 0.0).unwrap();
    let cases = [
        (SchemeKind::Euler, TerminalCondition::capped_call(0.0, 1.0).unwrap(), zero.clone()),
        (SchemeKind::Euler, TerminalCondition::indicator(0.0), zero),
        (SchemeKind::Malliavin, TerminalCondition::capped_call(0.0, 1.0).unwrap(), affine),
    ];
    for (scheme, term, driver) in cases {
        let reference = closed_form(&bm, &term, &driver).unwrap();
        let backend = Backend::Quadrature(QuadSpec::for_problem(&bm, &term));
        let err = |n: usize| {
            let grid = make_grid(1.0, n, 0.7).unwrap();
            let sol = solve(scheme, &bm, &driver, &term, &grid, &backend, None).unwrap();
            scheme_error(&sol, &reference, &bm, &driver, &term, &Evaluation::new(5000, n as u64)).unwrap().total
        };
        let (coarse, fine) = (err(8), err(32));
        assert!(fine <= 1.1 * coarse, "{scheme:?} {}: {fine} vs {coarse}", term.name());
    }
}

#[test]
fn tree_oracle_converges_in_quadrature_order() {
    let term = TerminalCondition::custom("sine", Arc::new(|x: &[f64]| x[0].sin()), 1.0, Some(1.0), Some(1.0), Some(1.0)).unwrap();
    // A smooth driver: truncation kinks slow Gauss–Hermite convergence well past 1e-9.
    let driver = Driver::affine(1.0, 0.5, vec![0.2], 0.1).unwrap();
    let grid = make_grid(1.0, 3, 0.8).unwrap();
    for scheme in [SchemeKind::Euler, SchemeKind::Malliavin] {
        let a = brute_force_dp(&bm(), &driver, &term, &grid, scheme, 8).unwrap();
        let b = brute_force_dp(&bm(), &driver, &term, &grid, scheme, 12).unwrap();
        assert!((a.root_y() - b.root_y()).abs() <= 1e-9, "{scheme:?}");
        assert!((a.root_z()[0] - b.root_z()[0]).abs() <= 1e-9, "{scheme:?}");
    }
}
