//! Cross-module invariants as property tests.

use fbsvie::bsde::{noise_states, solve_bsde, BsdeOptions, DriverInput};
use fbsvie::cli::scenario_hash;
use fbsvie::control::{adjoint_product, lambda_adjoint, optimal_consumption, ControlFn};
use fbsvie::fsvie::{simulate_fsvie, simulate_with_rates, PositivityGuard};
use fbsvie::malliavin::{hida_derivative_brownian, hida_derivative_jump, Functional};
use fbsvie::model::{GammaConvention, Initial, Kernel, LevyMeasure, ScenarioSpec, TimeGrid};
use fbsvie::paths::NoiseBundle;
use fbsvie::stats::Estimate;
use proptest::prelude::*;

fn small(n: usize) -> ScenarioSpec {
    ScenarioSpec::reference().with_grid(TimeGrid::new(1.0, n).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn kernels_evaluate_on_every_grid_pair(a in -1.0f64..1.0, rate in 0.0f64..5.0, n in 2usize..30) {
        let grid = TimeGrid::new(1.0, n).unwrap();
        for k in [Kernel::Constant(a), Kernel::ExpDecay { amplitude: a, rate }] {
            for i in 0..=n {
                for j in 0..=i {
                    let v = k.eval(&grid, grid.node(i), grid.node(j)).unwrap();
                    prop_assert!((v - k.at(&grid, i, j)).abs() <= 1e-12 * (1.0 + v.abs()));
                }
            }
        }
    }

    #[test]
    fn exp_decay_derivative_matches_central_differences(a in -1.0f64..1.0, rate in 0.1f64..3.0, s in 0.0f64..0.4) {
        let k = Kernel::ExpDecay { amplitude: a, rate };
        let t = 0.7;
        let exact = k.d_dt(t, s).unwrap();
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let err = |h: f64| {
            let fd = (k.eval(&grid, t + h, s).unwrap() - k.eval(&grid, t - h, s).unwrap()) / (2.0 * h);
            (fd - exact).abs()
        };
        // second order: halving h divides the error by about four
        let (e1, e2) = (err(1e-2), err(5e-3));
        prop_assert!(e1 <= rate.powi(3) * a.abs() * 1e-4 + 1e-13);
        prop_assert!(e2 <= e1 / 3.0 + 1e-13);
    }

    #[test]
    fn forward_state_is_linear_in_the_initial_value(scale in 0.1f64..10.0, seed in 0u64..1000) {
        let s = small(20).with_atom(-0.1, 0.5).unwrap();
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 16, seed, 4).unwrap();
        let mut t = s.clone();
        t.xi = Initial::Constant(scale);
        let c = ControlFn::constant(0.5);
        let x = simulate_fsvie(&s, &noise, &c).unwrap();
        let y = simulate_fsvie(&t, &noise, &c).unwrap();
        for p in 0..16 {
            for i in 0..=20 {
                prop_assert!((y.x(p, i) - scale * x.x(p, i)).abs() <= 1e-12 * y.x(p, i).abs().max(1.0));
            }
        }
    }

    #[test]
    fn constant_kernels_collapse_to_euler(alpha in -0.5f64..0.5, beta in 0.0f64..0.5, size in -0.3f64..0.3, seed in 0u64..1000) {
        let mut s = small(25).with_atom(size, 1.5).unwrap();
        s.alpha = Kernel::Constant(alpha);
        s.beta = Kernel::Constant(beta);
        let noise = NoiseBundle::generate(&s.grid, &s.levy, 8, seed, 4).unwrap();
        let rates = vec![0.3; 25];
        let x = simulate_with_rates(&s, &noise, &rates, PositivityGuard::Off).unwrap();
        let dt = s.grid.dt();
        for p in 0..8 {
            let mut e = 1.0;
            for i in 0..25 {
                prop_assert!((x.x(p, i) - e).abs() <= 1e-12 * e.abs().max(1.0));
                e *= 1.0 + (alpha - 0.3) * dt + beta * noise.increment(p, i) + size * noise.compensated_count(p, i, 0);
            }
        }
    }

    #[test]
    fn optimal_consumption_depends_only_on_gamma(
        xi in 0.1f64..5.0, alpha in -0.5f64..0.5, beta in 0.0f64..1.0, g in -1.0f64..1.0,
    ) {
        let base = small(40).with_constant_gamma(g);
        let mut other = base.clone().with_atom(-0.2, 0.7).unwrap();
        other.xi = Initial::Constant(xi);
        other.alpha = Kernel::Constant(alpha);
        other.beta = Kernel::Constant(beta);
        prop_assert_eq!(ControlFn::cstar().rates(&base).unwrap(), ControlFn::cstar().rates(&other).unwrap());
        for conv in [GammaConvention::Discounting, GammaConvention::PaperOde] {
            let lambda = lambda_adjoint(&base.gamma, &base.grid, conv);
            let p = adjoint_product(&base.gamma, &base.grid, conv);
            let c = match optimal_consumption(&base.gamma, &base.grid, conv) {
                ControlFn::DeterministicTable { values } => values,
                _ => unreachable!(),
            };
            for i in 0..40 {
                prop_assert!((c[i] * p[i] - lambda[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hash_changes_with_every_meaningful_field(seed in 0u64..10_000, g in 0.01f64..1.0, n in 10usize..200) {
        let s = ScenarioSpec::reference();
        let h = scenario_hash(&s);
        prop_assert_eq!(&h, &scenario_hash(&s.clone().validated().unwrap()));
        let mut a = s.clone();
        a.mc.seed = seed + 43;
        prop_assert_ne!(&h, &scenario_hash(&a));
        prop_assert_ne!(&h, &scenario_hash(&s.clone().with_constant_gamma(g)));
        if n != 100 {
            prop_assert_ne!(&h, &scenario_hash(&s.clone().with_grid(TimeGrid::new(1.0, n).unwrap()).unwrap()));
        }
    }

    #[test]
    fn stopped_functionals_have_no_later_derivative(stop in 0usize..12, k in 0usize..12, a in -2.0f64..2.0) {
        let grid = TimeGrid::new(1.0, 12).unwrap();
        let levy = LevyMeasure::single(0.3, 1.0).unwrap();
        let b = Functional::brownian(&grid);
        let n = Functional::compensated_total(&grid, &levy);
        let f = b.pow(2).unwrap().scale(a).add(&b.mul(&n).unwrap()).stopped_at(stop);
        if k >= stop {
            prop_assert!(hida_derivative_brownian(&f, k).is_zero());
            prop_assert!(hida_derivative_jump(&f, k, 0).is_zero());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn bsde_comparison(bump in 0.0f64..0.5, seed in 0u64..100) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let noise = NoiseBundle::generate(&grid, &LevyMeasure::empty(), 4_000, seed, 4).unwrap();
        let base: Vec<f64> = (0..4_000).map(|p| noise.brownian_level(p, 20).abs()).collect();
        let higher: Vec<f64> = base.iter().map(|v| v + bump * v.min(1.0)).collect();
        let driver = |d: &DriverInput<'_>| -0.5 * d.y;
        let states = noise_states(&noise);
        let lo = solve_bsde(&base, &driver, &noise, &states, BsdeOptions::default()).unwrap().y0();
        let hi = solve_bsde(&higher, &driver, &noise, &states, BsdeOptions::default()).unwrap().y0();
        prop_assert!(hi.value >= lo.value - 3.0 * hi.se.hypot(lo.se));
    }

    #[test]
    fn linear_driver_matches_integrating_factor(a in -1.0f64..1.0, b in 0.0f64..1.0) {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let noise = NoiseBundle::generate(&grid, &LevyMeasure::empty(), 64, 1, 4).unwrap();
        // Y' = −(aY + b), Y(1) = 1
        let driver = |d: &DriverInput<'_>| a * d.y + b;
        let y0 = solve_bsde(&[1.0; 64], &driver, &noise, &noise_states(&noise), BsdeOptions::default())
            .unwrap()
            .y0();
        let exact = if a.abs() < 1e-12 { 1.0 + b } else { a.exp() + b * a.exp_m1() / a };
        prop_assert!((y0.value - exact).abs() <= 0.02 * exact.abs().max(0.1), "{:?} vs {}", y0, exact);
    }
}

#[test]
fn compensated_jumps_are_centred_with_the_right_variance() {
    let grid = TimeGrid::new(2.0, 50).unwrap();
    let levy = LevyMeasure::new(vec![
        fbsvie::model::JumpAtom { size: 0.5, weight: 1.5 },
        fbsvie::model::JumpAtom { size: -0.2, weight: 0.5 },
    ])
    .unwrap();
    let noise = NoiseBundle::generate(&grid, &levy, 40_000, 9, 8).unwrap();
    let step = Estimate::from_samples(
        &(0..noise.n_paths()).map(|p| noise.compensated_jump_sum(p, 17, |e| e)).collect::<Vec<_>>(),
    );
    assert!(step.within(0.0, 3.0), "{step:?}");
    let total: Vec<f64> = (0..noise.n_paths())
        .map(|p| (0..50).map(|i| noise.compensated_jump_sum(p, i, |_| 1.0)).sum())
        .collect();
    let mean = Estimate::from_samples(&total);
    assert!(mean.within(0.0, 3.0), "{mean:?}");
    let sq: Vec<f64> = total.iter().map(|v| v * v).collect();
    let var = Estimate::from_samples(&sq);
    assert!(var.within(levy.total_mass() * 2.0, 3.0), "{var:?}");
}
