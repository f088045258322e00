use frontstab::config::{DataSpec, RunConfig, WeightSpec};
use frontstab::evans::FrameOptions;
use frontstab::kernel::KernelEngine;
use frontstab::linalg::{c, C64};
use frontstab::model::{builtin_models, evaluate_rhs, fisher, parse_model};
use frontstab::operator::WeightedOperator;
use frontstab::profile::closed_form;
use frontstab::spectrum::{essential_curves, projection_at, side_roots, xi_grid, Symbols};
use frontstab::weights::{build_omega, is_subexponential, sample_grid, staircase_weight, standard_weights, WeightKind};
use proptest::prelude::*;
use std::sync::OnceLock;

fn fisher_op() -> &'static WeightedOperator {
    static OP: OnceLock<WeightedOperator> = OnceLock::new();
    OP.get_or_init(|| {
        let m = fisher();
        let p = closed_form(&m, 0.0, 60.0, 0.02).unwrap();
        WeightedOperator::new(m, p, Some(build_omega(2.0 / 6f64.sqrt(), 0.0).unwrap())).unwrap()
    })
}

fn kpp2_sym() -> &'static Symbols {
    static S: OnceLock<Symbols> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = RunConfig::parse("[model]\nname = \"kpp2\"\n").unwrap();
        frontstab::pipeline::setup(&cfg).unwrap().sym
    })
}

fn kernel_engine() -> &'static KernelEngine {
    static E: OnceLock<KernelEngine> = OnceLock::new();
    E.get_or_init(|| KernelEngine::new(fisher_op(), FrameOptions::default(), -15.0, 15.0).unwrap())
}

fn linear_model() -> frontstab::model::SystemModel {
    parse_model(
        r#"
n = 2
d = [1.0, [0.5, 0.1]]
c = 1.5
U_minus = [0.0, 0.0]
U_plus = [0.0, 0.0]
f = [ { component = 0, coef = 0.3, powers = [0, 1] } ]
g = [ { component = 0, coef = -1.0, powers = [1, 0] },
      { component = 1, coef = [0.2, -0.4], powers = [1, 0] } ]
"#,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn jacobian_matches_central_difference(
        us in prop::collection::vec(-2.0f64..2.0, 4),
        hs in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let eps = 1e-5;
        for m in builtin_models() {
            let n = m.n;
            let u: Vec<C64> = us[..n].iter().map(|&x| c(x)).collect();
            let h: Vec<C64> = hs[..n].iter().map(|&x| c(x)).collect();
            let up: Vec<C64> = u.iter().zip(&h).map(|(a, b)| a + eps * b).collect();
            let um: Vec<C64> = u.iter().zip(&h).map(|(a, b)| a - eps * b).collect();
            let jh = m.g.jacobian(&u) * nalgebra::DVector::from_vec(h.clone());
            let (gp, gm) = (m.g.eval(&up), m.g.eval(&um));
            let err = (0..n).map(|k| (jh[k] - (gp[k] - gm[k]) / (2.0 * eps)).norm_sqr()).sum::<f64>().sqrt();
            let hn = h.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            prop_assert!(err <= 1e-6 * hn.max(1e-300), "{}: {err}", m.name);
        }
    }

    #[test]
    fn rhs_is_linear_for_linear_models(alpha in -3.0f64..3.0, seed in prop::collection::vec(-1.0f64..1.0, 40)) {
        let m = linear_model();
        let u: Vec<C64> = seed.iter().map(|&x| c(x)).collect();
        let au: Vec<C64> = u.iter().map(|z| z * alpha).collect();
        let r = evaluate_rhs(&m, &u, 0.1, m.c).unwrap();
        let ra = evaluate_rhs(&m, &au, 0.1, m.c).unwrap();
        for (a, b) in r.iter().zip(&ra) {
            prop_assert!((a * alpha - b).norm() <= 1e-12 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn dispersion_roots_and_sum_rule(re in -1.0f64..3.0, im in -3.0f64..3.0, plus in any::<bool>()) {
        let lam = C64::new(re, im);
        let sym = kpp2_sym();
        let roots = side_roots(sym, plus, lam, None).unwrap();
        prop_assert_eq!(roots.len(), 2 * sym.n);
        for nu in &roots {
            prop_assert!(sym.dispersion(plus, lam, *nu).norm() < 1e-10 * (1.0 + lam.norm()).powi(sym.n as i32));
        }
        let sum: C64 = roots.iter().sum();
        let want = sym.root_sum(plus);
        prop_assert!((sum - want).norm() <= 1e-10 * want.norm().max(1.0));
    }

    #[test]
    fn projection_is_rank_one_idempotent(r in 0.0f64..0.02, phi in 0.0f64..6.283) {
        let sym = kpp2_sym();
        let lam = C64::from_polar(r, phi);
        let n = sym.n;
        let roots = side_roots(sym, true, lam, None).unwrap();
        // nu_1^+ is the root continuing from 0.
        let nu1 = *roots.iter().min_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap()).unwrap();
        let p = projection_at(sym, lam, nu1).unwrap();
        prop_assert!((&p * &p - &p).norm() < 1e-10);
        let sv = p.clone().svd(false, false).singular_values;
        prop_assert!(sv[0] > 1e-6);
        prop_assert!((1..n).all(|k| sv[k] < 1e-10 * sv[0]));
        prop_assert!((p.trace() - c(1.0)).norm() < 1e-10);
    }

    #[test]
    fn omega_is_exact_off_the_ramp(x in 1.0f64..80.0, kappa in 0.1f64..2.0) {
        let om = build_omega(kappa, 0.0).unwrap();
        prop_assert_eq!(om.value(-x), c(1.0));
        prop_assert_eq!(om.value(x), c((-kappa * x).exp()));
    }

    #[test]
    fn staircase_is_monotone_step_function(decay in 0.02f64..0.5, bump in 0.0f64..30.0) {
        let xs = sample_grid(120.0, 0.1);
        let data: Vec<f64> = xs.iter().map(|&x| (-decay * (x - bump).max(0.0)).exp()).collect();
        let w = staircase_weight(&xs, &data, 1.0, 3).unwrap();
        let WeightKind::Staircase(knots) = &w.kind else { panic!("not a staircase") };
        let mut last = 1.0;
        for &x in &xs {
            let v = w.eval(x);
            prop_assert!(v >= last && v >= 1.0);
            last = v;
        }
        for (j, k) in knots.iter().enumerate().skip(1) {
            prop_assert_eq!(w.eval(k - 1e-9), 2f64.powi(j as i32));
            prop_assert_eq!(w.eval(k + 1e-9), 2f64.powi(j as i32 + 1));
            prop_assert_eq!(w.eval(*k), w.eval(k - 1e-9));
        }
    }

    #[test]
    fn kernel_parts_sum_to_kernel(re in 0.05f64..3.0, im in -3.0f64..3.0, fi in 0.0f64..1.0, fj in 0.0f64..1.0) {
        let eng = kernel_engine();
        let len = eng.grid().len();
        let (i, j) = ((fi * (len - 1) as f64) as usize, (fj * (len - 1) as f64) as usize);
        let r = eng.resolvent(C64::new(re, im)).unwrap();
        let p = eng.parts_node(&r, i, j);
        let sum = &p.k1 + &p.k2 + &p.k3 + &p.k4;
        prop_assert!((sum - &p.k).norm() <= 1e-10 * p.k.norm().max(1e-12));
    }

    #[test]
    fn config_round_trip(
        seed in any::<u64>(),
        kappa in prop::option::of(0.0f64..5.0),
        alpha in 0.0f64..1.0,
        times in prop::collection::vec(0.1f64..100.0, 1..4),
        shift in -2.0f64..2.0,
        a in 0.01f64..1.0,
    ) {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.weight.kappa = kappa;
        cfg.contour.alpha = alpha;
        cfg.green.times = times;
        cfg.evolve.data = vec![DataSpec::Shift { s: shift }, DataSpec::WeightedTail { amp: 0.01, eta: a, cutoff: Some(80.0) }];
        cfg.evolve.rho = WeightSpec::Log { a, eta: 0.4, m: 4.0 };
        let text = cfg.canonical().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.canonical().unwrap(), text);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn standard_weights_pass_their_own_constants(a in 0.05f64..0.3) {
        for w in standard_weights(a, 0.4, 4.0).unwrap() {
            let ch = is_subexponential(&w, w.eta, w.m, &sample_grid(500.0, 0.05));
            prop_assert!(ch.passed, "{}: {ch:?}", w.name);
        }
    }

    #[test]
    fn phase_of_shifted_front(s in -0.5f64..0.5, amp in 0.0f64..0.05) {
        use frontstab::evolve::phase_shift;
        let op = fisher_op();
        let xs: Vec<f64> = (0..=1200).map(|i| -60.0 + 0.1 * i as f64).collect();
        let bump = |x: f64| amp * (-(x - 3.0) * (x - 3.0)).exp();
        let u0: Vec<C64> = xs.iter().map(|&x| op.profile.eval(x - s).0[0] + bump(x)).collect();
        let ph = phase_shift(op, &xs, &u0).unwrap();
        prop_assert!((ph.x_inf - s).abs() < 1e-6, "{} vs {s}", ph.x_inf);
        // Undoing the shift leaves no phase.
        let back: Vec<C64> = xs.iter().map(|&x| op.profile.eval(x).0[0] + bump(x + s)).collect();
        let ph0 = phase_shift(op, &xs, &back).unwrap();
        prop_assert!(ph0.x_inf.abs() < 1e-6);
    }
}

#[test]
fn essential_curves_stable_under_refinement() {
    let sym = Symbols::from_operator(fisher_op());
    let coarse = xi_grid(0.0, 5.0, 0.02);
    let fine = xi_grid(0.0, 5.0, 0.01);
    for plus in [false, true] {
        let a = essential_curves(&sym, plus, &coarse).unwrap();
        let b = essential_curves(&sym, plus, &fine).unwrap();
        for (i, _) in coarse.iter().enumerate() {
            for k in 0..sym.n {
                assert!((a.curves[k][i] - b.curves[k][2 * i]).norm() < 1e-8);
            }
        }
    }
}

#[test]
fn equilibria_are_rhs_fixed_points() {
    for m in builtin_models() {
        for u in [&m.u_minus, &m.u_plus] {
            let grid: Vec<C64> = (0..16).flat_map(|_| u.iter().cloned()).collect();
            let r = evaluate_rhs(&m, &grid, 0.1, m.c).unwrap();
            assert!(r.iter().all(|z| z.norm() < 1e-12), "{}", m.name);
        }
    }
}
