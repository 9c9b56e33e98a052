use nalgebra::{DMatrix, DVector};
use netsmpc::channel::{g_sequence, realize_sg_diag, stacked_applied_control, HMode};
use netsmpc::compensator::{estimator_error_step, CompensatorState};
use netsmpc::config::benchmark_system;
use netsmpc::model::{CostWeights, HorizonStack};
use netsmpc::policy::{extremal_psi, input_constraint_rows, PolicyParams, SaturationFn};
use proptest::prelude::*;

fn vec_strategy(n: usize, r: f64) -> impl Strategy<Value = DVector<f64>> {
    prop::collection::vec(-r..r, n).prop_map(DVector::from_vec)
}

/// Causal policy for horizon `n`, m = 1, d = 4.
fn policy_strategy(n: usize) -> impl Strategy<Value = PolicyParams> {
    (
        vec_strategy(n, 3.0),
        prop::collection::vec(-2.0..2.0f64, n * n * 4),
    )
        .prop_map(move |(eta, raw)| {
            let mut p = PolicyParams::zeros(n, 1, 4);
            p.eta = eta;
            for i in 0..n {
                for j in 0..=i {
                    for k in 0..4 {
                        p.theta[(i, j * 4 + k)] = raw[(i * n + j) * 4 + k];
                    }
                }
            }
            p
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn saturation_is_odd_and_bounded(x in -1e3..1e3f64) {
        for sat in [SaturationFn::Sigmoid, SaturationFn::Clip { limit: 2.5 }] {
            prop_assert!((sat.apply(x) + sat.apply(-x)).abs() < 1e-12);
            prop_assert!(sat.apply(x).abs() <= sat.phi_max());
        }
    }

    /// Any disturbance history within ±φ_max keeps a row-feasible policy inside the input box.
    #[test]
    fn feasible_rows_bound_every_input(
        p in policy_strategy(4),
        u_r in vec_strategy(4, 2.0),
        psi in prop::collection::vec(vec_strategy(4, 1.0), 4),
    ) {
        let u_max = 5.0;
        let rows = input_constraint_rows(&p, &u_r, 1.0, u_max);
        let psi_hist: Vec<_> = psi.iter().map(|v| v.map(|x| SaturationFn::Sigmoid.apply(10.0 * x))).collect();
        for (i, row) in rows.iter().enumerate() {
            let u = p.compute_control(&u_r.rows(i, 1).into_owned(), &psi_hist, i).unwrap();
            if row.satisfied {
                prop_assert!(u[0].abs() <= u_max + 1e-12);
            }
            // the extremal realization attains the row bound
            let ext = extremal_psi(&p, &u_r, 1.0, i);
            let hist: Vec<_> = (0..=i).map(|j| ext.rows(j * 4, 4).into_owned()).collect();
            let worst = p.compute_control(&u_r.rows(i, 1).into_owned(), &hist, i).unwrap();
            prop_assert!((worst[0].abs() - (u_max - row.margin)).abs() < 1e-9);
        }
    }

    /// Stacked prediction equals the step-by-step recursion.
    #[test]
    fn stacked_error_matches_recursion(
        e0 in vec_strategy(4, 5.0),
        ue in vec_strategy(5, 5.0),
        w in vec_strategy(20, 2.0),
    ) {
        let sys = benchmark_system();
        let stack = HorizonStack::build(&sys, &CostWeights::identity(4, 1), 5, 3).unwrap();
        let stacked = stack.stacked_error(&e0, &ue, &w).unwrap();
        let mut e = e0.clone();
        for l in 0..5 {
            prop_assert!((stacked.rows(l * 4, 4) - &e).amax() < 1e-9 * (1.0 + e.amax()));
            e = &sys.a * &e + &sys.b * ue[l] + w.rows(l * 4, 4);
        }
        prop_assert!((stacked.rows(20, 4) - &e).amax() < 1e-9 * (1.0 + e.amax()));
    }

    /// Realized selection matrices are 0/1 with 𝒮 ≤ 𝒢 on the buffered blocks.
    #[test]
    fn selection_diagonals_are_ordered(nu in prop::collection::vec(any::<bool>(), 3)) {
        let (s, g) = realize_sg_diag(&nu, 5, 3, 3, 2);
        let latched = g_sequence(&nu);
        for k in 0..10 {
            prop_assert!(s[k] <= g[k]);
            prop_assert!(s[k] == 0.0 || s[k] == 1.0);
            if k / 2 < 3 {
                prop_assert_eq!(g[k] == 1.0, latched[k / 2]);
            }
        }
    }

    /// Applied input splits into reference, nominal and feedback parts for either actuator mode.
    #[test]
    fn applied_input_decomposes(
        nu in prop::collection::vec(any::<bool>(), 3),
        u_r in vec_strategy(5, 3.0),
        p in policy_strategy(5),
        psi in vec_strategy(20, 1.0),
    ) {
        let (s, g) = realize_sg_diag(&nu, 5, 3, 3, 1);
        let s = DMatrix::from_diagonal(&DVector::from_vec(s));
        let g = DMatrix::from_diagonal(&DVector::from_vec(g));
        let eye = DMatrix::<f64>::identity(5, 5);
        let u_g = stacked_applied_control(&s, &g, HMode::EqualsG, &u_r, &p.eta, &p.theta, &psi);
        let u_i = stacked_applied_control(&s, &g, HMode::EqualsI, &u_r, &p.eta, &p.theta, &psi);
        // the two modes differ only by the reference on dropped blocks
        prop_assert!(((&u_i - &u_g) - (&eye - &g) * &u_r).amax() < 1e-12);
    }

    /// The compensator's estimation error follows the loss-driven recursion exactly.
    #[test]
    fn estimator_error_follows_recursion(
        bits in prop::collection::vec(any::<bool>(), 30),
        noise in prop::collection::vec(vec_strategy(4, 1.0), 30),
        inputs in prop::collection::vec(-5.0..5.0f64, 30),
    ) {
        let sys = benchmark_system();
        let mut x = DVector::zeros(4);
        let mut comp = CompensatorState::new(4, 1);
        let mut e_d = DVector::zeros(4);
        let mut w_prev = DVector::zeros(4);
        let mut u_prev = DVector::zeros(1);
        for t in 0..30 {
            comp.update(&sys, bits[t], bits[t].then_some(&x), &u_prev).unwrap();
            let e_prev = e_d.clone();
            e_d = estimator_error_step(&e_prev, bits[t], &w_prev, &sys);
            prop_assert!((&x - &comp.x_tilde - &e_d).amax() < 1e-9 * (1.0 + x.amax()));
            if t > 0 {
                // w̃ = s (A eᴰ + w)
                let w_tilde = comp.reconstruct_w_tilde(&sys).unwrap();
                let expected = if bits[t] { &sys.a * &e_prev + &w_prev } else { DVector::zeros(4) };
                prop_assert!((w_tilde - expected).amax() < 1e-9 * (1.0 + x.amax()));
            }
            u_prev = DVector::from_element(1, inputs[t]);
            w_prev = noise[t].clone();
            x = sys.step(&x, &u_prev, &w_prev).unwrap();
        }
    }
}
