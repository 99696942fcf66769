use mflq::cli::{format_f64, parse_problem, solve_report};
use mflq::linops::{fro, pinv, solve_lyapunov, solve_stochastic_lyapunov, spectral_abscissa, unvech, vech, Mat};
use mflq::model::{intrinsically_same, FeedbackStrategy};
use mflq::riccati::{Mode, SolveOptions};
use proptest::prelude::*;

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0f64..1.0, rows * cols).prop_map(move |v| Mat::from_row_slice(rows, cols, &v))
}

fn json(m: &Mat) -> String {
    let rows: Vec<String> = (0..m.nrows())
        .map(|i| format!("[{}]", (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect::<Vec<_>>().join(",")))
        .collect();
    format!("[{}]", rows.join(","))
}

/// Shifts `m` left so its spectrum sits at or below `−margin`.
fn stable(m: Mat, margin: f64) -> Mat {
    let a = spectral_abscissa(&m);
    let n = m.nrows();
    m - Mat::identity(n, n) * (a + margin).max(0.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn float_format_round_trips(v in prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO) {
        let s = format_f64(v);
        prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{}", s);
    }

    #[test]
    fn penrose_identities(x in mat(4, 2), y in mat(2, 3)) {
        let a = &x * &y;
        let p = pinv(&a, 1e-10).pinv;
        let scale = 1.0 + fro(&a) * fro(&p);
        let tol = 1e-10 * scale * scale;
        prop_assert!(fro(&(&a * &p * &a - &a)) <= tol * (1.0 + fro(&a)));
        prop_assert!(fro(&(&p * &a * &p - &p)) <= tol * (1.0 + fro(&p)));
        let ap = &a * &p;
        let pa = &p * &a;
        prop_assert!(fro(&(&ap - ap.transpose())) <= tol);
        prop_assert!(fro(&(&pa - pa.transpose())) <= tol);
    }

    #[test]
    fn lyapunov_residuals_vanish(f in mat(3, 3), w in mat(3, 3), g in mat(3, 3)) {
        let f = stable(f, 0.5);
        let w = &w * w.transpose();
        let x = solve_lyapunov(&f, &w).unwrap();
        let r = &f * &x + &x * f.transpose() + &w;
        prop_assert!(fro(&r) <= 1e-10 * (1.0 + fro(&w)) * (1.0 + fro(&x)));
        // Keep the stochastic operator stable by damping G.
        let g = g * 0.2;
        let xs = solve_stochastic_lyapunov(&f, &g, &w).unwrap();
        let rs = &f * &xs + &xs * f.transpose() + &g * &xs * g.transpose() + &w;
        prop_assert!(fro(&rs) <= 1e-10 * (1.0 + fro(&w)) * (1.0 + fro(&xs)));
    }

    #[test]
    fn vech_round_trips(m in mat(4, 4)) {
        let s = &m + m.transpose();
        prop_assert_eq!(unvech(&vech(&s), 4), s);
    }

    #[test]
    fn hat_transform_adds_the_mean_field_terms(
        a in mat(2, 2), ab in mat(2, 2), b in mat(2, 1), bb in mat(2, 1), c in mat(2, 2), cb in mat(2, 2)
    ) {
        let text = format!(
            r#"{{"n":2,"m1":1,"m2":0,"dynamics":{{"A":{},"A_bar":{},"B1":{},"B1_bar":{},"C":{},"C_bar":{}}},
                "players":[{{"Q":[[1,0],[0,1]],"R11":[[1]]}}]}}"#,
            json(&a), json(&ab), json(&b), json(&bb), json(&c), json(&cb)
        );
        let d = parse_problem(&text).unwrap().0.dynamics;
        prop_assert!(fro(&(d.a_hat() - (&d.a + &d.a_bar))) == 0.0);
        prop_assert!(fro(&(d.b_hat() - (&d.b + &d.b_bar))) == 0.0);
        prop_assert!(fro(&(d.c_hat() - (&d.c + &d.c_bar))) == 0.0);
        prop_assert!(fro(&(d.d_hat() - (&d.d + &d.d_bar))) == 0.0);
    }

    #[test]
    fn intrinsic_sameness(th in mat(2, 2), tb in mat(2, 2), extra in mat(1, 2), extra_bar in mat(1, 2)) {
        // The second control enters nowhere, so its gains are irrelevant.
        let d = parse_problem(
            r#"{"n":2,"m1":2,"m2":0,"dynamics":{"A":[[0,1],[0,0]],"B1":[[1,0],[0.5,0]],"B1_bar":[[0.1,0],[0,0]],"D1":[[0.2,0],[0,0]]},
                "players":[{"Q":[[1,0],[0,1]],"R11":[[1,0],[0,1]]}]}"#,
        ).unwrap().0.dynamics;
        let s = FeedbackStrategy::new(th.clone(), tb.clone());
        prop_assert!(intrinsically_same(&s, &s, &d));
        let mut t = s.clone();
        t.theta.row_mut(1).copy_from(&(th.row(1) + extra.row(0)));
        t.theta_bar.row_mut(1).copy_from(&(tb.row(1) + extra_bar.row(0)));
        prop_assert!(intrinsically_same(&s, &t, &d));
        let mut u = s.clone();
        u.theta[(0, 0)] += 0.5;
        prop_assert!(!intrinsically_same(&s, &u, &d));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn scaling_the_cost_scales_the_value_not_the_gains(a in mat(2, 2), ab in mat(2, 2), k in 0.1f64..10.0) {
        // Full-rank B makes every such system stabilizable.
        let game = |k: f64| format!(
            r#"{{"n":2,"m1":2,"m2":0,"dynamics":{{"A":{},"A_bar":{},"B1":[[1,0],[0,1]],"C":[[0.2,0],[0.1,0.3]]}},
                "players":[{{"Q":[[{k},0],[0,{k}]],"Q_bar":[[{h},0],[0,0]],"R11":[[{k},0],[0,{k}]]}}]}}"#,
            json(&a), json(&ab), h = 0.5 * k
        );
        let base = solve_report(&parse_problem(&game(1.0)).unwrap().0, Mode::Control, &SolveOptions::default(), false).unwrap();
        let scaled = solve_report(&parse_problem(&game(k)).unwrap().0, Mode::Control, &SolveOptions::default(), false).unwrap();
        prop_assert_eq!(base.1, 0);
        prop_assert_eq!(scaled.1, 0);
        for key in ["P", "P_hat", "Theta", "Theta_bar"] {
            let f = if key.starts_with('P') { k } else { 1.0 };
            for (rb, rs) in base.0.solution[key].iter().zip(&scaled.0.solution[key]) {
                for (x, y) in rb.iter().zip(rs) {
                    prop_assert!((x * f - y).abs() <= 1e-8 * (1.0 + y.abs()), "{} {} vs {}", key, x * f, y);
                }
            }
        }
    }
}
