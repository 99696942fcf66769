use mflq::cli::parse_problem;
use mflq::equilibrium::*;
use mflq::linops::{Mat, Vector};
use mflq::model::{FeedbackStrategy, GameSpec, Profile};
use mflq::riccati::{solve, Mode, SolveOptions, Solution};

fn spec(json: &str) -> GameSpec {
    parse_problem(json).unwrap().0
}

fn solved(g: &GameSpec) -> Solution {
    solve(g, Mode::Control, &SolveOptions::default()).unwrap()
}

fn scalar_forced(kind: &str, rate: f64) -> GameSpec {
    spec(&format!(
        r#"{{"n":1,"m1":1,"m2":0,"dynamics":{{"A":[[-1]],"B1":[[1]]}},"players":[{{"Q":[[1]],"R11":[[1]]}}],
            "forcing":[{{"kind":"{kind}","amplitude":[1],"rate":{rate}}}]}}"#
    ))
}

#[test]
fn scalar_offset_for_drift_forcing() {
    // P = √2 − 1, closed loop −√2; η̄ = P/(1 + √2) = 3 − 2√2 and v* = −η̄.
    let g = scalar_forced("b", 1.0);
    let off = solve_offsets(&g, &solved(&g)).unwrap();
    let eta = off.eta_bar[0].at(1.0, 1)[0];
    assert!((eta - (3.0 - 2.0 * 2f64.sqrt())).abs() < 1e-12, "{eta}");
    assert!((off.v_star.at(1.0, 1)[0] + eta).abs() < 1e-12);
    assert!(off.range_residuals.iter().all(|(_, r)| *r < 1e-12));
}

#[test]
fn scalar_offset_for_state_weight() {
    let g = scalar_forced("q1", 2.0);
    let off = solve_offsets(&g, &solved(&g)).unwrap();
    let eta = off.eta_bar[0].at(2.0, 1)[0];
    assert!((eta - 1.0 / (2.0 + 2f64.sqrt())).abs() < 1e-12, "{eta}");
}

#[test]
fn unforced_problem_has_no_offset() {
    let g = spec(r#"{"n":1,"m1":1,"m2":0,"dynamics":{"A":[[1]],"B1":[[1]]},"players":[{"Q":[[1]],"R11":[[1]]}]}"#);
    let s = synthesize_strategy(&g, &solved(&g), None).unwrap();
    assert!(s.offset.is_empty());
}

const NOISY: &str = r#"{"n":1,"m1":1,"m2":0,
  "dynamics":{"A":[[-1]],"A_bar":[[0.3]],"B1":[[1]],"B1_bar":[[0.2]],"C":[[0.4]],"C_bar":[[0.1]],"D1":[[0.3]]},
  "players":[{"Q":[[1]],"Q_bar":[[0.5]],"R11":[[1]],"R11_bar":[[0.3]]}],
  "forcing":[{"kind":"b","amplitude":[0.5],"rate":1.0},{"kind":"sigma","amplitude":[0.3],"rate":0.5},
             {"kind":"q1","amplitude":[0.2],"rate":1.5},{"kind":"rho1","amplitude":[-0.4],"rate":2.0}]}"#;

/// Cost of a scalar feedback strategy by direct integration of the mean and variance ODEs.
fn moment_oracle(g: &GameSpec, s: &FeedbackStrategy, x0: f64, horizon: f64) -> f64 {
    let d = &g.dynamics;
    let c = &g.players[0];
    let f = |k: mflq::model::ForcingKind, t: f64| g.forcing.profile(k).eval(t, 1)[0];
    let (a, ab, b, bb, cc, cb, dd) = (d.a[(0, 0)], d.a_bar[(0, 0)], d.b[(0, 0)], d.b_bar[(0, 0)], d.c[(0, 0)], d.c_bar[(0, 0)], d.d[(0, 0)]);
    let db = d.d_bar[(0, 0)];
    let (q, qb, r, rb) = (c.q[(0, 0)], c.q_bar[(0, 0)], c.r[(0, 0)], c.r_bar[(0, 0)]);
    let (th, tb) = (s.theta[(0, 0)], s.theta_bar[(0, 0)]);
    use mflq::model::ForcingKind::*;
    // y = (mean, variance, cost)
    let rhs = |t: f64, y: [f64; 3]| -> [f64; 3] {
        let (m, v) = (y[0], y[1]);
        let u_bar = tb * m + s.offset.eval(t, 1)[0];
        let mean_drift = (a + ab) * m + (b + bb) * u_bar + f(B, t);
        let a_th = a + b * th;
        let c_th = cc + dd * th;
        let diff0 = (cc + cb) * m + (dd + db) * u_bar + f(Sigma, t);
        let var = 2.0 * a_th * v + c_th * c_th * v + diff0 * diff0;
        let cost = (q + r * th * th) * v + (q + qb) * m * m + (r + rb) * u_bar * u_bar + 2.0 * f(Q1, t) * m + 2.0 * f(Rho1, t) * u_bar;
        [mean_drift, var, cost]
    };
    let h = 1e-3;
    let mut y = [x0, 0.0, 0.0];
    let steps = (horizon / h).round() as usize;
    for k in 0..steps {
        let t = k as f64 * h;
        let add = |y: [f64; 3], k: [f64; 3], s: f64| [y[0] + s * k[0], y[1] + s * k[1], y[2] + s * k[2]];
        let k1 = rhs(t, y);
        let k2 = rhs(t + h / 2.0, add(y, k1, h / 2.0));
        let k3 = rhs(t + h / 2.0, add(y, k2, h / 2.0));
        let k4 = rhs(t + h, add(y, k3, h));
        for i in 0..3 {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    y[2]
}

#[test]
fn exact_cost_matches_moment_integration() {
    let g = spec(NOISY);
    let sol = solved(&g);
    let s = synthesize_strategy(&g, &sol, None).unwrap();
    for x0 in [0.0, 1.0, -2.5] {
        let exact = exact_cost(&g, &s, 1, &Vector::from_vec(vec![x0])).unwrap();
        let oracle = moment_oracle(&g, &s, x0, 60.0);
        assert!((exact.total - oracle).abs() < 1e-8 * (1.0 + oracle.abs()), "x0={x0}: {} vs {oracle}", exact.total);
    }
}

#[test]
fn exact_cost_of_an_arbitrary_stabilizer() {
    let g = spec(NOISY);
    let mut s = FeedbackStrategy::new(Mat::from_element(1, 1, -0.5), Mat::from_element(1, 1, -1.2));
    s.offset.push(Vector::from_vec(vec![0.3]), 0.7);
    let exact = exact_cost(&g, &s, 1, &Vector::from_vec(vec![1.5])).unwrap();
    let oracle = moment_oracle(&g, &s, 1.5, 60.0);
    assert!((exact.total - oracle).abs() < 1e-8 * (1.0 + oracle.abs()), "{} vs {oracle}", exact.total);
}

#[test]
fn optimal_strategy_beats_perturbed_offsets() {
    let g = spec(NOISY);
    let s = synthesize_strategy(&g, &solved(&g), None).unwrap();
    let x = Vector::from_vec(vec![0.8]);
    let best = exact_cost(&g, &s, 1, &x).unwrap().total;
    for (amp, rate) in [(0.1, 1.0), (-0.2, 0.5), (0.05, 3.0)] {
        let mut p = s.clone();
        p.offset = p.offset.add(&Profile { terms: vec![(Vector::from_vec(vec![amp]), rate)] });
        assert!(exact_cost(&g, &p, 1, &x).unwrap().total > best);
    }
    let mut p = s.clone();
    p.theta[(0, 0)] += 0.1;
    assert!(exact_cost(&g, &p, 1, &x).unwrap().total > best);
}

#[test]
fn value_function_splits_into_parts() {
    let g = spec(NOISY);
    let sol = solved(&g);
    let s = synthesize_strategy(&g, &sol, None).unwrap();
    let x = Vector::from_vec(vec![2.0]);
    let v = value_function(&g, &sol, &s, &x, 1).unwrap();
    assert!((v.quadratic + v.linear + v.constant - v.total).abs() < 1e-14);
    let p_hat = match &sol {
        Solution::Control(c) => c.p_hat.clone(),
        _ => unreachable!(),
    };
    assert!((v.quadratic - homogeneous_value(&p_hat, &x)).abs() < 1e-10);
}

#[test]
fn unstable_strategy_has_no_finite_cost() {
    let g = spec(NOISY);
    let s = FeedbackStrategy::zeros(1, 1);
    let mut bad = s.clone();
    bad.theta_bar[(0, 0)] = 5.0;
    assert!(matches!(exact_cost(&g, &bad, 1, &Vector::from_vec(vec![1.0])), Err(EquilibriumError::NotStabilizing)));
}

fn homogeneous(q: f64, r: f64) -> GameSpec {
    spec(&format!(
        r#"{{"n":1,"m1":1,"m2":0,"dynamics":{{"A":[[-1]],"B1":[[1]],"C":[[0.2]],"D1":[[0.1]]}},
            "players":[{{"Q":[[{q}]],"R11":[[{r}]]}}]}}"#
    ))
}

#[test]
fn convexity_of_positive_weights() {
    let grid = ConvexityGrid { horizon: 2.0, steps: 20 };
    let rep = convexity_check(&homogeneous(1.0, 1.0), 1, grid, false).unwrap();
    assert_eq!(rep.verdict, Verdict::Convex);
    let h = grid.horizon / grid.steps as f64;
    assert!(rep.min_eigenvalue >= 2.0 * h * (1.0 - 1e-9), "{}", rep.min_eigenvalue);
}

#[test]
fn concavity_of_negative_weights() {
    let grid = ConvexityGrid { horizon: 2.0, steps: 20 };
    let rep = convexity_check(&homogeneous(-10.0, -1.0), 1, grid, false).unwrap();
    assert_eq!(rep.verdict, Verdict::Concave);
    assert!(rep.max_eigenvalue < 0.0);
}

#[test]
fn zero_form_counts_as_convex() {
    let grid = ConvexityGrid { horizon: 1.0, steps: 10 };
    let rep = convexity_check(&homogeneous(0.0, 0.0), 1, grid, false).unwrap();
    assert_eq!(rep.verdict, Verdict::Convex);
}

#[test]
fn hessian_agrees_with_direct_cost_evaluation() {
    let g = homogeneous(1.0, 0.5);
    let grid = ConvexityGrid { horizon: 1.0, steps: 5 };
    let hess = convexity_hessian(&g, 1, grid, false).unwrap();
    let k = hess.nrows();
    let z = Vector::from_fn(k, |i, _| ((i * 7 + 3) % 5) as f64 - 2.0);
    // J(z) = ½ zᵀHz for the homogeneous problem from X(0) = 0.
    let direct = discrete_homogeneous_cost(&g, 1, grid, false, &z);
    let quad = 0.5 * z.dot(&(&hess * &z));
    assert!((direct - quad).abs() < 1e-10 * (1.0 + direct.abs()), "{direct} vs {quad}");
}
