//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test --test acceptance`. Exits non-zero if any criterion fails.

use std::time::Instant;

use mflq::cli::{parse_problem, solve_report};
use mflq::equilibrium::{nash_certificate, synthesize_strategy, candidate_strategy};
use mflq::linops::{pinv, solve_lyapunov, Mat, Vector};
use mflq::model::{intrinsically_same, zero_sum_reduce, FeedbackStrategy, GameSpec};
use mflq::riccati::{
    are_p_residual, are_phat_residual, finite_horizon_riccati, solve_closedloop_nash_are, solve_control_are, solve_openloop_nash_are, solve_zerosum_are,
    solve_zerosum_openrep_are, FreeComponents, Mode, SolveOptions, Solution, Status,
};
use mflq::simulate::{default_battery, deviation_test, estimate_cost, simulate_closed_loop, DeviationKind, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn load(name: &str) -> GameSpec {
    let p = format!("{}/../../fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    parse_problem(&std::fs::read_to_string(p).unwrap()).unwrap().0
}

fn m(rows: &[&[f64]]) -> Mat {
    Mat::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
}

fn dev(a: &Mat, b: &Mat) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (a - b).abs().max()
}

/// Collects named sub-checks for one criterion.
struct Check {
    ok: bool,
    notes: Vec<String>,
}

impl Check {
    fn new() -> Self {
        Check { ok: true, notes: Vec::new() }
    }

    fn close(&mut self, what: &str, a: &Mat, b: &Mat, tol: f64) {
        let d = dev(a, b);
        let pass = d <= tol;
        self.ok &= pass;
        self.notes.push(format!("{what} {}{d:.1e}", if pass { "" } else { "MISS " }));
    }

    fn that(&mut self, what: &str, pass: bool) {
        self.ok &= pass;
        self.notes.push(format!("{what}{}", if pass { "" } else { " MISS" }));
    }

    fn note(&mut self, s: String) {
        self.notes.push(s);
    }
}

fn report(n: u32, c: Check, failed: &mut Vec<u32>) {
    println!("criterion {n:>2}: {}  {}", if c.ok { "PASS" } else { "FAIL" }, c.notes.join("; "));
    if !c.ok {
        failed.push(n);
    }
}

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn criterion_1() -> Check {
    let mut c = Check::new();
    let g = load("ex5_3.json");
    let z = zero_sum_reduce(&g).unwrap();
    let t = Instant::now();
    let s = solve_zerosum_are(&z, &opts());
    let elapsed = t.elapsed().as_secs_f64();
    let s13 = 13f64.sqrt();
    for r in [1.0, (-1.0 + s13) / 2.0, (-1.0 - s13) / 2.0] {
        let found = s.roots.iter().map(|p| (p[(0, 0)] - r).abs()).fold(f64::INFINITY, f64::min);
        c.that(&format!("root {r:.6} ({found:.0e})"), found <= 1e-8);
    }
    c.close("P_c", &s.pc, &m(&[&[1.0]]), 1e-8);
    c.close("P_c_hat", &s.pc_hat, &m(&[&[8.0]]), 1e-8);
    c.close("Theta", &s.theta, &m(&[&[1.0], &[-3.0]]), 1e-8);
    c.close("Theta_bar", &s.theta_bar, &m(&[&[0.0], &[-1.0]]), 1e-8);
    c.that(&format!("stabilizer ({:?})", s.stabilizer.failure_reason), s.stabilizer.is_stabilizer);
    c.that(&format!("runtime {elapsed:.3}s"), elapsed < 1.0);
    c
}

fn criterion_2() -> Check {
    let mut c = Check::new();
    let g = load("ex5_1.json");
    let z = zero_sum_reduce(&g).unwrap();
    let s = solve_zerosum_are(&z, &opts());
    let p = -1.0 / 3.0;
    c.close("P_c", &s.pc, &m(&[&[p]]), 1e-10);
    c.close("P_c_hat", &s.pc_hat, &m(&[&[2.0]]), 1e-10);
    c.close("Theta", &s.theta, &m(&[&[-5.0 / 3.0], &[-1.0 / 3.0]]), 1e-10);
    c.that(&format!("status {:?}", s.status), s.status == Status::NotStaticStabilizing);
    let (_, code) = solve_report(&g, Mode::ZerosumClosed, &opts(), false).unwrap();
    c.that(&format!("exit {code}"), code == 2);
    let inv = s.sigma_c.clone().try_inverse().unwrap_or_else(|| Mat::from_element(2, 2, f64::NAN));
    let pc = s.pc[(0, 0)];
    c.close("Sigma_c^-1", &inv, &m(&[&[-pc + 1.0, pc], &[pc, -pc - 1.0]]), 1e-12);
    c
}

fn criterion_3() -> Check {
    let mut c = Check::new();
    let g = load("ex5_4.json");
    let z = zero_sum_reduce(&g).unwrap();
    let s = solve_zerosum_are(&z, &opts());
    c.close("P_c", &s.pc, &-Mat::identity(2, 2), 1e-6);
    c.close("P_c_hat", &s.pc_hat, &m(&[&[1.0, 0.0], &[0.0, -1.0]]), 1e-6);
    c.close("Theta", &s.theta, &m(&[&[2.0, 0.5], &[-0.25, -1.0]]), 1e-6);
    c.close("Theta_bar", &s.theta_bar, &m(&[&[-8.0, 0.0], &[0.0, -0.8]]), 1e-6);
    let margins = Mat::from_row_slice(1, 4, &s.sign_margins);
    c.close("sign margins", &margins, &m(&[&[1.0, 0.25, -2.0, -3.75]]), 1e-8);
    c.that(&format!("stabilizer fails ({:?})", s.stabilizer.failure_reason), !s.stabilizer.is_stabilizer);
    c.that(&format!("status {:?}", s.status), s.status == Status::NotStaticStabilizing);
    c
}

fn criterion_4() -> Check {
    let mut c = Check::new();
    let g = load("ex5_5.json");
    let z = zero_sum_reduce(&g).unwrap();
    let open = solve_zerosum_openrep_are(&z, &opts());
    let closed = solve_zerosum_are(&z, &opts());
    c.that(&format!("status {:?}/{:?}", open.status, closed.status), open.status == Status::Solved && closed.status == Status::Solved);
    let p = m(&[&[1.0, 0.0], &[0.0, 0.1]]);
    let ph = m(&[&[1.0, 0.0], &[0.0, 0.5]]);
    c.close("P", &open.pc, &p, 1e-6);
    c.close("P_hat", &open.pc_hat, &ph, 1e-6);
    c.close("P_c", &closed.pc, &p, 1e-6);
    c.close("P_c_hat", &closed.pc_hat, &ph, 1e-6);
    c.close("Theta", &closed.theta, &m(&[&[-0.6667, -0.1667], &[0.0263, 0.1053]]), 2e-3);
    c.close("Theta_bar", &closed.theta_bar, &m(&[&[-1.0, 0.0], &[0.0, 0.3956]]), 2e-3);
    let coincide = [
        dev(&open.pc, &closed.pc),
        dev(&open.pc_hat, &closed.pc_hat),
        dev(&open.theta, &closed.theta),
        dev(&open.theta_bar, &closed.theta_bar),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    c.that(&format!("open/closed coincide {coincide:.1e}"), coincide <= 1e-8);
    c.that("stabilizer", closed.stabilizer.is_stabilizer && open.stabilizer.is_stabilizer);

    // Diagnostic only: the fixture's weights are printed to four decimals. Shift Q, Q̂ so that the
    // displayed P, P̂ solve the equations exactly and see how close the solver then lands.
    let rp = are_p_residual(&z.dynamics, &z.cost, &p);
    let rh = are_phat_residual(&z.dynamics, &z.cost, &p, &ph);
    let mut exact = g.clone();
    for (k, pl) in exact.players.iter_mut().enumerate() {
        let sign = if k == 0 { 1.0 } else { -1.0 };
        pl.q -= &rp * sign;
        pl.q_bar -= (&rh - &rp) * sign;
    }
    let ze = zero_sum_reduce(&exact).unwrap();
    let se = solve_zerosum_are(&ze, &opts());
    c.note(format!(
        "[diagnostic: displayed P leaves residual {:.1e} on the rounded data; with reconstructed weights P dev {:.1e}, P_hat dev {:.1e}]",
        rp.norm().max(rh.norm()),
        dev(&se.pc, &p),
        dev(&se.pc_hat, &ph)
    ));
    c
}

fn criterion_5() -> Check {
    let mut c = Check::new();
    let g = load("ex5_6.json");
    let ol = solve_openloop_nash_are(&g, &opts());
    c.that(&format!("open status {:?}", ol.status), ol.status == Status::Solved);
    c.close("P1", &ol.p1, &Mat::identity(2, 2), 1e-6);
    c.close("P2", &ol.p2, &m(&[&[0.5, 0.0], &[0.0, 1.0]]), 1e-6);
    c.close("P1_hat", &ol.p1_hat, &m(&[&[1.0, 0.0], &[0.0, 0.5]]), 1e-6);
    c.close("P2_hat", &ol.p2_hat, &Mat::identity(2, 2), 1e-6);
    c.close("Theta**", &ol.theta, &m(&[&[-1.0, -0.25], &[-0.2, -0.8]]), 2e-3);
    c.close("Theta_bar**", &ol.theta_bar, &m(&[&[-1.1765, 0.0], &[0.0, -0.8]]), 2e-3);

    let cl = solve_closedloop_nash_are(&g, &opts());
    c.that(&format!("closed status {:?}", cl.status), cl.status == Status::Solved);
    c.close("CL P1", &cl.p1, &m(&[&[0.9949, -0.0168], &[-0.0168, 0.9201]]), 2e-3);
    c.close("CL P2", &cl.p2, &m(&[&[0.6255, -0.0104], &[-0.0104, 1.01741]]), 2e-3);
    c.close("CL P1_hat", &cl.p1_hat, &m(&[&[1.0023, -0.0155], &[-0.0155, 0.6472]]), 2e-3);
    c.close("CL P2_hat", &cl.p2_hat, &m(&[&[0.8919, 0.0126], &[0.0126, 0.9964]]), 2e-3);
    c.close("Sigma1", &cl.sigma1, &m(&[&[1.9949]]), 2e-3);
    c.close("Sigma2", &cl.sigma2, &m(&[&[2.5174]]), 2e-3);
    c.close("Sigma_bar1", &cl.sigma_bar1, &m(&[&[4.2386]]), 2e-3);
    c.close("Sigma_bar2", &cl.sigma_bar2, &m(&[&[3.7891]]), 2e-3);
    c.close("Theta*", &cl.theta, &m(&[&[-0.9949, -0.2393], &[-0.1979, -0.8072]]), 2e-3);
    c.close("Theta_bar*", &cl.theta_bar, &m(&[&[-1.1798, 0.0117], &[-0.0082, -0.7971]]), 2e-3);

    let s_ol = FeedbackStrategy::new(ol.theta.clone(), ol.theta_bar.clone());
    let s_cl = FeedbackStrategy::new(cl.theta.clone(), cl.theta_bar.clone());
    c.that("intrinsically different", !intrinsically_same(&s_ol, &s_cl, &g.dynamics));
    let gap = (&g.dynamics.b * (&cl.theta - &ol.theta)).norm();
    c.that(&format!("|B(Theta*-Theta**)| = {gap:.4}"), (0.005..=0.03).contains(&gap));
    c
}

fn criterion_6() -> Check {
    let mut c = Check::new();
    let g = load("ex5_7.json");
    let ol = solve_openloop_nash_are(&g, &opts());
    c.that(&format!("open status {:?}", ol.status), ol.status == Status::Solved);
    c.close("P1", &ol.p1, &m(&[&[1.0, -0.5], &[0.0, 1.0]]), 1e-6);
    c.close("P1_hat", &ol.p1_hat, &m(&[&[1.0, -5.0 / 44.0], &[0.0, 1.0]]), 1e-6);
    c.close("Theta**", &ol.theta, &m(&[&[0.0, -0.1581], &[0.0, -0.6325]]), 2e-3);
    let cl = solve_closedloop_nash_are(&g, &opts());
    c.that(&format!("closed status {:?}", cl.status), cl.status == Status::Solved);
    c.close("CL P1", &cl.p1, &m(&[&[1.0, -0.4955], &[-0.4955, 1.7645]]), 2e-3);
    c.that("CL P1 symmetric", dev(&cl.p1, &cl.p1.transpose()) <= 1e-9);
    c
}

fn criterion_7() -> Check {
    let mut c = Check::new();
    let g = load("ex5_2.json");
    let z = zero_sum_reduce(&g).unwrap();
    let s = solve_zerosum_are(&z, &opts());
    c.close("P_c", &s.pc, &m(&[&[-1.0]]), 1e-8);
    c.close("P_c_hat", &s.pc_hat, &m(&[&[0.0]]), 1e-8);
    c.close("Sigma_c", &s.sigma_c, &Mat::zeros(2, 2), 1e-8);
    let range = s.residuals.iter().filter(|(k, _)| k.starts_with("range")).map(|(_, v)| *v).fold(0.0, f64::max);
    c.that(&format!("range residual {range:.0e}"), range <= 1e-8);

    let zero = Solution::ZeroSum(s.clone());
    let strat = candidate_strategy(&g, &zero, None).unwrap();
    c.that("free = 0 gives (0,0)", strat.theta.norm() <= 1e-12 && strat.theta_bar.norm() <= 1e-12);
    c.that(&format!("(0,0) is not a stabilizer ({:?})", s.stabilizer.failure_reason), !s.stabilizer.is_stabilizer);

    // Θ = (1, 0): Θ₁² − 2Θ₁ + 1/2 = −1/2 < Θ₂ = 0.
    let mut o = opts();
    o.free_components = Some(FreeComponents { theta: m(&[&[1.0], &[0.0]]), theta_bar: Mat::zeros(2, 1) });
    let sf = solve_zerosum_are(&z, &o);
    c.that(&format!("free-component status {:?}", sf.status), sf.status == Status::Solved);
    let cert = nash_certificate(&g, &Solution::ZeroSum(sf), o.are_tol, None).unwrap();
    c.that(&format!("certificate {:?}", cert.failures), cert.passed);
    c
}

fn criterion_8() -> Check {
    let mut c = Check::new();
    let g = load("ex5_5.json");
    let z = zero_sum_reduce(&g).unwrap();
    let sol = Solution::ZeroSum(solve_zerosum_are(&z, &opts()));
    let strat = synthesize_strategy(&g, &sol, None).unwrap();
    let x0 = Vector::from_vec(vec![1.0, 1.0]);
    let so = SimOptions { horizon: 20.0, dt: 1e-3, paths: 20000, seed: 42, antithetic: true, record_every: 0 };
    let t = Instant::now();
    let ens = simulate_closed_loop(&g, &strat, &x0, &so).unwrap();
    let est = estimate_cost(&ens, &g, &strat, 1).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let err = (est.mean - 1.5).abs();
    let band = 3.0 * est.stderr + 0.015;
    c.that(&format!("J = {:.5} ± {:.5}, |J − 1.5| = {err:.5} ≤ {band:.5}", est.mean, est.stderr), err <= band);
    c.that(&format!("runtime {elapsed:.1}s"), elapsed < 60.0);
    c
}

fn criterion_9() -> Check {
    let mut c = Check::new();
    let g = load("ex5_3.json");
    let z = zero_sum_reduce(&g).unwrap();
    let sol = Solution::ZeroSum(solve_zerosum_are(&z, &opts()));
    c.that(&format!("certified saddle ({:?})", sol.status()), sol.status() == Status::Solved);
    // The battery runs on the candidate either way, for diagnostics.
    let strat = candidate_strategy(&g, &sol, None).unwrap();
    let x0 = Vector::from_vec(vec![1.0]);
    let so = SimOptions { horizon: 20.0, dt: 1e-2, paths: 2000, seed: 7, antithetic: true, record_every: 0 };
    let battery = default_battery(&g);
    match deviation_test(&g, &strat, &x0, DeviationKind::Saddle, &battery, &so) {
        Ok(r) => {
            let worst = r.entries.iter().map(|e| e.stderr).fold(0.0, f64::max);
            c.that(&format!("battery {}/{} pass (max stderr {worst:.2})", r.entries.iter().filter(|e| e.passed).count(), r.entries.len()), r.passed);
        }
        Err(e) => c.that(&format!("battery: {e}"), false),
    }
    let mut wrong = strat.clone();
    wrong.theta[(1, 0)] = 2.0;
    match deviation_test(&g, &wrong, &x0, DeviationKind::Saddle, &battery, &so) {
        Ok(r) => c.that(&format!("Theta2 = 2 rejected ({} failures)", r.entries.iter().filter(|e| !e.passed).count()), !r.passed),
        Err(e) => c.that(&format!("Theta2 = 2: {e}"), false),
    }
    c.note(format!("Theta_bar = {:?}", sol.gains().1.as_slice()));
    c
}

fn scalar_control(rng: &mut ChaCha8Rng) -> (String, f64, f64) {
    // d = d̄ = 0 so both Riccati equations are quadratics with closed-form roots.
    let a: f64 = rng.random_range(-2.0..2.0);
    let ab: f64 = rng.random_range(-1.0..1.0);
    let b: f64 = rng.random_range(0.3..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let bb: f64 = rng.random_range(-0.2..0.2);
    let cc: f64 = rng.random_range(-1.0..1.0);
    let cb: f64 = rng.random_range(-0.5..0.5);
    let q: f64 = rng.random_range(0.1..3.0);
    let qb: f64 = rng.random_range(0.0..2.0);
    let r: f64 = rng.random_range(0.2..3.0);
    let rb: f64 = rng.random_range(0.0..1.0);
    let json = format!(
        r#"{{"n":1,"m1":1,"m2":0,"dynamics":{{"A":[[{a}]],"A_bar":[[{ab}]],"B1":[[{b}]],"B1_bar":[[{bb}]],"C":[[{cc}]],"C_bar":[[{cb}]]}},
            "players":[{{"Q":[[{q}]],"Q_bar":[[{qb}]],"R11":[[{r}]],"R11_bar":[[{rb}]]}}]}}"#
    );
    // (b²/r)P² − (2a + c²)P − q = 0, larger root.
    let k = b * b / r;
    let lin = 2.0 * a + cc * cc;
    let p = (lin + (lin * lin + 4.0 * k * q).sqrt()) / (2.0 * k);
    let (ah, bh, ch, qh, rh) = (a + ab, b + bb, cc + cb, q + qb, r + rb);
    let kh = bh * bh / rh;
    let c0 = qh + ch * ch * p;
    let ph = (2.0 * ah + (4.0 * ah * ah + 4.0 * kh * c0).sqrt()) / (2.0 * kh);
    (json, p, ph)
}

fn random_stable(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let f = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let shift = mflq::linops::spectral_abscissa(&f) + rng.random_range(0.05..1.0);
    f - Mat::identity(n, n) * shift
}

fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Mat {
    let g = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    g.qr().q()
}

fn criterion_10() -> Check {
    let mut c = Check::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    // (a) scalar control vs closed form
    let mut worst = 0.0f64;
    let mut bad = 0;
    for _ in 0..100 {
        let (json, p, ph) = scalar_control(&mut rng);
        let spec = parse_problem(&json).unwrap().0.control().unwrap();
        let s = solve_control_are(&spec, &opts());
        let e = (s.p[(0, 0)] - p).abs().max((s.p_hat[(0, 0)] - ph).abs());
        worst = worst.max(e);
        if s.status != Status::Solved || !(e <= 1e-8) {
            bad += 1;
        }
    }
    c.that(&format!("(a) 100 scalar: {bad} bad, max err {worst:.1e}"), bad == 0);

    // (b) finite-horizon monotone convergence
    let mut suites = 0;
    let mut bad = 0;
    let mut worst = 0.0f64;
    let mut tries = 0;
    while suites < 20 && tries < 400 {
        tries += 1;
        let n = rng.random_range(1..=3usize);
        let mk = |rng: &mut ChaCha8Rng, r: usize, cl: usize, s: f64| Mat::from_fn(r, cl, |_, _| rng.random_range(-s..s));
        let a = mk(&mut rng, n, n, 1.0);
        let ab = mk(&mut rng, n, n, 0.5);
        let b = mk(&mut rng, n, 1, 1.0);
        let bb = mk(&mut rng, n, 1, 0.5);
        let cm = mk(&mut rng, n, n, 0.3);
        let d = mk(&mut rng, n, 1, 0.3);
        let lq = mk(&mut rng, n, n, 1.0);
        let q = &lq * lq.transpose() + Mat::identity(n, n) * 0.1;
        let js = |x: &Mat| serde_json::to_string(&mflq::model::mat_to_raw(x)).unwrap();
        let json = format!(
            r#"{{"n":{n},"m1":1,"m2":0,"dynamics":{{"A":{},"A_bar":{},"B1":{},"B1_bar":{},"C":{},"D1":{}}},
                "players":[{{"Q":{},"R11":[[1.0]],"R11_bar":[[0.5]]}}]}}"#,
            js(&a), js(&ab), js(&b), js(&bb), js(&cm), js(&d), js(&q)
        );
        let spec = parse_problem(&json).unwrap().0.control().unwrap();
        let s = solve_control_are(&spec, &opts());
        // T = 40 only resolves the limit to 1e-4 when the closed loop decays reasonably fast.
        let margin = -s.stabilizer.stochastic_abscissa.max(s.stabilizer.hurwitz_abscissa);
        if s.status != Status::Solved || margin < 0.2 {
            continue;
        }
        suites += 1;
        let x = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let v = |ph: &Mat| (ph * &x).dot(&x);
        let target = v(&s.p_hat);
        let mut prev = f64::NEG_INFINITY;
        let mut ok = true;
        for t in [2.5, 5.0, 10.0, 20.0, 40.0] {
            match finite_horizon_riccati(&spec, t) {
                Some((_, ph)) => {
                    let val = v(&ph);
                    // Slack at the adaptive integrator's accuracy once the value has plateaued.
                    if val < prev - 1e-8 * (1.0 + val.abs()) {
                        eprintln!("non-monotone at T={t}: {prev} -> {val}");
                        ok = false;
                    }
                    prev = val;
                }
                None => {
                    eprintln!("finite-horizon integration failed at T={t}");
                    ok = false
                }
            }
        }
        let e = (prev - target).abs();
        worst = worst.max(e);
        if !ok || !(e <= 1e-4) {
            bad += 1;
        }
    }
    c.that(&format!("(b) {suites} finite-horizon suites: {bad} bad, max gap {worst:.1e}"), suites == 20 && bad == 0);

    // (c) Penrose identities on A = U diag(s) Vᵀ with prescribed rank and σ ∈ [0.1, 10]·scale
    let mut worst = 0.0f64;
    for k in 0..500 {
        let (r, cl) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
        let rank = rng.random_range(0..=r.min(cl));
        let scale = [1.0, 1e-3, 1e3][k % 3];
        let u = random_orthogonal(&mut rng, r);
        let v = random_orthogonal(&mut rng, cl);
        let mut s = Mat::zeros(r, cl);
        for i in 0..rank {
            s[(i, i)] = scale * 10f64.powf(rng.random_range(-1.0..1.0));
        }
        let a = &u * s * v.transpose();
        let x = pinv(&a, 1e-10).pinv;
        let (na, nx) = (a.norm().max(f64::MIN_POSITIVE), x.norm().max(f64::MIN_POSITIVE));
        let e = [
            (&a * &x * &a - &a).norm() / na,
            (&x * &a * &x - &x).norm() / nx,
            (&a * &x - (&a * &x).transpose()).norm(),
            (&x * &a - (&x * &a).transpose()).norm(),
        ]
        .into_iter()
        .fold(0.0, f64::max);
        worst = worst.max(if rank == 0 { x.norm() } else { e });
    }
    c.that(&format!("(c) 500 Penrose cases, max defect {worst:.1e}"), worst <= 1e-9);

    // (d) Lyapunov residuals
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=5usize);
        let f = random_stable(&mut rng, n);
        let w0 = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let w = (&w0 + w0.transpose()) / (&w0 + w0.transpose()).norm().max(1e-12);
        match solve_lyapunov(&f, &w) {
            Ok(x) => worst = worst.max((&f * &x + &x * f.transpose() + &w).norm()),
            Err(_) => worst = f64::INFINITY,
        }
    }
    c.that(&format!("(d) 200 Lyapunov cases, max residual {worst:.1e}"), worst <= 1e-9);
    c
}

fn main() {
    let mut failed = Vec::new();
    let all: [(u32, fn() -> Check); 10] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
    ];
    for (n, f) in all {
        report(n, f(), &mut failed);
    }
    if failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
