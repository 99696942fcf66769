//! Algebraic Riccati systems for control, Nash and zero-sum problems.
//!
//! Every solver returns a status-encoded solution: numerical failure and
//! "the equations have no static stabilizing solution" are outcomes, not errors.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::linops::{
    asymmetry, fro, max_sym_eig, min_sym_eig, pinv, pinv_scaled, range_contains_with, rows, solve_lyapunov,
    solve_matrix_equation, solve_stochastic_lyapunov, sym, unvech, vech, Mat, Vector,
};
use crate::model::{Dynamics, GameSpec, ControlSpec, PlayerCost, Problem, ZeroSumSpec};
use crate::stabilizability::{check_stabilizer_dyn, StabilizerCertificate};

/// Margin for the ⪰ 0 / ⪯ 0 gates.
pub const TAU_PSD: f64 = 1e-9;
/// Reciprocal condition number below which stacked blocks count as singular.
pub const TAU_SING: f64 = 1e-12;
/// Relative singular-value floor used inside the solvers (see [`pinv_scaled`]).
const PINV_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct FreeComponents {
    pub theta: Mat,
    pub theta_bar: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub are_tol: f64,
    pub ode_tol: f64,
    pub eps_min: f64,
    pub eps_chain_tol: f64,
    pub damping: f64,
    pub max_iter: usize,
    #[serde(skip)]
    pub free_components: Option<FreeComponents>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            are_tol: 1e-8,
            ode_tol: 1e-11,
            eps_min: 1e-8,
            eps_chain_tol: 1e-7,
            damping: 0.5,
            max_iter: 500,
            free_components: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Solved,
    NotStaticStabilizing,
    PsdViolated,
    MaxIterations,
    Diverged,
}

/// The checks a candidate must pass, in the order they are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Residual,
    Singular,
    Symmetry,
    SignCondition,
    RangeCondition,
    HatResidual,
    HatRangeCondition,
    Stabilizer,
}

impl Gate {
    fn status(self) -> Status {
        match self {
            Gate::Residual | Gate::HatResidual => Status::MaxIterations,
            Gate::Singular => Status::Diverged,
            Gate::SignCondition => Status::PsdViolated,
            Gate::Symmetry | Gate::RangeCondition | Gate::HatRangeCondition | Gate::Stabilizer => {
                Status::NotStaticStabilizing
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub iterations: usize,
    pub eps_chain: Vec<f64>,
    pub failed_gate: Option<Gate>,
    pub diagnostic: Option<String>,
}

pub type Residuals = BTreeMap<String, f64>;

// ---------------------------------------------------------------------------
// Single-cost algebra shared by the control and zero-sum systems

/// Σ, L and Σ† of one Riccati equation, with the gain `−Σ†L`.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub sigma: Mat,
    pub sigma_pinv: Mat,
    pub l: Mat,
}

impl Synthesis {
    fn new(sigma: Mat, l: Mat, scale: f64) -> Self {
        let sigma = sym(&sigma);
        let sigma_pinv = pinv_scaled(&sigma, PINV_FLOOR, scale).pinv;
        Synthesis { sigma, sigma_pinv, l }
    }

    /// `−Σ†L + (I − Σ†Σ)θ`.
    pub fn gain(&self, free: Option<&Mat>) -> Mat {
        let mut th = -(&self.sigma_pinv * &self.l);
        if let Some(f) = free {
            let m = self.sigma.nrows();
            th += (Mat::identity(m, m) - &self.sigma_pinv * &self.sigma) * f;
        }
        th
    }

    pub fn range_residual(&self) -> f64 {
        range_contains_with(&self.sigma, &self.sigma_pinv, &self.l, 1e-8).residual
    }

    fn quad(&self) -> Mat {
        self.l.transpose() * &self.sigma_pinv * &self.l
    }
}

fn problem_scale(r: &Mat, d: &Mat, p: &Mat) -> f64 {
    fro(r) + fro(d).powi(2) * fro(p) + 1.0
}

/// Σ = R + εI + DᵀPD, L = BᵀP + DᵀPC + S.
pub fn synth_p(d: &Dynamics, c: &PlayerCost, p: &Mat, reg: f64) -> Synthesis {
    let m = d.m();
    let sigma = &c.r + Mat::identity(m, m) * reg + d.d.transpose() * p * &d.d;
    let l = d.b.transpose() * p + d.d.transpose() * p * &d.c + &c.s;
    Synthesis::new(sigma, l, problem_scale(&c.r, &d.d, p))
}

/// Σ̄ = R̂ + εI + D̂ᵀPD̂, L̂ = B̂ᵀP̂ + D̂ᵀPĈ + Ŝ.
pub fn synth_phat(d: &Dynamics, c: &PlayerCost, p: &Mat, phat: &Mat, reg: f64) -> Synthesis {
    let m = d.m();
    let h = c.hat();
    let dh = d.d_hat();
    let sigma = &h.r + Mat::identity(m, m) * reg + dh.transpose() * p * &dh;
    let l = d.b_hat().transpose() * phat + dh.transpose() * p * d.c_hat() + &h.s;
    Synthesis::new(sigma, l, problem_scale(&h.r, &dh, p))
}

fn riccati_p(d: &Dynamics, c: &PlayerCost, p: &Mat, s: &Synthesis) -> Mat {
    sym(&(p * &d.a + d.a.transpose() * p + d.c.transpose() * p * &d.c + &c.q - s.quad()))
}

fn riccati_phat(d: &Dynamics, c: &PlayerCost, p: &Mat, phat: &Mat, s: &Synthesis) -> Mat {
    let (ah, ch) = (d.a_hat(), d.c_hat());
    let qh = &c.q + &c.q_bar;
    sym(&(phat * &ah + ah.transpose() * phat + ch.transpose() * p * &ch + qh - s.quad()))
}

/// Residual of the P-equation.
pub fn are_p_residual(d: &Dynamics, c: &PlayerCost, p: &Mat) -> Mat {
    riccati_p(d, c, p, &synth_p(d, c, p, 0.0))
}

/// Residual of the P̂-equation at a given P.
pub fn are_phat_residual(d: &Dynamics, c: &PlayerCost, p: &Mat, phat: &Mat) -> Mat {
    riccati_phat(d, c, p, phat, &synth_phat(d, c, p, phat, 0.0))
}

/// Jacobian (upper-triangle coordinates) of a linear map on symmetric matrices.
fn sym_jacobian(n: usize, op: impl Fn(&Mat) -> Mat) -> Mat {
    let k = n * (n + 1) / 2;
    let mut j = Mat::zeros(k, k);
    let mut col = 0;
    for a in 0..n {
        for b in a..n {
            let mut e = Mat::zeros(n, n);
            e[(a, b)] = 1.0;
            e[(b, a)] = 1.0;
            j.set_column(col, &vech(&op(&e)));
            col += 1;
        }
    }
    j
}

fn jac_p(d: &Dynamics, c: &PlayerCost, p: &Mat, reg: f64) -> Mat {
    let th = synth_p(d, c, p, reg).gain(None);
    let a_th = &d.a + &d.b * &th;
    let c_th = &d.c + &d.d * &th;
    sym_jacobian(d.n, |e| e * &a_th + a_th.transpose() * e + c_th.transpose() * e * &c_th)
}

fn jac_phat(d: &Dynamics, c: &PlayerCost, p: &Mat, phat: &Mat, reg: f64) -> Mat {
    let tb = synth_phat(d, c, p, phat, reg).gain(None);
    let a_cl = d.a_hat() + d.b_hat() * &tb;
    sym_jacobian(d.n, |e| e * &a_cl + a_cl.transpose() * e)
}

// ---------------------------------------------------------------------------
// Newton machinery on symmetric unknowns

struct RootAttempt {
    x: Mat,
    residual: f64,
    iterations: usize,
}

fn solve_step(j: &Mat, rhs: &Vector) -> Vector {
    if let Some(x) = j.clone().full_piv_lu().solve(rhs) {
        if x.iter().all(|v| v.is_finite()) && (j * &x - rhs).norm() <= 1e-8 * rhs.norm().max(1e-300) {
            return x;
        }
    }
    pinv(j, 1e-13).pinv * rhs
}

/// Damped Newton with backtracking on ‖F‖; runs until no further decrease.
fn newton_sym(x0: Mat, f: &dyn Fn(&Mat) -> Mat, jac: &dyn Fn(&Mat) -> Mat, max_iter: usize) -> RootAttempt {
    let n = x0.nrows();
    let mut x = x0;
    let mut fx = f(&x);
    let mut r = fro(&fx);
    let mut it = 0;
    while it < max_iter && r.is_finite() && r > 0.0 {
        it += 1;
        let j = jac(&x);
        let step = solve_step(&j, &(-vech(&fx)));
        let dx = unvech(&step, n);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xt = &x + &dx * t;
            let ft = f(&xt);
            let rt = fro(&ft);
            if rt.is_finite() && rt < r {
                x = xt;
                fx = ft;
                r = rt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || fro(&dx) * t <= 1e-16 * (1.0 + fro(&x)) || fro(&x) > 1e12 {
            break;
        }
    }
    RootAttempt { x, residual: r, iterations: it }
}

/// Refines a root at which the Jacobian is (nearly) singular by solving the
/// bordered system `F(x) = 0, J(x)v = 0, ℓᵀv = 1` in the least-squares sense.
/// Plain Newton only converges linearly there and stalls at √ε accuracy.
fn refine_singular_root(att: RootAttempt, f: &dyn Fn(&Mat) -> Mat, jac: &dyn Fn(&Mat) -> Mat) -> RootAttempt {
    let n = att.x.nrows();
    let k = n * (n + 1) / 2;
    let j0 = jac(&att.x);
    let svd = crate::linops::svd(&j0);
    let s = &svd.s;
    let (imin, smin) = s.iter().enumerate().fold((0, f64::INFINITY), |acc, (i, v)| if *v < acc.1 { (i, *v) } else { acc });
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    if !(smin <= 1e-5 * smax.max(1.0)) {
        return att;
    }
    let ell: Vector = svd.v.column(imin).into_owned();
    let aug = |x: &Mat, v: &Vector| -> Vector {
        let mut g = Vector::zeros(2 * k + 1);
        g.rows_mut(0, k).copy_from(&vech(&f(x)));
        g.rows_mut(k, k).copy_from(&(jac(x) * v));
        g[2 * k] = ell.dot(v) - 1.0;
        g
    };
    let mut x = att.x.clone();
    let mut v = ell.clone();
    let mut g = aug(&x, &v);
    let g_start = g.norm();
    let mut iters = att.iterations;
    for _ in 0..60 {
        iters += 1;
        let jx = jac(&x);
        let jv = &jx * &v;
        let h = 1e-7 * (1.0 + fro(&x));
        let mut big = Mat::zeros(2 * k + 1, 2 * k);
        big.view_mut((0, 0), (k, k)).copy_from(&jx);
        big.view_mut((k, k), (k, k)).copy_from(&jx);
        for c in 0..k {
            let mut e = Vector::zeros(k);
            e[c] = h;
            let xh = &x + unvech(&e, n);
            let col = (jac(&xh) * &v - &jv) / h;
            big.view_mut((k, c), (k, 1)).copy_from(&col);
        }
        for c in 0..k {
            big[(2 * k, k + c)] = ell[c];
        }
        let step = pinv(&big, 1e-13).pinv * (-&g);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let xt = &x + unvech(&step.rows(0, k).into_owned(), n) * t;
            let vt = &v + step.rows(k, k) * t;
            let gt = aug(&xt, &vt);
            if gt.norm() < g.norm() {
                x = xt;
                v = vt;
                g = gt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || step.norm() * t <= 1e-16 * (1.0 + fro(&x)) {
            break;
        }
    }
    if g.norm() < g_start {
        let residual = fro(&f(&x));
        RootAttempt { x, residual, iterations: iters }
    } else {
        att
    }
}

fn start_set(n: usize) -> Vec<Mat> {
    let mut out = vec![Mat::zeros(n, n)];
    for alpha in [0.1, 1.0, 10.0] {
        out.push(Mat::identity(n, n) * alpha);
        out.push(Mat::identity(n, n) * -alpha);
    }
    out
}

/// Multi-start Newton; returns distinct converged roots in start order, or
/// the best failed attempt when none converge.
fn collect_roots(
    n: usize,
    f: &(dyn Fn(&Mat) -> Mat + Sync),
    jac: &(dyn Fn(&Mat) -> Mat + Sync),
    tol: f64,
    max_iter: usize,
) -> (Vec<Mat>, Option<(Mat, f64)>, usize) {
    let attempts: Vec<RootAttempt> = start_set(n)
        .into_par_iter()
        .map(|x0| {
            let a = newton_sym(x0, f, jac, max_iter);
            if a.residual.is_finite() && a.residual <= tol.max(1e-6) {
                refine_singular_root(a, f, jac)
            } else {
                a
            }
        })
        .collect();
    let iters = attempts.iter().map(|a| a.iterations).sum();
    let mut roots: Vec<Mat> = Vec::new();
    for a in &attempts {
        if a.residual.is_finite() && a.residual <= tol {
            let dup = roots.iter().any(|r| fro(&(r - &a.x)) <= 1e-6 * (1.0 + fro(r)));
            if !dup {
                roots.push(a.x.clone());
            }
        }
    }
    let best = attempts
        .iter()
        .filter(|a| a.residual.is_finite())
        .min_by(|a, b| a.residual.partial_cmp(&b.residual).unwrap())
        .map(|a| (a.x.clone(), a.residual));
    (roots, best, iters)
}

fn polish(
    x: Mat,
    f: &dyn Fn(&Mat) -> Mat,
    jac: &dyn Fn(&Mat) -> Mat,
    max_iter: usize,
) -> (Mat, usize) {
    let r0 = fro(&f(&x));
    let a = newton_sym(x.clone(), f, jac, max_iter);
    if a.residual < r0 && fro(&(&a.x - &x)) <= 1e-3 * (1.0 + fro(&x)) {
        (a.x, a.iterations)
    } else {
        (x, a.iterations)
    }
}

// ---------------------------------------------------------------------------
// Control problem

#[derive(Debug, Clone, PartialEq)]
pub struct ControlAreSolution {
    pub p: Mat,
    pub p_hat: Mat,
    pub sigma: Mat,
    pub sigma_bar: Mat,
    pub theta: Mat,
    pub theta_bar: Mat,
    pub residuals: Residuals,
    pub status: Status,
    pub stabilizer: StabilizerCertificate,
    pub info: SolverInfo,
}

fn ode_rhs(d: &Dynamics, c: &PlayerCost, p: &Mat, phat: &Mat, eps: f64) -> (Mat, Mat) {
    let sp = synth_p(d, c, p, eps);
    let fp = riccati_p(d, c, p, &sp);
    let sh = synth_phat(d, c, p, phat, eps);
    let fh = riccati_phat(d, c, p, phat, &sh);
    (fp, fh)
}

fn rk4(d: &Dynamics, c: &PlayerCost, p: &Mat, ph: &Mat, h: f64, eps: f64) -> (Mat, Mat) {
    let (k1, l1) = ode_rhs(d, c, p, ph, eps);
    let (k2, l2) = ode_rhs(d, c, &(p + &k1 * (h / 2.0)), &(ph + &l1 * (h / 2.0)), eps);
    let (k3, l3) = ode_rhs(d, c, &(p + &k2 * (h / 2.0)), &(ph + &l2 * (h / 2.0)), eps);
    let (k4, l4) = ode_rhs(d, c, &(p + &k3 * h), &(ph + &l3 * h), eps);
    (
        p + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0),
        ph + (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0),
    )
}

/// Outcome of integrating the differential Riccati pair backward in time.
struct OdeRun {
    p: Mat,
    p_hat: Mat,
    steps: usize,
    ok: bool,
}

/// Adaptive RK4 (step doubling) on `dP/dτ = F_ε(P)`, `dP̂/dτ = F̂_ε(P̂; P)`,
/// where τ = T − t. Stops at `horizon` or, if `horizon` is infinite, once
/// ‖F‖ + ‖F̂‖ ≤ `stop_tol`.
fn integrate_riccati(
    d: &Dynamics,
    c: &PlayerCost,
    p0: Mat,
    ph0: Mat,
    eps: f64,
    horizon: f64,
    stop_tol: f64,
    max_steps: usize,
) -> OdeRun {
    let mut p = p0;
    let mut ph = ph0;
    let mut tau = 0.0;
    let mut h: f64 = 1e-2;
    let mut steps = 0;
    let loc_tol = 1e-10;
    loop {
        if horizon.is_finite() {
            if tau >= horizon * (1.0 - 1e-15) {
                return OdeRun { p, p_hat: ph, steps, ok: true };
            }
            h = h.min(horizon - tau);
        } else {
            let (fp, fh) = ode_rhs(d, c, &p, &ph, eps);
            let speed = fro(&fp) + fro(&fh);
            if !speed.is_finite() {
                return OdeRun { p, p_hat: ph, steps, ok: false };
            }
            if speed <= stop_tol {
                return OdeRun { p, p_hat: ph, steps, ok: true };
            }
        }
        if steps >= max_steps {
            return OdeRun { p, p_hat: ph, steps, ok: false };
        }
        steps += 1;
        let (pf, phf) = rk4(d, c, &p, &ph, h, eps);
        let (pm, phm) = rk4(d, c, &p, &ph, h / 2.0, eps);
        let (p2, ph2) = rk4(d, c, &pm, &phm, h / 2.0, eps);
        let err = (fro(&(&p2 - &pf)) + fro(&(&ph2 - &phf))) / 15.0;
        let scale = 1.0 + fro(&p2) + fro(&ph2);
        if !err.is_finite() {
            h *= 0.25;
            if h < 1e-14 {
                return OdeRun { p, p_hat: ph, steps, ok: false };
            }
            continue;
        }
        if err <= loc_tol * scale {
            tau += h;
            p = sym(&(&p2 + (&p2 - &pf) / 15.0));
            ph = sym(&(&ph2 + (&ph2 - &phf) / 15.0));
            let grow = if err > 0.0 { 0.9 * (loc_tol * scale / err).powf(0.2) } else { 4.0 };
            h *= grow.clamp(1.0, 4.0);
        } else {
            let shrink = 0.9 * (loc_tol * scale / err).powf(0.2);
            h *= shrink.clamp(0.1, 0.9);
            if h < 1e-14 {
                return OdeRun { p, p_hat: ph, steps, ok: false };
            }
        }
    }
}

/// Finite-horizon Riccati pair `(P(0;T), P̂(0;T))` with zero terminal value.
pub fn finite_horizon_riccati(spec: &ControlSpec, horizon: f64) -> Option<(Mat, Mat)> {
    let n = spec.dynamics.n;
    let run = integrate_riccati(
        &spec.dynamics,
        &spec.cost,
        Mat::zeros(n, n),
        Mat::zeros(n, n),
        0.0,
        horizon,
        0.0,
        2_000_000,
    );
    run.ok.then_some((run.p, run.p_hat))
}

/// Solves the control AREs by the ε-regularized finite-horizon scheme,
/// then polishes at ε = 0 with Newton.
pub fn solve_control_are(spec: &ControlSpec, opts: &SolveOptions) -> ControlAreSolution {
    let d = &spec.dynamics;
    let c = &spec.cost;
    let n = d.n;
    let mut info = SolverInfo::default();
    let mut eps = 0.1;
    let mut p = Mat::zeros(n, n);
    let mut ph = Mat::zeros(n, n);
    let mut prev: Option<(Mat, Mat)> = None;
    while eps >= opts.eps_min * (1.0 - 1e-12) {
        // The first level starts from the zero terminal value; later levels warm-start.
        // Explicit steps hover at their stability limit near equilibrium, so the flow
        // is run until it settles and Newton at the same ε finishes the job.
        let settle = (1e-6 * (1.0 + fro(&p) + fro(&ph))).max(opts.ode_tol);
        let run = integrate_riccati(d, c, p.clone(), ph.clone(), eps, f64::INFINITY, settle, 400_000);
        info.iterations += run.steps;
        if !run.ok {
            if prev.is_none() {
                info.diagnostic = Some(format!("differential Riccati pair did not settle at eps = {eps:e}"));
            }
            break;
        }
        let fp = |x: &Mat| riccati_p(d, c, x, &synth_p(d, c, x, eps));
        let jp = |x: &Mat| jac_p(d, c, x, eps);
        let (pe, it1) = polish(run.p, &fp, &jp, 50);
        let fh = |x: &Mat| riccati_phat(d, c, &pe, x, &synth_phat(d, c, &pe, x, eps));
        let jh = |x: &Mat| jac_phat(d, c, &pe, x, eps);
        let (phe, it2) = polish(run.p_hat, &fh, &jh, 50);
        info.iterations += it1 + it2;
        info.eps_chain.push(eps);
        p = pe;
        ph = phe;
        if let Some((pp, pph)) = &prev {
            if fro(&(&p - pp)) + fro(&(&ph - pph)) <= opts.eps_chain_tol {
                break;
            }
        }
        prev = Some((p.clone(), ph.clone()));
        eps *= 0.1;
    }
    if info.eps_chain.is_empty() {
        return finalize_control(spec, opts, p, ph, info, Some(Status::Diverged));
    }

    let fp = |x: &Mat| are_p_residual(d, c, x);
    let jp = |x: &Mat| jac_p(d, c, x, 0.0);
    let (p, it1) = polish(p, &fp, &jp, 50);
    let fh = |x: &Mat| are_phat_residual(d, c, &p, x);
    let jh = |x: &Mat| jac_phat(d, c, &p, x, 0.0);
    let (ph, it2) = polish(ph, &fh, &jh, 50);
    info.iterations += it1 + it2;
    finalize_control(spec, opts, p, ph, info, None)
}

fn finalize_control(
    spec: &ControlSpec,
    opts: &SolveOptions,
    p: Mat,
    ph: Mat,
    mut info: SolverInfo,
    forced: Option<Status>,
) -> ControlAreSolution {
    let d = &spec.dynamics;
    let c = &spec.cost;
    let sp = synth_p(d, c, &p, 0.0);
    let sh = synth_phat(d, c, &p, &ph, 0.0);
    let free = opts.free_components.as_ref();
    let theta = sp.gain(free.map(|f| &f.theta));
    let theta_bar = sh.gain(free.map(|f| &f.theta_bar));
    let mut residuals = Residuals::new();
    let are1 = fro(&riccati_p(d, c, &p, &sp));
    let are2 = fro(&riccati_phat(d, c, &p, &ph, &sh));
    residuals.insert("are1".into(), are1);
    residuals.insert("are2".into(), are2);
    residuals.insert("range1".into(), sp.range_residual());
    residuals.insert("range2".into(), sh.range_residual());
    let stabilizer = check_stabilizer_dyn(d, &theta, &theta_bar);

    let gate = if forced.is_some() || !(are1.is_finite() && are2.is_finite()) {
        Some(Gate::Singular)
    } else if are1 > opts.are_tol {
        Some(Gate::Residual)
    } else if are2 > opts.are_tol {
        Some(Gate::HatResidual)
    } else if min_sym_eig(&sp.sigma) < -TAU_PSD || min_sym_eig(&sh.sigma) < -TAU_PSD {
        Some(Gate::SignCondition)
    } else if residuals["range1"] > 1e-8 * fro(&sp.l).max(1.0) {
        Some(Gate::RangeCondition)
    } else if residuals["range2"] > 1e-8 * fro(&sh.l).max(1.0) {
        Some(Gate::HatRangeCondition)
    } else if !stabilizer.is_stabilizer {
        Some(Gate::Stabilizer)
    } else {
        None
    };
    let status = forced.unwrap_or(gate.map(Gate::status).unwrap_or(Status::Solved));
    info.failed_gate = gate;
    ControlAreSolution {
        p,
        p_hat: ph,
        sigma: sp.sigma,
        sigma_bar: sh.sigma,
        theta,
        theta_bar,
        residuals,
        status,
        stabilizer,
        info,
    }
}

// ---------------------------------------------------------------------------
// Zero-sum games

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroSumSolution {
    /// True for the closed-loop saddle system (sign conditions gated).
    pub closed_loop: bool,
    pub pc: Mat,
    pub pc_hat: Mat,
    pub sigma_c: Mat,
    pub sigma_bar_c: Mat,
    pub theta: Mat,
    pub theta_bar: Mat,
    /// R₁₁+D₁ᵀPD₁ ⪰ 0, R̂₁₁+D̂₁ᵀPD̂₁ ⪰ 0, R₂₂+D₂ᵀPD₂ ⪯ 0, R̂₂₂+D̂₂ᵀPD̂₂ ⪯ 0.
    pub sign_checks: [bool; 4],
    /// min eig of the first two blocks, max eig of the last two.
    pub sign_margins: [f64; 4],
    pub residuals: Residuals,
    pub status: Status,
    pub stabilizer: StabilizerCertificate,
    /// Every distinct root of the P-equation found by the multi-start.
    pub roots: Vec<Mat>,
    /// Distinct roots of the P̂-equation at the selected P.
    pub hat_roots: Vec<Mat>,
    pub info: SolverInfo,
}

/// Sign blocks of the saddle conditions at a given P.
pub fn zero_sum_sign_margins(d: &Dynamics, cost: &PlayerCost, p: &Mat) -> [f64; 4] {
    let r1 = d.player_rows(1);
    let r2 = d.player_rows(2);
    let h = cost.hat();
    let block = |r: &Mat, dd: &Mat, rr: &std::ops::Range<usize>| {
        let di = crate::linops::cols(dd, rr.clone());
        let ri = r.view((rr.start, rr.start), (rr.len(), rr.len())).into_owned();
        ri + di.transpose() * p * di
    };
    let dh = d.d_hat();
    [
        min_sym_eig(&block(&cost.r, &d.d, &r1)),
        min_sym_eig(&block(&h.r, &dh, &r1)),
        max_sym_eig(&block(&cost.r, &d.d, &r2)),
        max_sym_eig(&block(&h.r, &dh, &r2)),
    ]
}

fn sign_checks_of(m: &[f64; 4]) -> [bool; 4] {
    [m[0] >= -TAU_PSD, m[1] >= -TAU_PSD, m[2] <= TAU_PSD, m[3] <= TAU_PSD]
}

struct Candidate {
    p: Mat,
    ph: Mat,
    theta: Mat,
    theta_bar: Mat,
    sp: Synthesis,
    sh: Synthesis,
    margins: [f64; 4],
    are1: f64,
    are2: f64,
    stabilizer: StabilizerCertificate,
    failed: Option<Gate>,
}

/// How far a candidate is from passing the gate it failed (smaller is nearer).
fn miss(c: &Candidate) -> f64 {
    let v = match c.failed {
        None => 0.0,
        Some(Gate::Residual) => c.are1,
        Some(Gate::HatResidual) => c.are2,
        Some(Gate::SignCondition) => {
            let m = &c.margins;
            [(-m[0]).max(0.0), (-m[1]).max(0.0), m[2].max(0.0), m[3].max(0.0)].iter().cloned().fold(0.0, f64::max)
        }
        Some(Gate::RangeCondition) => c.sp.range_residual(),
        Some(Gate::HatRangeCondition) => c.sh.range_residual(),
        Some(Gate::Stabilizer) => c.stabilizer.hurwitz_abscissa.max(c.stabilizer.stochastic_abscissa),
        Some(_) => f64::INFINITY,
    };
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

fn gate_rank(g: Option<Gate>) -> usize {
    match g {
        None => 100,
        Some(g) => g as usize,
    }
}

pub fn solve_zerosum_are(spec: &ZeroSumSpec, opts: &SolveOptions) -> ZeroSumSolution {
    solve_zerosum_impl(spec, opts, true)
}

pub fn solve_zerosum_openrep_are(spec: &ZeroSumSpec, opts: &SolveOptions) -> ZeroSumSolution {
    solve_zerosum_impl(spec, opts, false)
}

fn solve_zerosum_impl(spec: &ZeroSumSpec, opts: &SolveOptions, closed: bool) -> ZeroSumSolution {
    let d = &spec.dynamics;
    let c = &spec.cost;
    let n = d.n;
    let mut info = SolverInfo::default();
    let iter_cap = opts.max_iter.min(200);

    let fp = |x: &Mat| are_p_residual(d, c, x);
    let jp = |x: &Mat| jac_p(d, c, x, 0.0);
    let (roots, best_p, it) = collect_roots(n, &fp, &jp, opts.are_tol, iter_cap);
    info.iterations += it;

    let free = opts.free_components.as_ref();
    let mut candidates: Vec<Candidate> = Vec::new();
    let mut hat_roots_per_p: Vec<Vec<Mat>> = Vec::new();

    let p_list: Vec<(Mat, bool)> = if roots.is_empty() {
        best_p.map(|(x, _)| vec![(x, false)]).unwrap_or_else(|| vec![(Mat::zeros(n, n), false)])
    } else {
        roots.iter().map(|r| (r.clone(), true)).collect()
    };

    for (p, p_ok) in &p_list {
        let sp = synth_p(d, c, p, 0.0);
        let margins = zero_sum_sign_margins(d, c, p);
        let are1 = fro(&riccati_p(d, c, p, &sp));
        let fh = |x: &Mat| are_phat_residual(d, c, p, x);
        let jh = |x: &Mat| jac_phat(d, c, &p, x, 0.0);
        let (hroots, best_h, it) = collect_roots(n, &fh, &jh, opts.are_tol, iter_cap);
        info.iterations += it;
        let h_list: Vec<Mat> = if hroots.is_empty() {
            vec![best_h.map(|b| b.0).unwrap_or_else(|| Mat::zeros(n, n))]
        } else {
            hroots.clone()
        };
        hat_roots_per_p.push(hroots.clone());
        for ph in h_list {
            let sh = synth_phat(d, c, p, &ph, 0.0);
            let theta = sp.gain(free.map(|f| &f.theta));
            let theta_bar = sh.gain(free.map(|f| &f.theta_bar));
            let are2 = fro(&riccati_phat(d, c, p, &ph, &sh));
            let stabilizer = check_stabilizer_dyn(d, &theta, &theta_bar);
            let failed = if !p_ok || are1 > opts.are_tol {
                Some(Gate::Residual)
            } else if closed && !sign_checks_of(&margins).iter().all(|b| *b) {
                Some(Gate::SignCondition)
            } else if sp.range_residual() > 1e-8 * fro(&sp.l).max(1.0) {
                Some(Gate::RangeCondition)
            } else if !(are2 <= opts.are_tol) {
                Some(Gate::HatResidual)
            } else if sh.range_residual() > 1e-8 * fro(&sh.l).max(1.0) {
                Some(Gate::HatRangeCondition)
            } else if !stabilizer.is_stabilizer {
                Some(Gate::Stabilizer)
            } else {
                None
            };
            candidates.push(Candidate { p: p.clone(), ph, theta, theta_bar, sp: sp.clone(), sh, margins, are1, are2, stabilizer, failed });
        }
    }

    // Deepest gate reached wins; among equals the nearest miss, then enumeration order.
    let mut best = 0;
    for (i, cand) in candidates.iter().enumerate() {
        let (ri, rb) = (gate_rank(cand.failed), gate_rank(candidates[best].failed));
        if ri > rb || (ri == rb && miss(cand) < miss(&candidates[best])) {
            best = i;
        }
    }
    let p_index = p_list.iter().position(|(p, _)| *p == candidates[best].p).unwrap_or(0);
    let cand = candidates.swap_remove(best);

    let mut residuals = Residuals::new();
    residuals.insert("are1".into(), cand.are1);
    residuals.insert("are2".into(), cand.are2);
    residuals.insert("range1".into(), cand.sp.range_residual());
    residuals.insert("range2".into(), cand.sh.range_residual());
    residuals.insert("synthesis1".into(), fro(&(&cand.sp.sigma * &cand.theta + &cand.sp.l)));
    residuals.insert("synthesis2".into(), fro(&(&cand.sh.sigma * &cand.theta_bar + &cand.sh.l)));
    info.failed_gate = cand.failed;
    let status = cand.failed.map(Gate::status).unwrap_or(Status::Solved);
    ZeroSumSolution {
        closed_loop: closed,
        sign_checks: sign_checks_of(&cand.margins),
        sign_margins: cand.margins,
        pc: cand.p,
        pc_hat: cand.ph,
        sigma_c: cand.sp.sigma,
        sigma_bar_c: cand.sh.sigma,
        theta: cand.theta,
        theta_bar: cand.theta_bar,
        residuals,
        status,
        stabilizer: cand.stabilizer,
        roots,
        hat_roots: hat_roots_per_p.get(p_index).cloned().unwrap_or_default(),
        info,
    }
}

// ---------------------------------------------------------------------------
// Two-player Nash games

/// Stacked Σ (m×m) and L (m×n): player i's rows are
/// `R_i[rows_i] + D_iᵀ P_i D` and `B_iᵀ P̃_i + D_iᵀ P_i C + S_i[rows_i]`,
/// with hats throughout (and P̃ = P̂) when `hat` is set.
fn stacked_blocks(d: &Dynamics, costs: &[PlayerCost], ps: &[Mat; 2], pbs: &[Mat; 2], hat: bool) -> (Mat, Mat) {
    let m = d.m();
    let n = d.n;
    let mut sigma = Mat::zeros(m, m);
    let mut l = Mat::zeros(m, n);
    let (bb, dd, cc) = if hat { (d.b_hat(), d.d_hat(), d.c_hat()) } else { (d.b.clone(), d.d.clone(), d.c.clone()) };
    for i in 0..2 {
        let rr = d.player_rows(i + 1);
        if rr.is_empty() {
            continue;
        }
        let (r, s) = if hat {
            let h = costs[i].hat();
            (h.r, h.s)
        } else {
            (costs[i].r.clone(), costs[i].s.clone())
        };
        let bi = crate::linops::cols(&bb, rr.clone());
        let di = crate::linops::cols(&dd, rr.clone());
        let p = &ps[i];
        let srow = rows(&r, rr.clone()) + di.transpose() * p * &dd;
        sigma.view_mut((rr.start, 0), (rr.len(), m)).copy_from(&srow);
        let lrow = bi.transpose() * &pbs[i] + di.transpose() * p * &cc + rows(&s, rr.clone());
        l.view_mut((rr.start, 0), (rr.len(), n)).copy_from(&lrow);
    }
    (sigma, l)
}

fn rcond(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let s = m.clone().singular_values();
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax > 0.0 {
        smin / smax
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopNashSolution {
    pub p1: Mat,
    pub p2: Mat,
    pub p1_hat: Mat,
    pub p2_hat: Mat,
    /// Θ** and Θ̄** of the closed-loop representation.
    pub theta: Mat,
    pub theta_bar: Mat,
    pub sigma_stack: Mat,
    pub sigma_bar_stack: Mat,
    pub residuals: Residuals,
    pub status: Status,
    pub stabilizer: StabilizerCertificate,
    pub info: SolverInfo,
}

struct OpenState {
    ps: [Mat; 2],
    pbs: [Mat; 2],
}

fn open_gains(d: &Dynamics, costs: &[PlayerCost], st: &OpenState) -> Option<(Mat, Mat, Mat, Mat)> {
    let (s, l) = stacked_blocks(d, costs, &st.ps, &st.ps, false);
    let (sb, lb) = stacked_blocks(d, costs, &st.ps, &st.pbs, true);
    if rcond(&s) < TAU_SING || rcond(&sb) < TAU_SING {
        return None;
    }
    let th = -(s.clone().lu().solve(&l)?);
    let tb = -(sb.clone().lu().solve(&lb)?);
    Some((th, tb, s, sb))
}

fn open_residuals(d: &Dynamics, costs: &[PlayerCost], st: &OpenState, th: &Mat, tb: &Mat) -> [Mat; 4] {
    let (ah, bh, ch, dh) = (d.a_hat(), d.b_hat(), d.c_hat(), d.d_hat());
    let mut out: [Mat; 4] = Default::default();
    for i in 0..2 {
        let p = &st.ps[i];
        let pb = &st.pbs[i];
        let c = &costs[i];
        let h = c.hat();
        out[i] = p * &d.a + d.a.transpose() * p + d.c.transpose() * p * &d.c + &c.q
            + (p * &d.b + d.c.transpose() * p * &d.d + c.s.transpose()) * th;
        out[2 + i] = pb * &ah + ah.transpose() * pb + ch.transpose() * p * &ch + &h.q
            + (pb * &bh + ch.transpose() * p * &dh + h.s.transpose()) * tb;
    }
    out
}

fn pack(ms: &[&Mat]) -> Vector {
    let mut v = Vec::new();
    for m in ms {
        v.extend_from_slice(m.as_slice());
    }
    Vector::from_vec(v)
}

fn unpack(v: &Vector, n: usize, k: usize) -> Vec<Mat> {
    (0..k).map(|i| Mat::from_column_slice(n, n, &v.as_slice()[i * n * n..(i + 1) * n * n])).collect()
}

/// Finite-difference Newton with backtracking on ‖G‖.
fn fd_newton(x0: Vector, g: &dyn Fn(&Vector) -> Option<Vector>, max_iter: usize) -> (Vector, f64, usize) {
    let mut x = x0;
    let mut gx = match g(&x) {
        Some(v) => v,
        None => return (x, f64::INFINITY, 0),
    };
    let mut r = gx.norm();
    let k = x.len();
    let mut it = 0;
    while it < max_iter && r > 0.0 {
        it += 1;
        let mut j = Mat::zeros(gx.len(), k);
        let mut ok = true;
        for c in 0..k {
            let h = 1e-7 * (1.0 + x[c].abs());
            let mut xh = x.clone();
            xh[c] += h;
            match g(&xh) {
                Some(gh) => j.set_column(c, &((gh - &gx) / h)),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            break;
        }
        let step = solve_step(&j, &(-&gx));
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let xt = &x + &step * t;
            if let Some(gt) = g(&xt) {
                let rt = gt.norm();
                if rt.is_finite() && rt < r {
                    x = xt;
                    gx = gt;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted || step.norm() * t <= 1e-16 * (1.0 + x.norm()) {
            break;
        }
    }
    (x, r, it)
}

/// Damped Lyapunov fixed-point sweeps on the open-loop system; returns the final residual
/// norm and whether a stacked block went singular.
fn open_sweeps(d: &Dynamics, costs: &[PlayerCost], st: &mut OpenState, opts: &SolveOptions, info: &mut SolverInfo) -> (f64, bool) {
    let n = d.n;
    let (ah, bh, ch, dh) = (d.a_hat(), d.b_hat(), d.c_hat(), d.d_hat());
    let id = Mat::identity(n, n);
    let at = d.a.transpose();
    let ct = d.c.transpose();
    let aht = ah.transpose();

    let residual_norm = |st: &OpenState| -> f64 {
        match open_gains(d, costs, st) {
            Some((th, tb, _, _)) => open_residuals(d, costs, st, &th, &tb).iter().map(|m| fro(m).powi(2)).sum::<f64>().sqrt(),
            None => f64::INFINITY,
        }
    };

    let mut r = residual_norm(st);
    let mut best_r = r;
    let mut since_best = 0;
    let omega = opts.damping.clamp(1e-3, 1.0);
    let mut sweeps = 0;
    while sweeps < opts.max_iter && r > opts.are_tol * 1e-3 {
        sweeps += 1;
        info.iterations += 1;
        let Some((th, tb, _, _)) = open_gains(d, costs, st) else {
            return (r, true);
        };
        let a_th = &d.a + &d.b * &th;
        let c_th = &d.c + &d.d * &th;
        let ah_cl = &ah + &bh * &tb;
        let mut new_ps = st.ps.clone();
        let mut new_pbs = st.pbs.clone();
        let mut failed = false;
        for i in 0..2 {
            let c = &costs[i];
            let w = &c.q + c.s.transpose() * &th;
            match solve_matrix_equation(&[(&id, &a_th), (&at, &id), (&ct, &c_th)], &w) {
                Ok(p) => new_ps[i] = p,
                Err(_) => failed = true,
            }
        }
        for i in 0..2 {
            let h = costs[i].hat();
            let p = &new_ps[i];
            let w = &h.q + ch.transpose() * p * &ch + (ch.transpose() * p * &dh + h.s.transpose()) * &tb;
            match solve_matrix_equation(&[(&id, &ah_cl), (&aht, &id)], &w) {
                Ok(pb) => new_pbs[i] = pb,
                Err(_) => failed = true,
            }
        }
        if failed {
            break;
        }
        for i in 0..2 {
            st.ps[i] = &st.ps[i] * (1.0 - omega) + &new_ps[i] * omega;
            st.pbs[i] = &st.pbs[i] * (1.0 - omega) + &new_pbs[i] * omega;
        }
        r = residual_norm(st);
        if !r.is_finite() {
            break;
        }
        if r < 0.99 * best_r {
            best_r = r;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 20 {
                break;
            }
        }
    }
    (r, false)
}

/// Shift `s` such that `(A − sI, C)` is stabilized by the zero gain, with a unit margin.
fn zero_gain_shift(d: &Dynamics) -> f64 {
    let z = Mat::zeros(d.m(), d.n);
    let cert = check_stabilizer_dyn(d, &z, &z);
    if cert.is_stabilizer {
        0.0
    } else {
        (0.5 * cert.stochastic_abscissa).max(cert.hurwitz_abscissa).max(0.0) + 1.0
    }
}

fn shifted(d: &Dynamics, s: f64) -> Dynamics {
    let mut out = d.clone();
    for i in 0..d.n {
        out.a[(i, i)] -= s;
    }
    out
}

pub fn solve_openloop_nash_are(spec: &GameSpec, opts: &SolveOptions) -> OpenLoopNashSolution {
    let d = &spec.dynamics;
    let n = d.n;
    let costs = &spec.players;
    let mut info = SolverInfo::default();
    let z = Mat::zeros(n, n);
    let mut st = OpenState { ps: [z.clone(), z.clone()], pbs: [z.clone(), z.clone()] };

    // The sweeps follow whichever branch the starting gain lies on. When the zero gain does not
    // stabilize, start on shifted dynamics where it does and walk the shift back to zero.
    let shift = zero_gain_shift(d);
    if shift > 0.0 {
        const STAGES: usize = 8;
        for k in 0..STAGES {
            let ds = shifted(d, shift * (1.0 - k as f64 / STAGES as f64));
            let (_, singular) = open_sweeps(&ds, costs, &mut st, opts, &mut info);
            if singular {
                break;
            }
        }
    }
    let (r, singular) = open_sweeps(d, costs, &mut st, opts, &mut info);

    if !(r <= opts.are_tol * 1e-3) && !singular {
        // Stagnated or diverged: Newton on the full residual map from the best available point.
        let x0 = if r.is_finite() { pack(&[&st.ps[0], &st.ps[1], &st.pbs[0], &st.pbs[1]]) } else { Vector::zeros(4 * n * n) };
        let g = |x: &Vector| -> Option<Vector> {
            let ms = unpack(x, n, 4);
            let s = OpenState { ps: [ms[0].clone(), ms[1].clone()], pbs: [ms[2].clone(), ms[3].clone()] };
            let (th, tb, _, _) = open_gains(d, costs, &s)?;
            let res = open_residuals(d, costs, &s, &th, &tb);
            Some(pack(&[&res[0], &res[1], &res[2], &res[3]]))
        };
        let (x, _, it) = fd_newton(x0, &g, 100);
        info.iterations += it;
        let ms = unpack(&x, n, 4);
        st = OpenState { ps: [ms[0].clone(), ms[1].clone()], pbs: [ms[2].clone(), ms[3].clone()] };
    }

    let gains = open_gains(d, costs, &st);
    let mut residuals = Residuals::new();
    let (theta, theta_bar, sigma_stack, sigma_bar_stack, gate) = match gains {
        None => {
            info.diagnostic = Some("stacked Σ or Σ̄ block is singular (reciprocal condition below 1e-12)".into());
            let m = d.m();
            let (s, _) = stacked_blocks(d, costs, &st.ps, &st.ps, false);
            let (sb, _) = stacked_blocks(d, costs, &st.ps, &st.pbs, true);
            (Mat::zeros(m, n), Mat::zeros(m, n), s, sb, Some(Gate::Singular))
        }
        Some((th, tb, s, sb)) => {
            let res = open_residuals(d, costs, &st, &th, &tb);
            for (k, name) in ["are1", "are2", "are1_hat", "are2_hat"].iter().enumerate() {
                residuals.insert((*name).into(), fro(&res[k]));
            }
            let worst = res.iter().map(fro).fold(0.0, f64::max);
            let gate = if !worst.is_finite() {
                Some(Gate::Singular)
            } else if worst > opts.are_tol {
                Some(Gate::Residual)
            } else {
                None
            };
            (th, tb, s, sb, gate)
        }
    };
    let stabilizer = check_stabilizer_dyn(d, &theta, &theta_bar);
    let gate = gate.or(if stabilizer.is_stabilizer { None } else { Some(Gate::Stabilizer) });
    info.failed_gate = gate;
    let [p1, p2] = st.ps;
    let [p1_hat, p2_hat] = st.pbs;
    OpenLoopNashSolution {
        p1,
        p2,
        p1_hat,
        p2_hat,
        theta,
        theta_bar,
        sigma_stack,
        sigma_bar_stack,
        residuals,
        status: gate.map(Gate::status).unwrap_or(Status::Solved),
        stabilizer,
        info,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopNashSolution {
    pub p1: Mat,
    pub p2: Mat,
    pub p1_hat: Mat,
    pub p2_hat: Mat,
    pub theta: Mat,
    pub theta_bar: Mat,
    /// Σ_i = R_iii + D_iᵀP_iD_i.
    pub sigma1: Mat,
    pub sigma2: Mat,
    /// Σ̄_i = R̂_iii + D̂_iᵀP_iD̂_i.
    pub sigma_bar1: Mat,
    pub sigma_bar2: Mat,
    pub residuals: Residuals,
    pub status: Status,
    pub stabilizer: StabilizerCertificate,
    pub info: SolverInfo,
}

fn closed_gains(d: &Dynamics, costs: &[PlayerCost], ps: &[Mat; 2], pbs: &[Mat; 2]) -> (Mat, Mat, Mat, Mat, Mat, Mat) {
    let (s, l) = stacked_blocks(d, costs, ps, ps, false);
    let (sb, lb) = stacked_blocks(d, costs, ps, pbs, true);
    let scale = fro(&s) + 1.0;
    let sp = pinv_scaled(&s, PINV_FLOOR, scale).pinv;
    let scale_b = fro(&sb) + 1.0;
    let sbp = pinv_scaled(&sb, PINV_FLOOR, scale_b).pinv;
    let th = -(&sp * &l);
    let tb = -(&sbp * &lb);
    (th, tb, s, l, sb, lb)
}

/// Closed-loop (Lyapunov) form of the Nash system at given gains.
fn closed_residuals(d: &Dynamics, costs: &[PlayerCost], ps: &[Mat; 2], pbs: &[Mat; 2], th: &Mat, tb: &Mat) -> [Mat; 4] {
    let a_th = &d.a + &d.b * th;
    let c_th = &d.c + &d.d * th;
    let a_cl = d.a_hat() + d.b_hat() * tb;
    let c_cl = d.c_hat() + d.d_hat() * tb;
    let mut out: [Mat; 4] = Default::default();
    for i in 0..2 {
        let c = &costs[i];
        let h = c.hat();
        let p = &ps[i];
        let pb = &pbs[i];
        out[i] = p * &a_th + a_th.transpose() * p + c_th.transpose() * p * &c_th + &c.q
            + c.s.transpose() * th
            + th.transpose() * &c.s
            + th.transpose() * &c.r * th;
        out[2 + i] = pb * &a_cl + a_cl.transpose() * pb + c_cl.transpose() * p * &c_cl + &h.q
            + h.s.transpose() * tb
            + tb.transpose() * &h.s
            + tb.transpose() * &h.r * tb;
    }
    out
}

/// The expanded (unsubstituted) form of the same equations.
fn closed_residuals_expanded(d: &Dynamics, costs: &[PlayerCost], ps: &[Mat; 2], pbs: &[Mat; 2], th: &Mat, tb: &Mat) -> [Mat; 4] {
    let (ah, bh, ch, dh) = (d.a_hat(), d.b_hat(), d.c_hat(), d.d_hat());
    let mut out: [Mat; 4] = Default::default();
    for i in 0..2 {
        let c = &costs[i];
        let h = c.hat();
        let p = &ps[i];
        let pb = &pbs[i];
        let k = p * &d.b + d.c.transpose() * p * &d.d + c.s.transpose();
        out[i] = p * &d.a + d.a.transpose() * p + d.c.transpose() * p * &d.c + &c.q
            + th.transpose() * (&c.r + d.d.transpose() * p * &d.d) * th
            + &k * th
            + th.transpose() * k.transpose();
        let kh = pb * &bh + ch.transpose() * p * &dh + h.s.transpose();
        out[2 + i] = pb * &ah + ah.transpose() * pb + ch.transpose() * p * &ch + &h.q
            + tb.transpose() * (&h.r + dh.transpose() * p * &dh) * tb
            + &kh * tb
            + tb.transpose() * kh.transpose();
    }
    out
}

fn player_sigma(d: &Dynamics, r: &Mat, dd: &Mat, p: &Mat, i: usize) -> Mat {
    let rr = d.player_rows(i);
    let di = crate::linops::cols(dd, rr.clone());
    r.view((rr.start, rr.start), (rr.len(), rr.len())).into_owned() + di.transpose() * p * di
}

pub fn solve_closedloop_nash_are(spec: &GameSpec, opts: &SolveOptions) -> ClosedLoopNashSolution {
    let d = &spec.dynamics;
    let n = d.n;
    let m = d.m();
    let costs = &spec.players;
    let mut info = SolverInfo::default();
    let id = Mat::identity(n, n);

    let ol = solve_openloop_nash_are(spec, opts);
    info.iterations += ol.info.iterations;
    let (mut th, mut tb) = if ol.status != Status::Diverged && ol.theta.iter().all(|v| v.is_finite()) {
        (ol.theta.clone(), ol.theta_bar.clone())
    } else {
        (Mat::zeros(m, n), Mat::zeros(m, n))
    };

    // Policy-style iteration: Lyapunov solves for P_i, P̂_i at fixed gains, then a gain update.
    let evaluate = |th: &Mat, tb: &Mat| -> Option<([Mat; 2], [Mat; 2])> {
        let a_th = &d.a + &d.b * th;
        let c_th = &d.c + &d.d * th;
        let a_cl = d.a_hat() + d.b_hat() * tb;
        let c_cl = d.c_hat() + d.d_hat() * tb;
        let mut ps: [Mat; 2] = Default::default();
        let mut pbs: [Mat; 2] = Default::default();
        for i in 0..2 {
            let c = &costs[i];
            let h = c.hat();
            let w = &c.q + c.s.transpose() * th + th.transpose() * &c.s + th.transpose() * &c.r * th;
            ps[i] = solve_stochastic_lyapunov(&a_th.transpose(), &c_th.transpose(), &sym(&w)).ok()?;
            let wb = c_cl.transpose() * &ps[i] * &c_cl + &h.q + h.s.transpose() * tb + tb.transpose() * &h.s + tb.transpose() * &h.r * tb;
            pbs[i] = solve_lyapunov(&a_cl.transpose(), &sym(&wb)).ok()?;
        }
        Some((ps, pbs))
    };
    let total = |ps: &[Mat; 2], pbs: &[Mat; 2]| -> f64 {
        let (t, b, _, _, _, _) = closed_gains(d, costs, ps, pbs);
        closed_residuals(d, costs, ps, pbs, &t, &b).iter().map(|x| fro(x).powi(2)).sum::<f64>().sqrt()
    };

    let omega = opts.damping.clamp(1e-3, 1.0);
    let mut state: Option<([Mat; 2], [Mat; 2])> = None;
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let budget = opts.max_iter.min(200);
    for _ in 0..budget {
        info.iterations += 1;
        let Some((ps, pbs)) = evaluate(&th, &tb) else { break };
        let r = total(&ps, &pbs);
        let (t_new, b_new, _, _, _, _) = closed_gains(d, costs, &ps, &pbs);
        state = Some((ps, pbs));
        if r <= opts.are_tol * 1e-3 {
            break;
        }
        if r < 0.99 * best {
            best = r;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= 10 {
                break;
            }
        }
        th = &th * (1.0 - omega) + &t_new * omega;
        tb = &tb * (1.0 - omega) + &b_new * omega;
    }

    let (mut ps, mut pbs) = match state {
        Some(st) => st,
        None => (
            [sym(&ol.p1), sym(&ol.p2)],
            [sym(&ol.p1_hat), sym(&ol.p2_hat)],
        ),
    };
    if !(total(&ps, &pbs) <= opts.are_tol * 1e-3) {
        let k = n * (n + 1) / 2;
        let x0 = pack_sym(&[&ps[0], &ps[1], &pbs[0], &pbs[1]]);
        let g = |x: &Vector| -> Option<Vector> {
            let ms = unpack_sym(x, n, 4);
            let p2 = [ms[0].clone(), ms[1].clone()];
            let pb2 = [ms[2].clone(), ms[3].clone()];
            let (t, b, _, _, _, _) = closed_gains(d, costs, &p2, &pb2);
            let res = closed_residuals(d, costs, &p2, &pb2, &t, &b);
            let v = pack_sym(&[&res[0], &res[1], &res[2], &res[3]]);
            v.iter().all(|e| e.is_finite()).then_some(v)
        };
        let (x, _, it) = fd_newton(x0, &g, 100);
        info.iterations += it;
        let _ = k;
        let ms = unpack_sym(&x, n, 4);
        ps = [ms[0].clone(), ms[1].clone()];
        pbs = [ms[2].clone(), ms[3].clone()];
    }
    let _ = id;

    let (theta, theta_bar, s, l, sb, lb) = closed_gains(d, costs, &ps, &pbs);
    let lyap = closed_residuals(d, costs, &ps, &pbs, &theta, &theta_bar);
    let expanded = closed_residuals_expanded(d, costs, &ps, &pbs, &theta, &theta_bar);
    let mut residuals = Residuals::new();
    for (k, name) in ["are1", "are2", "are1_hat", "are2_hat"].iter().enumerate() {
        residuals.insert((*name).into(), fro(&expanded[k]));
        residuals.insert(format!("{name}_closed_form"), fro(&lyap[k]));
    }
    let stat1 = fro(&(&s * &theta + &l));
    let stat2 = fro(&(&sb * &theta_bar + &lb));
    residuals.insert("stationarity1".into(), stat1);
    residuals.insert("stationarity2".into(), stat2);
    let asym = ps.iter().chain(pbs.iter()).map(asymmetry).fold(0.0, f64::max);
    residuals.insert("asymmetry".into(), asym);

    let sigma1 = player_sigma(d, &costs[0].r, &d.d, &ps[0], 1);
    let sigma2 = player_sigma(d, &costs[1].r, &d.d, &ps[1], 2);
    let dh = d.d_hat();
    let sigma_bar1 = player_sigma(d, &costs[0].hat().r, &dh, &ps[0], 1);
    let sigma_bar2 = player_sigma(d, &costs[1].hat().r, &dh, &ps[1], 2);
    let stabilizer = check_stabilizer_dyn(d, &theta, &theta_bar);

    let worst = lyap.iter().chain(expanded.iter()).map(fro).fold(0.0, f64::max);
    let gate = if !worst.is_finite() {
        Some(Gate::Singular)
    } else if worst > opts.are_tol {
        Some(Gate::Residual)
    } else if asym > crate::model::TAU_SYM * (1.0 + ps.iter().map(fro).fold(0.0, f64::max)) {
        Some(Gate::Symmetry)
    } else if [&sigma1, &sigma2, &sigma_bar1, &sigma_bar2].iter().any(|x| min_sym_eig(x) < -TAU_PSD) {
        Some(Gate::SignCondition)
    } else if stat1 > opts.are_tol.max(1e-8 * fro(&l)) || stat2 > opts.are_tol.max(1e-8 * fro(&lb)) {
        Some(Gate::RangeCondition)
    } else if !stabilizer.is_stabilizer {
        Some(Gate::Stabilizer)
    } else {
        None
    };
    info.failed_gate = gate;
    let [p1, p2] = ps;
    let [p1_hat, p2_hat] = pbs;
    ClosedLoopNashSolution {
        p1,
        p2,
        p1_hat,
        p2_hat,
        theta,
        theta_bar,
        sigma1,
        sigma2,
        sigma_bar1,
        sigma_bar2,
        residuals,
        status: gate.map(Gate::status).unwrap_or(Status::Solved),
        stabilizer,
        info,
    }
}

fn pack_sym(ms: &[&Mat]) -> Vector {
    let mut v = Vec::new();
    for m in ms {
        v.extend(vech(m).iter());
    }
    Vector::from_vec(v)
}

fn unpack_sym(v: &Vector, n: usize, count: usize) -> Vec<Mat> {
    let k = n * (n + 1) / 2;
    (0..count).map(|i| unvech(&v.rows(i * k, k).into_owned(), n)).collect()
}

// ---------------------------------------------------------------------------
// Residual recomputation

/// Any solver output.
#[derive(Debug, Clone, PartialEq)]
pub enum Solution {
    Control(ControlAreSolution),
    OpenLoopNash(OpenLoopNashSolution),
    ClosedLoopNash(ClosedLoopNashSolution),
    ZeroSum(ZeroSumSolution),
}

impl Solution {
    pub fn status(&self) -> Status {
        match self {
            Solution::Control(s) => s.status,
            Solution::OpenLoopNash(s) => s.status,
            Solution::ClosedLoopNash(s) => s.status,
            Solution::ZeroSum(s) => s.status,
        }
    }

    pub fn gains(&self) -> (&Mat, &Mat) {
        match self {
            Solution::Control(s) => (&s.theta, &s.theta_bar),
            Solution::OpenLoopNash(s) => (&s.theta, &s.theta_bar),
            Solution::ClosedLoopNash(s) => (&s.theta, &s.theta_bar),
            Solution::ZeroSum(s) => (&s.theta, &s.theta_bar),
        }
    }

    pub fn stabilizer(&self) -> &StabilizerCertificate {
        match self {
            Solution::Control(s) => &s.stabilizer,
            Solution::OpenLoopNash(s) => &s.stabilizer,
            Solution::ClosedLoopNash(s) => &s.stabilizer,
            Solution::ZeroSum(s) => &s.stabilizer,
        }
    }

    pub fn info(&self) -> &SolverInfo {
        match self {
            Solution::Control(s) => &s.info,
            Solution::OpenLoopNash(s) => &s.info,
            Solution::ClosedLoopNash(s) => &s.info,
            Solution::ZeroSum(s) => &s.info,
        }
    }

    pub fn residuals(&self) -> &Residuals {
        match self {
            Solution::Control(s) => &s.residuals,
            Solution::OpenLoopNash(s) => &s.residuals,
            Solution::ClosedLoopNash(s) => &s.residuals,
            Solution::ZeroSum(s) => &s.residuals,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Frobenius norm of every equation of the system.
    pub equations: Residuals,
    /// Range-condition residuals ‖(I − ΣΣ†)L‖.
    pub range: Residuals,
    /// Extreme eigenvalues of the sign-gated blocks (min for ⪰, max for ⪯).
    pub sign: Residuals,
}

impl ResidualReport {
    pub fn max_equation(&self) -> f64 {
        self.equations.values().cloned().fold(0.0, f64::max)
    }
}

fn single_cost_report(d: &Dynamics, c: &PlayerCost, p: &Mat, ph: &Mat, th: &Mat, tb: &Mat) -> ResidualReport {
    let sp = synth_p(d, c, p, 0.0);
    let sh = synth_phat(d, c, p, ph, 0.0);
    let mut rep = ResidualReport::default();
    rep.equations.insert("are1".into(), fro(&riccati_p(d, c, p, &sp)));
    rep.equations.insert("are2".into(), fro(&riccati_phat(d, c, p, ph, &sh)));
    rep.equations.insert("synthesis1".into(), fro(&(&sp.sigma * th + &sp.l)));
    rep.equations.insert("synthesis2".into(), fro(&(&sh.sigma * tb + &sh.l)));
    rep.range.insert("range1".into(), sp.range_residual());
    rep.range.insert("range2".into(), sh.range_residual());
    rep
}

/// Recomputes every equation of the relevant system at the stored solution.
pub fn are_residuals(solution: &Solution, spec: &GameSpec) -> Result<ResidualReport, crate::model::ModelError> {
    use crate::model::{zero_sum_reduce, ModelError};
    let d = &spec.dynamics;
    let check = |m: &Mat, r: usize, c: usize, name: &str| -> Result<(), ModelError> {
        if m.shape() != (r, c) {
            return Err(ModelError::DimensionMismatch(format!("{name} is {:?}, expected {r}x{c}", m.shape())));
        }
        Ok(())
    };
    let (n, mm) = (d.n, d.m());
    match solution {
        Solution::Control(s) => {
            let cs = spec.control()?;
            for (m, name) in [(&s.p, "P"), (&s.p_hat, "P_hat")] {
                check(m, n, n, name)?;
            }
            for (m, name) in [(&s.theta, "Theta"), (&s.theta_bar, "Theta_bar")] {
                check(m, mm, n, name)?;
            }
            let mut rep = single_cost_report(d, &cs.cost, &s.p, &s.p_hat, &s.theta, &s.theta_bar);
            let sp = synth_p(d, &cs.cost, &s.p, 0.0);
            let sh = synth_phat(d, &cs.cost, &s.p, &s.p_hat, 0.0);
            rep.sign.insert("sigma_min_eig".into(), min_sym_eig(&sp.sigma));
            rep.sign.insert("sigma_bar_min_eig".into(), min_sym_eig(&sh.sigma));
            Ok(rep)
        }
        Solution::ZeroSum(s) => {
            let zs = zero_sum_reduce(spec)?;
            for (m, name) in [(&s.pc, "Pc"), (&s.pc_hat, "Pc_hat")] {
                check(m, n, n, name)?;
            }
            for (m, name) in [(&s.theta, "Theta"), (&s.theta_bar, "Theta_bar")] {
                check(m, mm, n, name)?;
            }
            let mut rep = single_cost_report(d, &zs.cost, &s.pc, &s.pc_hat, &s.theta, &s.theta_bar);
            let mg = zero_sum_sign_margins(d, &zs.cost, &s.pc);
            rep.sign.insert("r11_min_eig".into(), mg[0]);
            rep.sign.insert("r11_hat_min_eig".into(), mg[1]);
            rep.sign.insert("r22_max_eig".into(), mg[2]);
            rep.sign.insert("r22_hat_max_eig".into(), mg[3]);
            Ok(rep)
        }
        Solution::OpenLoopNash(s) => {
            if !spec.is_game() {
                return Err(ModelError::DimensionMismatch("open-loop Nash needs two players".into()));
            }
            for (m, name) in [(&s.p1, "P1"), (&s.p2, "P2"), (&s.p1_hat, "P1_hat"), (&s.p2_hat, "P2_hat")] {
                check(m, n, n, name)?;
            }
            for (m, name) in [(&s.theta, "Theta"), (&s.theta_bar, "Theta_bar")] {
                check(m, mm, n, name)?;
            }
            let st = OpenState { ps: [s.p1.clone(), s.p2.clone()], pbs: [s.p1_hat.clone(), s.p2_hat.clone()] };
            let res = open_residuals(d, &spec.players, &st, &s.theta, &s.theta_bar);
            let mut rep = ResidualReport::default();
            for (k, name) in ["are1", "are2", "are1_hat", "are2_hat"].iter().enumerate() {
                rep.equations.insert((*name).into(), fro(&res[k]));
            }
            let (sg, l) = stacked_blocks(d, &spec.players, &st.ps, &st.ps, false);
            let (sgb, lb) = stacked_blocks(d, &spec.players, &st.ps, &st.pbs, true);
            rep.equations.insert("synthesis1".into(), fro(&(&sg * &s.theta + &l)));
            rep.equations.insert("synthesis2".into(), fro(&(&sgb * &s.theta_bar + &lb)));
            rep.sign.insert("sigma_stack_rcond".into(), rcond(&sg));
            rep.sign.insert("sigma_bar_stack_rcond".into(), rcond(&sgb));
            Ok(rep)
        }
        Solution::ClosedLoopNash(s) => {
            if !spec.is_game() {
                return Err(ModelError::DimensionMismatch("closed-loop Nash needs two players".into()));
            }
            for (m, name) in [(&s.p1, "P1"), (&s.p2, "P2"), (&s.p1_hat, "P1_hat"), (&s.p2_hat, "P2_hat")] {
                check(m, n, n, name)?;
            }
            for (m, name) in [(&s.theta, "Theta"), (&s.theta_bar, "Theta_bar")] {
                check(m, mm, n, name)?;
            }
            let ps = [s.p1.clone(), s.p2.clone()];
            let pbs = [s.p1_hat.clone(), s.p2_hat.clone()];
            let res = closed_residuals_expanded(d, &spec.players, &ps, &pbs, &s.theta, &s.theta_bar);
            let alt = closed_residuals(d, &spec.players, &ps, &pbs, &s.theta, &s.theta_bar);
            let mut rep = ResidualReport::default();
            for (k, name) in ["are1", "are2", "are1_hat", "are2_hat"].iter().enumerate() {
                rep.equations.insert((*name).into(), fro(&res[k]));
                rep.equations.insert(format!("{name}_closed_form"), fro(&alt[k]));
            }
            let (sg, l) = stacked_blocks(d, &spec.players, &ps, &ps, false);
            let (sgb, lb) = stacked_blocks(d, &spec.players, &ps, &pbs, true);
            rep.equations.insert("stationarity1".into(), fro(&(&sg * &s.theta + &l)));
            rep.equations.insert("stationarity2".into(), fro(&(&sgb * &s.theta_bar + &lb)));
            rep.equations.insert("asymmetry".into(), ps.iter().chain(pbs.iter()).map(asymmetry).fold(0.0, f64::max));
            let dh = d.d_hat();
            rep.sign.insert("sigma1_min_eig".into(), min_sym_eig(&player_sigma(d, &spec.players[0].r, &d.d, &ps[0], 1)));
            rep.sign.insert("sigma2_min_eig".into(), min_sym_eig(&player_sigma(d, &spec.players[1].r, &d.d, &ps[1], 2)));
            rep.sign.insert("sigma_bar1_min_eig".into(), min_sym_eig(&player_sigma(d, &spec.players[0].hat().r, &dh, &ps[0], 1)));
            rep.sign.insert("sigma_bar2_min_eig".into(), min_sym_eig(&player_sigma(d, &spec.players[1].hat().r, &dh, &ps[1], 2)));
            Ok(rep)
        }
    }
}

/// Problem-generic access to the single-cost system (control or zero-sum).
pub fn single_cost<P: Problem>(spec: &P) -> (&Dynamics, &PlayerCost) {
    (spec.dynamics(), spec.costs()[0])
}

// ---------------------------------------------------------------------------
// Mode dispatch and matrix round-trips

/// Which equilibrium system to solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Control,
    NashOpen,
    NashClosed,
    ZerosumOpen,
    ZerosumClosed,
}

impl Mode {
    pub const ALL: [Mode; 5] = [Mode::Control, Mode::NashOpen, Mode::NashClosed, Mode::ZerosumOpen, Mode::ZerosumClosed];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Control => "control",
            Mode::NashOpen => "nash-open",
            Mode::NashClosed => "nash-closed",
            Mode::ZerosumOpen => "zerosum-open",
            Mode::ZerosumClosed => "zerosum-closed",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        Mode::ALL.into_iter().find(|m| m.name() == s)
    }

    pub fn of(solution: &Solution) -> Mode {
        match solution {
            Solution::Control(_) => Mode::Control,
            Solution::OpenLoopNash(_) => Mode::NashOpen,
            Solution::ClosedLoopNash(_) => Mode::NashClosed,
            Solution::ZeroSum(s) if s.closed_loop => Mode::ZerosumClosed,
            Solution::ZeroSum(_) => Mode::ZerosumOpen,
        }
    }
}

/// Runs the solver for `mode`, checking that the spec has the right shape.
pub fn solve(spec: &GameSpec, mode: Mode, opts: &SolveOptions) -> Result<Solution, crate::model::ModelError> {
    use crate::model::{zero_sum_reduce, ModelError};
    Ok(match mode {
        Mode::Control => Solution::Control(solve_control_are(&spec.control()?, opts)),
        Mode::NashOpen | Mode::NashClosed => {
            if !spec.is_game() {
                return Err(ModelError::NotGame(format!("mode {} needs two cost blocks", mode.name())));
            }
            if mode == Mode::NashOpen {
                Solution::OpenLoopNash(solve_openloop_nash_are(spec, opts))
            } else {
                Solution::ClosedLoopNash(solve_closedloop_nash_are(spec, opts))
            }
        }
        Mode::ZerosumOpen => Solution::ZeroSum(solve_zerosum_openrep_are(&zero_sum_reduce(spec)?, opts)),
        Mode::ZerosumClosed => Solution::ZeroSum(solve_zerosum_are(&zero_sum_reduce(spec)?, opts)),
    })
}

impl Solution {
    /// Named solution matrices, in a fixed order.
    pub fn matrices(&self) -> Vec<(&'static str, Mat)> {
        match self {
            Solution::Control(s) => vec![
                ("P", s.p.clone()),
                ("P_hat", s.p_hat.clone()),
                ("Sigma", s.sigma.clone()),
                ("Sigma_bar", s.sigma_bar.clone()),
                ("Theta", s.theta.clone()),
                ("Theta_bar", s.theta_bar.clone()),
            ],
            Solution::ZeroSum(s) => vec![
                ("Pc", s.pc.clone()),
                ("Pc_hat", s.pc_hat.clone()),
                ("Sigma_c", s.sigma_c.clone()),
                ("Sigma_bar_c", s.sigma_bar_c.clone()),
                ("Theta", s.theta.clone()),
                ("Theta_bar", s.theta_bar.clone()),
            ],
            Solution::OpenLoopNash(s) => vec![
                ("P1", s.p1.clone()),
                ("P2", s.p2.clone()),
                ("P1_hat", s.p1_hat.clone()),
                ("P2_hat", s.p2_hat.clone()),
                ("Sigma_stack", s.sigma_stack.clone()),
                ("Sigma_bar_stack", s.sigma_bar_stack.clone()),
                ("Theta", s.theta.clone()),
                ("Theta_bar", s.theta_bar.clone()),
            ],
            Solution::ClosedLoopNash(s) => vec![
                ("P1", s.p1.clone()),
                ("P2", s.p2.clone()),
                ("P1_hat", s.p1_hat.clone()),
                ("P2_hat", s.p2_hat.clone()),
                ("Sigma1", s.sigma1.clone()),
                ("Sigma2", s.sigma2.clone()),
                ("Sigma_bar1", s.sigma_bar1.clone()),
                ("Sigma_bar2", s.sigma_bar2.clone()),
                ("Theta", s.theta.clone()),
                ("Theta_bar", s.theta_bar.clone()),
            ],
        }
    }

    /// Rebuilds a solution from its primary matrices (the Riccati solutions and the
    /// gains); derived blocks, residuals and the stabilizer certificate are recomputed.
    pub fn from_matrices(
        mode: Mode,
        mats: &BTreeMap<String, Mat>,
        status: Status,
        spec: &GameSpec,
    ) -> Result<Solution, crate::model::ModelError> {
        use crate::model::{zero_sum_reduce, ModelError};
        let d = &spec.dynamics;
        let get = |k: &str| mats.get(k).cloned().ok_or_else(|| ModelError::Schema(format!("solution is missing \"{k}\"")));
        let theta = get("Theta")?;
        let theta_bar = get("Theta_bar")?;
        let (n, m) = (d.n, d.m());
        for (x, name, r, c) in [(&theta, "Theta", m, n), (&theta_bar, "Theta_bar", m, n)] {
            if x.shape() != (r, c) {
                return Err(ModelError::DimensionMismatch(format!("{name} is {:?}, expected {r}x{c}", x.shape())));
            }
        }
        let square = |k: &str| -> Result<Mat, ModelError> {
            let x = get(k)?;
            if x.shape() != (n, n) {
                return Err(ModelError::DimensionMismatch(format!("{k} is {:?}, expected {n}x{n}", x.shape())));
            }
            Ok(x)
        };
        let stabilizer = check_stabilizer_dyn(d, &theta, &theta_bar);
        let info = SolverInfo::default();
        let mut sol = match mode {
            Mode::Control => {
                let cs = spec.control()?;
                let (p, p_hat) = (square("P")?, square("P_hat")?);
                let sigma = synth_p(d, &cs.cost, &p, 0.0).sigma;
                let sigma_bar = synth_phat(d, &cs.cost, &p, &p_hat, 0.0).sigma;
                Solution::Control(ControlAreSolution { p, p_hat, sigma, sigma_bar, theta, theta_bar, residuals: Residuals::new(), status, stabilizer, info })
            }
            Mode::ZerosumOpen | Mode::ZerosumClosed => {
                let zs = zero_sum_reduce(spec)?;
                let (pc, pc_hat) = (square("Pc")?, square("Pc_hat")?);
                let sigma_c = synth_p(d, &zs.cost, &pc, 0.0).sigma;
                let sigma_bar_c = synth_phat(d, &zs.cost, &pc, &pc_hat, 0.0).sigma;
                let sign_margins = zero_sum_sign_margins(d, &zs.cost, &pc);
                let sign_checks = [
                    sign_margins[0] >= -TAU_PSD,
                    sign_margins[1] >= -TAU_PSD,
                    sign_margins[2] <= TAU_PSD,
                    sign_margins[3] <= TAU_PSD,
                ];
                Solution::ZeroSum(ZeroSumSolution {
                    closed_loop: mode == Mode::ZerosumClosed,
                    pc,
                    pc_hat,
                    sigma_c,
                    sigma_bar_c,
                    theta,
                    theta_bar,
                    sign_checks,
                    sign_margins,
                    residuals: Residuals::new(),
                    status,
                    stabilizer,
                    roots: Vec::new(),
                    hat_roots: Vec::new(),
                    info,
                })
            }
            Mode::NashOpen | Mode::NashClosed => {
                if !spec.is_game() {
                    return Err(ModelError::NotGame(format!("mode {} needs two cost blocks", mode.name())));
                }
                let ps = [square("P1")?, square("P2")?];
                let pbs = [square("P1_hat")?, square("P2_hat")?];
                let [p1, p2] = ps.clone();
                let [p1_hat, p2_hat] = pbs.clone();
                if mode == Mode::NashOpen {
                    let (sigma_stack, _) = stacked_blocks(d, &spec.players, &ps, &ps, false);
                    let (sigma_bar_stack, _) = stacked_blocks(d, &spec.players, &ps, &pbs, true);
                    Solution::OpenLoopNash(OpenLoopNashSolution {
                        p1, p2, p1_hat, p2_hat, theta, theta_bar, sigma_stack, sigma_bar_stack,
                        residuals: Residuals::new(), status, stabilizer, info,
                    })
                } else {
                    let dh = d.d_hat();
                    let sigma1 = player_sigma(d, &spec.players[0].r, &d.d, &ps[0], 1);
                    let sigma2 = player_sigma(d, &spec.players[1].r, &d.d, &ps[1], 2);
                    let sigma_bar1 = player_sigma(d, &spec.players[0].hat().r, &dh, &ps[0], 1);
                    let sigma_bar2 = player_sigma(d, &spec.players[1].hat().r, &dh, &ps[1], 2);
                    Solution::ClosedLoopNash(ClosedLoopNashSolution {
                        p1, p2, p1_hat, p2_hat, theta, theta_bar, sigma1, sigma2, sigma_bar1, sigma_bar2,
                        residuals: Residuals::new(), status, stabilizer, info,
                    })
                }
            }
        };
        let rep = are_residuals(&sol, spec)?;
        let merged: Residuals = rep.equations.into_iter().chain(rep.range).collect();
        match &mut sol {
            Solution::Control(s) => s.residuals = merged,
            Solution::ZeroSum(s) => s.residuals = merged,
            Solution::OpenLoopNash(s) => s.residuals = merged,
            Solution::ClosedLoopNash(s) => s.residuals = merged,
        }
        Ok(sol)
    }
}
