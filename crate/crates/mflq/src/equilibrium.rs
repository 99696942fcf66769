//! Strategies, offsets, values and equilibrium certificates built on top of
//! the Riccati solutions.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linops::{cols, fro, max_sym_eig, min_sym_eig, pinv_scaled, rows, solve_lyapunov, solve_stochastic_lyapunov, sym, Mat, Vector};
use crate::model::{zero_sum_reduce, Dynamics, FeedbackStrategy, ForcingKind, GameSpec, ModelError, PlayerCost, Profile};
use crate::riccati::{are_residuals, synth_p, synth_phat, FreeComponents, Solution, Status, TAU_PSD, TAU_SING};
use crate::stabilizability::{check_stabilizer_dyn, StabilizerCertificate};

#[derive(Debug, Error)]
pub enum EquilibriumError {
    #[error("solution status is {0:?}, not solved")]
    NotSolved(Status),
    #[error("resolvent singular at rate {0}")]
    ResolventSingular(f64),
    #[error("offset range condition fails at rate {rate} (residual {residual:e})")]
    RangeConditionFailed { rate: f64, residual: f64 },
    #[error("strategy is not stabilizing; the cost is infinite")]
    NotStabilizing,
    #[error("homogeneous moments diverge before the horizon (at t = {0})")]
    UnstableHomogeneousSystem(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Deterministic offsets: `η̄_i(t) = Σ η̄ᵢᵏ e^(−λ_k t)` and `v*(t)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OffsetSolution {
    /// One profile per cost block (one for control and zero-sum problems).
    pub eta_bar: Vec<Profile>,
    pub v_star: Profile,
    /// Residual of the per-rate linear system (the offset range condition).
    pub range_residuals: Vec<(f64, f64)>,
}

/// Linear-system data for one cost block.
struct Block<'a> {
    cost: &'a PlayerCost,
    p: Mat,
    p_hat: Mat,
    q: Profile,
    rho: Profile,
    rows: std::ops::Range<usize>,
}

enum Form {
    /// Feedback (closed-loop) equilibrium: drift `Â_clᵀ`, coupling `W_iᵀ`.
    Closed,
    /// Closed-loop representation of an open-loop equilibrium.
    Open,
}

fn blocks<'a>(spec: &'a GameSpec, solution: &Solution, zs_cost: Option<&'a PlayerCost>) -> Result<(Vec<Block<'a>>, Form), EquilibriumError> {
    let d = &spec.dynamics;
    let f = &spec.forcing;
    let all = 0..d.m();
    Ok(match solution {
        Solution::Control(s) => (
            vec![Block {
                cost: &spec.players[0],
                p: s.p.clone(),
                p_hat: s.p_hat.clone(),
                q: f.profile(ForcingKind::Q1),
                rho: f.profile(ForcingKind::Rho1),
                rows: all,
            }],
            Form::Closed,
        ),
        Solution::ZeroSum(s) => (
            vec![Block {
                cost: zs_cost.expect("zero-sum cost"),
                p: s.pc.clone(),
                p_hat: s.pc_hat.clone(),
                q: f.profile(ForcingKind::Q1),
                rho: f.profile(ForcingKind::Rho1),
                rows: all,
            }],
            Form::Closed,
        ),
        Solution::ClosedLoopNash(s) => (
            vec![
                Block { cost: &spec.players[0], p: s.p1.clone(), p_hat: s.p1_hat.clone(), q: f.profile(ForcingKind::Q1), rho: f.profile(ForcingKind::Rho1), rows: d.player_rows(1) },
                Block { cost: &spec.players[1], p: s.p2.clone(), p_hat: s.p2_hat.clone(), q: f.profile(ForcingKind::Q2), rho: f.profile(ForcingKind::Rho2), rows: d.player_rows(2) },
            ],
            Form::Closed,
        ),
        Solution::OpenLoopNash(s) => (
            vec![
                Block { cost: &spec.players[0], p: s.p1.clone(), p_hat: s.p1_hat.clone(), q: f.profile(ForcingKind::Q1), rho: f.profile(ForcingKind::Rho1), rows: d.player_rows(1) },
                Block { cost: &spec.players[1], p: s.p2.clone(), p_hat: s.p2_hat.clone(), q: f.profile(ForcingKind::Q2), rho: f.profile(ForcingKind::Rho2), rows: d.player_rows(2) },
            ],
            Form::Open,
        ),
    })
}

/// Solves for the deterministic offsets of the equilibrium strategy.
///
/// For each forcing rate λ and each cost block i the profile amplitudes satisfy
/// `(Â_clᵀ − λ)η̄ᵢ + Wᵢᵀv + P̂ᵢb + Ĉ_clᵀPᵢσ + qᵢ + Θ̄ᵀρᵢ = 0` and, on block i's rows,
/// `(R̂ᵢ + D̂ᵀPᵢD̂)v + B̂ᵀη̄ᵢ + D̂ᵀPᵢσ + ρᵢ = 0`, where
/// `Wᵢ = B̂ᵀP̂ᵢ + D̂ᵀPᵢĈ_cl + Ŝᵢ + R̂ᵢΘ̄`. (For a single cost block `W = 0`.)
pub fn solve_offsets(spec: &GameSpec, solution: &Solution) -> Result<OffsetSolution, EquilibriumError> {
    let zs = match solution {
        Solution::ZeroSum(_) => Some(zero_sum_reduce(spec)?),
        _ => None,
    };
    let (blks, form) = blocks(spec, solution, zs.as_ref().map(|z| &z.cost))?;
    let d = &spec.dynamics;
    let (_, tb) = solution.gains();
    offsets_for(d, &spec.forcing, &blks, &form, tb)
}

fn offsets_for(
    d: &Dynamics,
    forcing: &crate::model::Forcing,
    blks: &[Block],
    form: &Form,
    tb: &Mat,
) -> Result<OffsetSolution, EquilibriumError> {
    let n = d.n;
    let m = d.m();
    let k = blks.len();
    let (ah, bh, ch, dh) = (d.a_hat(), d.b_hat(), d.c_hat(), d.d_hat());
    let a_cl = &ah + &bh * tb;
    let c_cl = &ch + &dh * tb;
    let b = forcing.profile(ForcingKind::B);
    let sigma = forcing.profile(ForcingKind::Sigma);

    let mut rates: Vec<f64> = Vec::new();
    for p in [&b, &sigma].into_iter().chain(blks.iter().flat_map(|bl| [&bl.q, &bl.rho])) {
        for (_, l) in &p.terms {
            if !rates.iter().any(|r| (r - l).abs() <= 1e-14 * l.abs()) {
                rates.push(*l);
            }
        }
    }
    rates.sort_by(|x, y| x.partial_cmp(y).unwrap());

    let mut out = OffsetSolution { eta_bar: vec![Profile::zero(); k], v_star: Profile::zero(), range_residuals: Vec::new() };
    let dim = k * n + m;
    for &lam in &rates {
        let b0 = b.at(lam, n);
        let s0 = sigma.at(lam, n);
        let mut big = Mat::zeros(dim, dim);
        let mut rhs = Vector::zeros(dim);
        let mut stat_rows = 0;
        for (i, bl) in blks.iter().enumerate() {
            let h = bl.cost.hat();
            let q0 = bl.q.at(lam, n);
            let r0 = bl.rho.at(lam, m);
            let (drift, coupling, f0) = match form {
                Form::Closed => {
                    let w = bh.transpose() * &bl.p_hat + dh.transpose() * &bl.p * &c_cl + &h.s + &h.r * tb;
                    let drift = a_cl.transpose() - Mat::identity(n, n) * lam;
                    let smin = drift.clone().singular_values().min();
                    if smin <= 1e-13 * (1.0 + fro(&drift)) {
                        return Err(EquilibriumError::ResolventSingular(lam));
                    }
                    let f0 = &bl.p_hat * &b0 + c_cl.transpose() * &bl.p * &s0 + &q0 + tb.transpose() * &r0;
                    (drift, w.transpose(), f0)
                }
                Form::Open => {
                    let drift = ah.transpose() - Mat::identity(n, n) * lam;
                    let coupling = &bl.p_hat * &bh + ch.transpose() * &bl.p * &dh + h.s.transpose();
                    let f0 = &bl.p_hat * &b0 + ch.transpose() * &bl.p * &s0 + &q0;
                    (drift, coupling, f0)
                }
            };
            big.view_mut((i * n, i * n), (n, n)).copy_from(&drift);
            big.view_mut((i * n, k * n), (n, m)).copy_from(&coupling);
            rhs.rows_mut(i * n, n).copy_from(&(-f0));

            let rr = bl.rows.clone();
            let mv = &h.r + dh.transpose() * &bl.p * &dh;
            let r_off = k * n + stat_rows;
            big.view_mut((r_off, k * n), (rr.len(), m)).copy_from(&rows(&mv, rr.clone()));
            big.view_mut((r_off, i * n), (rr.len(), n)).copy_from(&cols(&bh, rr.clone()).transpose());
            let g = dh.transpose() * &bl.p * &s0 + &r0;
            rhs.rows_mut(r_off, rr.len()).copy_from(&(-g.rows(rr.start, rr.len())));
            stat_rows += rr.len();
        }
        let scale = fro(&big) + 1.0;
        let pi = pinv_scaled(&big, 1e-12, scale).pinv;
        let z = &pi * &rhs;
        let residual = (&big * &z - &rhs).norm();
        out.range_residuals.push((lam, residual));
        if residual > 1e-8 * (1.0 + rhs.norm()) {
            return Err(EquilibriumError::RangeConditionFailed { rate: lam, residual });
        }
        for i in 0..k {
            out.eta_bar[i].push(z.rows(i * n, n).into_owned(), lam);
        }
        out.v_star.push(z.rows(k * n, m).into_owned(), lam);
    }
    Ok(out)
}

fn regain(spec: &GameSpec, solution: &Solution, free: &FreeComponents) -> Result<(Mat, Mat), EquilibriumError> {
    let d = &spec.dynamics;
    match solution {
        Solution::Control(s) => {
            let c = &spec.players[0];
            Ok((synth_p(d, c, &s.p, 0.0).gain(Some(&free.theta)), synth_phat(d, c, &s.p, &s.p_hat, 0.0).gain(Some(&free.theta_bar))))
        }
        Solution::ZeroSum(s) => {
            let z = zero_sum_reduce(spec)?;
            Ok((
                synth_p(d, &z.cost, &s.pc, 0.0).gain(Some(&free.theta)),
                synth_phat(d, &z.cost, &s.pc, &s.pc_hat, 0.0).gain(Some(&free.theta_bar)),
            ))
        }
        // Nash gains come from invertible stacked blocks; nothing is free.
        _ => {
            let (t, b) = solution.gains();
            Ok((t.clone(), b.clone()))
        }
    }
}

/// Full equilibrium strategy (gains plus offset) from a solved system.
pub fn synthesize_strategy(
    spec: &GameSpec,
    solution: &Solution,
    free: Option<&FreeComponents>,
) -> Result<FeedbackStrategy, EquilibriumError> {
    if solution.status() != Status::Solved {
        return Err(EquilibriumError::NotSolved(solution.status()));
    }
    candidate_strategy(spec, solution, free)
}

/// Like [`synthesize_strategy`] but without requiring a certified solution.
pub fn candidate_strategy(
    spec: &GameSpec,
    solution: &Solution,
    free: Option<&FreeComponents>,
) -> Result<FeedbackStrategy, EquilibriumError> {
    let (theta, theta_bar) = match free {
        Some(f) => regain(spec, solution, f)?,
        None => {
            let (t, b) = solution.gains();
            (t.clone(), b.clone())
        }
    };
    let offset = if spec.forcing.is_empty() {
        Profile::zero()
    } else {
        let zs = match solution {
            Solution::ZeroSum(_) => Some(zero_sum_reduce(spec)?),
            _ => None,
        };
        let (blks, form) = blocks(spec, solution, zs.as_ref().map(|z| &z.cost))?;
        offsets_for(&spec.dynamics, &spec.forcing, &blks, &form, &theta_bar)?.v_star
    };
    Ok(FeedbackStrategy { theta, theta_bar, offset })
}

// ---------------------------------------------------------------------------
// Costs and values

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    pub quadratic: f64,
    pub linear: f64,
    pub constant: f64,
    pub total: f64,
}

/// Exact infinite-horizon cost of a stabilizing feedback strategy for one cost block,
/// with linear weights `(q, ρ)` and the spec's deterministic forcing.
///
/// With `Pᵢ`, `P̂ᵢ` the Lyapunov evaluations of the strategy and `η̄ᵢ` the matching offset
/// profile, `J = ⟨P̂x,x⟩ + 2⟨η̄(0),x⟩ + ∫ [⟨(R̂+D̂ᵀPD̂)v,v⟩ + 2⟨v, D̂ᵀPσ+ρ⟩ + ⟨Pσ,σ⟩ + 2⟨η̄, B̂v+b⟩] dt`.
pub fn exact_cost_block(
    d: &Dynamics,
    forcing: &crate::model::Forcing,
    cost: &PlayerCost,
    q: &Profile,
    rho: &Profile,
    strategy: &FeedbackStrategy,
    x: &Vector,
) -> Result<ValueReport, EquilibriumError> {
    let n = d.n;
    let m = d.m();
    let (th, tb) = (&strategy.theta, &strategy.theta_bar);
    let cert = check_stabilizer_dyn(d, th, tb);
    if !cert.is_stabilizer {
        return Err(EquilibriumError::NotStabilizing);
    }
    let a_th = &d.a + &d.b * th;
    let c_th = &d.c + &d.d * th;
    let (ah, bh, ch, dh) = (d.a_hat(), d.b_hat(), d.c_hat(), d.d_hat());
    let a_cl = &ah + &bh * tb;
    let c_cl = &ch + &dh * tb;
    let h = cost.hat();
    let w_p = &cost.q + cost.s.transpose() * th + th.transpose() * &cost.s + th.transpose() * &cost.r * th;
    let p = solve_stochastic_lyapunov(&a_th.transpose(), &c_th.transpose(), &sym(&w_p)).map_err(|_| EquilibriumError::NotStabilizing)?;
    let w_h = c_cl.transpose() * &p * &c_cl + &h.q + h.s.transpose() * tb + tb.transpose() * &h.s + tb.transpose() * &h.r * tb;
    let p_hat = solve_lyapunov(&a_cl.transpose(), &sym(&w_h)).map_err(|_| EquilibriumError::NotStabilizing)?;

    let b = forcing.profile(ForcingKind::B);
    let sigma = forcing.profile(ForcingKind::Sigma);
    let v = &strategy.offset;
    let w = bh.transpose() * &p_hat + dh.transpose() * &p * &c_cl + &h.s + &h.r * tb;

    // η̄ amplitudes, rate by rate.
    let mut rates: Vec<f64> = Vec::new();
    for pr in [&b, &sigma, q, rho, v] {
        for (_, l) in &pr.terms {
            if !rates.iter().any(|r| (r - l).abs() <= 1e-14 * l.abs()) {
                rates.push(*l);
            }
        }
    }
    let mut eta = Profile::zero();
    for &lam in &rates {
        let rhs = w.transpose() * v.at(lam, m) + &p_hat * b.at(lam, n) + c_cl.transpose() * &p * sigma.at(lam, n) + q.at(lam, n)
            + tb.transpose() * rho.at(lam, m);
        let mat = Mat::identity(n, n) * lam - a_cl.transpose();
        let sol = mat.lu().solve(&rhs).ok_or(EquilibriumError::ResolventSingular(lam))?;
        eta.push(sol, lam);
    }

    let quadratic = x.dot(&(&p_hat * x));
    let linear = 2.0 * eta.eval(0.0, n).dot(x);
    let mv = &h.r + dh.transpose() * &p * &dh;
    let gsig = sigma.mapped(&(dh.transpose() * &p)).add(rho);
    let drive = v.mapped(&bh).add(&b);
    let id_m = Mat::identity(m, m);
    let id_n = Mat::identity(n, n);
    let constant = v.inner_integral(&mv, v)
        + 2.0 * v.inner_integral(&id_m, &gsig)
        + sigma.inner_integral(&p, &sigma)
        + 2.0 * eta.inner_integral(&id_n, &drive);
    Ok(ValueReport { quadratic, linear, constant, total: quadratic + linear + constant })
}

/// Exact cost `J_i(x; strategy)` of player `i` (1 or 2) in a game or control spec.
pub fn exact_cost(spec: &GameSpec, strategy: &FeedbackStrategy, player: usize, x: &Vector) -> Result<ValueReport, EquilibriumError> {
    let (q, rho) = spec.player_forcing(player);
    let cost = &spec.players[player - 1];
    exact_cost_block(&spec.dynamics, &spec.forcing, cost, &q, &rho, strategy, x)
}

/// Value `V(x)` at the synthesized equilibrium for `player` (zero-sum: the shared cost).
pub fn value_function(
    spec: &GameSpec,
    solution: &Solution,
    strategy: &FeedbackStrategy,
    x: &Vector,
    player: usize,
) -> Result<ValueReport, EquilibriumError> {
    if solution.status() != Status::Solved {
        return Err(EquilibriumError::NotSolved(solution.status()));
    }
    exact_cost(spec, strategy, player, x)
}

// ---------------------------------------------------------------------------
// Certificates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertKind {
    Control,
    OpenRep,
    ClosedNash,
    ZerosumOpenRep,
    ZerosumClosed,
}

impl CertKind {
    pub fn of(solution: &Solution) -> CertKind {
        match solution {
            Solution::Control(_) => CertKind::Control,
            Solution::OpenLoopNash(_) => CertKind::OpenRep,
            Solution::ClosedLoopNash(_) => CertKind::ClosedNash,
            Solution::ZeroSum(s) if s.closed_loop => CertKind::ZerosumClosed,
            Solution::ZeroSum(_) => CertKind::ZerosumOpenRep,
        }
    }

    fn needs_convexity(self) -> bool {
        matches!(self, CertKind::OpenRep | CertKind::ZerosumOpenRep)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Convex,
    Concave,
    Indefinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexityReport {
    pub player: usize,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub horizon: f64,
    pub steps: usize,
    pub basis_size: usize,
    pub verdict: Verdict,
    /// Signed distance of the deciding eigenvalue from the tolerance band.
    pub margin: f64,
    /// The check covers deterministic-plus-simple-zero-mean controls only.
    pub necessary_condition_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexityGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for ConvexityGrid {
    fn default() -> Self {
        ConvexityGrid { horizon: 20.0, steps: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashCertificate {
    pub kind: CertKind,
    pub stationarity_residuals: BTreeMap<String, f64>,
    pub sign_margins: BTreeMap<String, f64>,
    pub range_residuals: BTreeMap<String, f64>,
    pub stabilizer: StabilizerCertificate,
    pub convexity: Vec<ConvexityReport>,
    /// Every recomputed condition holds at the given tolerance.
    pub passed: bool,
    pub failures: Vec<String>,
}

/// Recomputes every algebraic side condition that an equilibrium of the solution's kind must satisfy.
pub fn nash_certificate(
    spec: &GameSpec,
    solution: &Solution,
    are_tol: f64,
    convexity: Option<ConvexityGrid>,
) -> Result<NashCertificate, EquilibriumError> {
    let kind = CertKind::of(solution);
    let rep = are_residuals(solution, spec)?;
    let (th, tb) = solution.gains();
    let stabilizer = check_stabilizer_dyn(&spec.dynamics, th, tb);
    let mut failures = Vec::new();
    for (k, v) in &rep.equations {
        if !(v.abs() <= are_tol) {
            failures.push(format!("{k} residual {v:e} exceeds {are_tol:e}"));
        }
    }
    for (k, v) in &rep.range {
        if !(v.abs() <= are_tol.max(1e-8)) {
            failures.push(format!("{k} range residual {v:e}"));
        }
    }
    for (k, v) in &rep.sign {
        let ok = match kind {
            CertKind::ZerosumOpenRep => true,
            CertKind::OpenRep => *v >= TAU_SING,
            _ if k.contains("max_eig") => *v <= TAU_PSD,
            _ => *v >= -TAU_PSD,
        };
        if !ok {
            failures.push(format!("{k} = {v:e} violates its sign condition"));
        }
    }
    if !stabilizer.is_stabilizer {
        failures.push(format!("not a stabilizer ({:?})", stabilizer.failure_reason));
    }
    let mut reports = Vec::new();
    if let Some(grid) = convexity.filter(|_| kind.needs_convexity()) {
        let zero_sum = kind == CertKind::ZerosumOpenRep;
        for player in 1..=2 {
            let r = match convexity_check(spec, player, grid, zero_sum) {
                Ok(r) => r,
                Err(e) => {
                    failures.push(format!("player {player} convexity check: {e}"));
                    continue;
                }
            };
            let want = if zero_sum && player == 2 { Verdict::Concave } else { Verdict::Convex };
            if r.verdict != want {
                failures.push(format!("player {player} cost is {:?}, expected {:?}", r.verdict, want));
            }
            reports.push(r);
        }
    }
    Ok(NashCertificate {
        kind,
        stationarity_residuals: rep.equations,
        sign_margins: rep.sign,
        range_residuals: rep.range,
        stabilizer,
        convexity: reports,
        passed: failures.is_empty(),
        failures,
    })
}

// ---------------------------------------------------------------------------
// Convexity of the homogeneous cost

/// Per-step data of player `i`'s homogeneous problem.
struct Homog {
    a: Mat,
    b: Mat,
    c: Mat,
    d: Mat,
    ah: Mat,
    bh: Mat,
    ch: Mat,
    dh: Mat,
    q: Mat,
    qh: Mat,
    s: Mat,
    sh: Mat,
    r: Mat,
    rh: Mat,
}

fn homogeneous(spec: &GameSpec, player: usize, zero_sum: bool) -> Homog {
    let d = &spec.dynamics;
    let rr = d.player_rows(player);
    let cost = if zero_sum { &spec.players[0] } else { &spec.players[player - 1] };
    let h = cost.hat();
    let sub = |m: &Mat| m.view((rr.start, rr.start), (rr.len(), rr.len())).into_owned();
    Homog {
        a: d.a.clone(),
        b: cols(&d.b, rr.clone()),
        c: d.c.clone(),
        d: cols(&d.d, rr.clone()),
        ah: d.a_hat(),
        bh: cols(&d.b_hat(), rr.clone()),
        ch: d.c_hat(),
        dh: cols(&d.d_hat(), rr.clone()),
        q: cost.q.clone(),
        qh: h.q.clone(),
        s: rows(&cost.s, rr.clone()),
        sh: rows(&h.s, rr.clone()),
        r: sub(&cost.r),
        rh: sub(&h.r),
    }
}

/// `(e^{hF}, ∫₀ʰ e^{sF} ds)` via one augmented exponential.
fn exp_step(f: &Mat, h: f64) -> (Mat, Mat) {
    let n = f.nrows();
    let mut aug = Mat::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(f * h));
    aug.view_mut((0, n), (n, n)).copy_from(&(Mat::identity(n, n) * h));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, n)).into_owned())
}

/// Relative growth beyond this is treated as divergence of the homogeneous moments.
const MOMENT_GROWTH: f64 = 1e12;

/// Second variation of player `i`'s cost on a uniform grid over `[0, T]`.
///
/// Controls are `u_k = ū_k + c_k ε_{k−1}` (ū deterministic, ε the previous normalized
/// Brownian increment), started from X(0) = 0. The drift is stepped exactly with the
/// matrix exponential and the diffusion to first order, so mean and second moments are
/// exact functions of `(ū, c)` and the cost is an exact quadratic form. Its Hessian is
/// assembled from per-step local forms, using the backward weight
/// `Λ_k = hQ + MᵀΛ_{k+1}M + hCᵀΛ_{k+1}C` for the fluctuation part.
/// For zero-sum problems both players use the shared cost.
pub fn convexity_hessian(spec: &GameSpec, player: usize, grid: ConvexityGrid, zero_sum: bool) -> Result<Mat, EquilibriumError> {
    let hm = homogeneous(spec, player, zero_sum);
    let n = spec.dynamics.n;
    let mi = hm.b.ncols();
    let steps = grid.steps;
    let h = grid.horizon / steps as f64;
    let kdim = 2 * steps * mi;
    let (mm, psi) = exp_step(&hm.a, h);
    let (mbar, psi_bar) = exp_step(&hm.ah, h);
    let bstep = &psi * &hm.b;
    let bstep_bar = &psi_bar * &hm.bh;

    let lam_limit = MOMENT_GROWTH * (1.0 + grid.horizon) * (1.0 + fro(&hm.q) + fro(&hm.c));
    let g_limit = MOMENT_GROWTH * (1.0 + grid.horizon) * (1.0 + fro(&hm.bh));
    let mut lam = vec![Mat::zeros(n, n); steps + 1];
    for k in (0..steps).rev() {
        let next = &lam[k + 1];
        lam[k] = sym(&(&hm.q * h + mm.transpose() * next * &mm + hm.c.transpose() * next * &hm.c * h));
        let nrm = fro(&lam[k]);
        if !nrm.is_finite() || nrm > lam_limit {
            return Err(EquilibriumError::UnstableHomogeneousSystem((steps - k) as f64 * h));
        }
    }
    // Mean sensitivities X̄_k = G_k z.
    let mut g = vec![Mat::zeros(n, kdim); steps + 1];
    for k in 0..steps {
        let mut next = &mbar * &g[k];
        for j in 0..mi {
            let mut c = next.column_mut(k * mi + j);
            c += bstep_bar.column(j);
        }
        let nrm = fro(&next);
        if !nrm.is_finite() || nrm > g_limit {
            return Err(EquilibriumError::UnstableHomogeneousSystem((k + 1) as f64 * h));
        }
        g[k + 1] = next;
    }
    let sel = |offset: usize| {
        let mut e = Mat::zeros(mi, kdim);
        for j in 0..mi {
            e[(j, offset + j)] = 1.0;
        }
        e
    };
    let sqrt_h = h.sqrt();
    let step_form = |k: usize| -> Mat {
        let gk = &g[k];
        let uk = sel(k * mi);
        let ck = sel(steps * mi + k * mi);
        let lk = &lam[k + 1];
        let gg = &hm.ch * gk + &hm.dh * &uk;
        let mut out = (gk.transpose() * &hm.qh * gk) * h;
        let su = uk.transpose() * &hm.sh * gk * h;
        out += &su + su.transpose();
        out += uk.transpose() * &hm.rh * &uk * h;
        out += gg.transpose() * lk * &gg * h;
        let mcc = &hm.r * h + hm.d.transpose() * lk * &hm.d * h + bstep.transpose() * lk * &bstep;
        out += ck.transpose() * &mcc * &ck;
        if k > 0 {
            let rk = (&hm.ch * &g[k - 1] + &hm.dh * sel((k - 1) * mi)) * sqrt_h;
            let mcr = &hm.s * h + hm.d.transpose() * lk * &hm.c * h + bstep.transpose() * lk * &mm;
            let cr = ck.transpose() * &mcr * &rk;
            out += &cr + cr.transpose();
        }
        out
    };
    // Chunked parallel sum with a fixed reduction order.
    let chunk = steps.div_ceil(rayon::current_num_threads().max(1)).max(1);
    let parts: Vec<Mat> = (0..steps)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|ks| {
            let mut acc = Mat::zeros(kdim, kdim);
            for &k in ks {
                acc += step_form(k);
            }
            acc
        })
        .collect();
    let mut form = Mat::zeros(kdim, kdim);
    for p in parts {
        form += p;
    }
    // J(z) = zᵀ F z, so the Hessian is 2F.
    Ok(sym(&form) * 2.0)
}

/// Sign check of the second variation of player `i`'s cost (necessary condition only).
pub fn convexity_check(spec: &GameSpec, player: usize, grid: ConvexityGrid, zero_sum: bool) -> Result<ConvexityReport, EquilibriumError> {
    let hess = convexity_hessian(spec, player, grid, zero_sum)?;
    let (lo, hi) = if hess.nrows() == 0 { (0.0, 0.0) } else { (min_sym_eig(&hess), max_sym_eig(&hess)) };
    let band = 1e-7 * fro(&hess);
    let (verdict, margin) = if lo >= -band {
        (Verdict::Convex, lo + band)
    } else if hi <= band {
        (Verdict::Concave, band - hi)
    } else {
        (Verdict::Indefinite, -(lo + band).abs().min((hi - band).abs()))
    };
    Ok(ConvexityReport {
        player,
        min_eigenvalue: lo,
        max_eigenvalue: hi,
        horizon: grid.horizon,
        steps: grid.steps,
        basis_size: hess.nrows(),
        verdict,
        margin,
        necessary_condition_only: true,
    })
}

/// Reference cost of the same discretized homogeneous problem by direct moment
/// propagation (used to cross-check [`convexity_hessian`]).
pub fn discrete_homogeneous_cost(spec: &GameSpec, player: usize, grid: ConvexityGrid, zero_sum: bool, z: &Vector) -> f64 {
    let hm = homogeneous(spec, player, zero_sum);
    let n = spec.dynamics.n;
    let mi = hm.b.ncols();
    let steps = grid.steps;
    let h = grid.horizon / steps as f64;
    let (mm, psi) = exp_step(&hm.a, h);
    let (mbar, psi_bar) = exp_step(&hm.ah, h);
    let mut xbar = Vector::zeros(n);
    let mut pi = Mat::zeros(n, n);
    let mut r = Vector::zeros(n);
    let mut total = 0.0;
    for k in 0..steps {
        let u = z.rows(k * mi, mi).into_owned();
        let c = z.rows(steps * mi + k * mi, mi).into_owned();
        total += h
            * ((&hm.q * &pi).trace()
                + xbar.dot(&(&hm.qh * &xbar))
                + 2.0 * u.dot(&(&hm.sh * &xbar))
                + u.dot(&(&hm.rh * &u))
                + c.dot(&(&hm.r * &c))
                + 2.0 * c.dot(&(&hm.s * &r)));
        let gk = &hm.ch * &xbar + &hm.dh * &u;
        let bc = &psi * &hm.b * &c;
        let dc = &hm.d * &c;
        let mut next = &mm * &pi * mm.transpose() + &bc * bc.transpose();
        let mr = &mm * &r;
        next += &mr * bc.transpose() + &bc * mr.transpose();
        let cr = &hm.c * &r;
        next += (&hm.c * &pi * hm.c.transpose() + &gk * gk.transpose() + &dc * dc.transpose() + &cr * dc.transpose() + &dc * cr.transpose()) * h;
        pi = next;
        r = &gk * h.sqrt();
        xbar = &mbar * &xbar + &psi_bar * &hm.bh * &u;
    }
    total
}

/// `J(x)` with zero forcing reduces to `⟨P̂x,x⟩`.
pub fn homogeneous_value(p_hat: &Mat, x: &Vector) -> f64 {
    x.dot(&(p_hat * x))
}
