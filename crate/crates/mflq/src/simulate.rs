//! Monte-Carlo simulation of the closed-loop system, cost estimation and
//! deviation tests.
//!
//! The mean `E[X]` is never estimated from particles: the closed loop is linear, so the
//! mean solves a deterministic ODE that is integrated once with RK4. Each path then steps
//! the fluctuation `X − E[X]` by Euler–Maruyama.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linops::{Mat, Vector};
use crate::model::{FeedbackStrategy, ForcingKind, GameSpec, Profile};
use crate::stabilizability::check_stabilizer_dyn;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation options: {0}")]
    InvalidOptions(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("path {path} left the finite range at t = {time}")]
    NonFiniteState { time: f64, path: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub antithetic: bool,
    /// Keep every `record_every`-th grid state of every path (0: terminal states only).
    pub record_every: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { horizon: 20.0, dt: 1e-3, paths: 1000, seed: 0, antithetic: true, record_every: 0 }
    }
}

impl SimOptions {
    fn steps(&self) -> Result<usize, SimError> {
        if !(self.horizon > 0.0 && self.horizon.is_finite()) || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::InvalidOptions("horizon and dt must be positive".into()));
        }
        if self.paths < 2 {
            return Err(SimError::InvalidOptions("at least two paths are required".into()));
        }
        if self.antithetic && self.paths % 2 != 0 {
            return Err(SimError::InvalidOptions("antithetic sampling needs an even path count".into()));
        }
        let n = (self.horizon / self.dt).round();
        if n < 1.0 || (n * self.dt - self.horizon).abs() > 1e-9 * self.horizon {
            return Err(SimError::InvalidOptions(format!("horizon {} is not a multiple of dt {}", self.horizon, self.dt)));
        }
        Ok(n as usize)
    }
}

/// Simulated paths with their path-wise costs for every cost block of the spec.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub options: SimOptions,
    pub steps: usize,
    /// Grid times of the recorded states.
    pub times: Vec<f64>,
    /// Deterministic mean `E[X]` at the recorded times.
    pub mean: Vec<Vector>,
    /// Per-path states at the recorded times (n × records), empty unless recording.
    pub states: Vec<Mat>,
    pub terminal: Vec<Vector>,
    /// `costs[block][path]`: trapezoidal cost over `[0, T]`.
    pub costs: Vec<Vec<f64>>,
    /// Same integrand restricted to the last tenth of the horizon.
    pub tail_costs: Vec<Vec<f64>>,
    pub theta: Mat,
    pub theta_bar: Mat,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub dt: f64,
    pub paths: usize,
    /// The last 10% of the horizon contributes more than 1% of |mean|.
    pub tail_flag: bool,
}

/// Per-step closed-loop data in flat row-major form.
struct Plan {
    n: usize,
    steps: usize,
    dt: f64,
    a_th: Vec<f64>,
    c_th: Vec<f64>,
    /// Deterministic diffusion `Ĉ_cl E[X] + D̂v + σ` at each grid time, `n` per step.
    diff0: Vec<f64>,
    mean: Vec<f64>,
    blocks: Vec<CostPlan>,
    tail_from: usize,
}

/// Integrand `ξᵀQ_Θξ + 2⟨ξ, ℓ(t)⟩ + c(t)` with `ξ = X − E[X]`.
struct CostPlan {
    q_th: Vec<f64>,
    ell: Vec<f64>,
    c: Vec<f64>,
}

fn flat(m: &Mat) -> Vec<f64> {
    let mut v = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            v.push(m[(i, j)]);
        }
    }
    v
}

#[inline]
fn matvec(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &m[i * n..(i + 1) * n];
        *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

#[inline]
fn quad(m: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        let row = &m[i * n..(i + 1) * n];
        let r: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
        s += x[i] * r;
    }
    s
}

/// RK4 on `ẋ = Fx + g(t)` over the simulation grid, with sub-steps of at most 1e−3.
fn mean_path(f: &Mat, g: &Profile, x0: &Vector, steps: usize, dt: f64) -> Vec<Vector> {
    let n = x0.len();
    let sub = (dt / 1e-3).ceil().max(1.0) as usize;
    let h = dt / sub as f64;
    let rhs = |t: f64, x: &Vector| f * x + g.eval(t, n);
    let mut out = Vec::with_capacity(steps + 1);
    let mut x = x0.clone();
    out.push(x.clone());
    for k in 0..steps {
        for s in 0..sub {
            let t = k as f64 * dt + s as f64 * h;
            let k1 = rhs(t, &x);
            let k2 = rhs(t + 0.5 * h, &(&x + &k1 * (0.5 * h)));
            let k3 = rhs(t + 0.5 * h, &(&x + &k2 * (0.5 * h)));
            let k4 = rhs(t + h, &(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        out.push(x.clone());
    }
    out
}

fn check_dims(spec: &GameSpec, strategy: &FeedbackStrategy, x0: &Vector) -> Result<(), SimError> {
    let d = &spec.dynamics;
    let (n, m) = (d.n, d.m());
    if x0.len() != n {
        return Err(SimError::DimensionMismatch(format!("x0 has length {}, expected {n}", x0.len())));
    }
    for (name, g) in [("theta", &strategy.theta), ("theta_bar", &strategy.theta_bar)] {
        if g.shape() != (m, n) {
            return Err(SimError::DimensionMismatch(format!("{name} is {:?}, expected ({m}, {n})", g.shape())));
        }
    }
    if strategy.offset.terms.iter().any(|(c, _)| c.len() != m) {
        return Err(SimError::DimensionMismatch(format!("offset amplitudes must have length {m}")));
    }
    Ok(())
}

fn plan(spec: &GameSpec, strategy: &FeedbackStrategy, x0: &Vector, steps: usize, dt: f64) -> Plan {
    let d = &spec.dynamics;
    let n = d.n;
    let (th, tb) = (&strategy.theta, &strategy.theta_bar);
    let a_th = &d.a + &d.b * th;
    let c_th = &d.c + &d.d * th;
    let a_cl = d.a_hat() + d.b_hat() * tb;
    let c_cl = d.c_hat() + d.d_hat() * tb;
    let b = spec.forcing.profile(ForcingKind::B);
    let sigma = spec.forcing.profile(ForcingKind::Sigma);
    let v = &strategy.offset;
    let g = v.mapped(&d.b_hat()).add(&b);
    let mean = mean_path(&a_cl, &g, x0, steps, dt);

    let dh = d.d_hat();
    let mut diff0 = Vec::with_capacity(n * (steps + 1));
    let mut vs = Vec::with_capacity(steps + 1);
    for (k, xb) in mean.iter().enumerate() {
        let t = k as f64 * dt;
        let vt = v.eval(t, d.m());
        diff0.extend((&c_cl * xb + &dh * &vt + sigma.eval(t, n)).iter());
        vs.push(vt);
    }

    let blocks = (1..=spec.players.len())
        .map(|i| {
            let cost = &spec.players[i - 1];
            let h = cost.hat();
            let (q, rho) = spec.player_forcing(i);
            let q_th = &cost.q + cost.s.transpose() * th + th.transpose() * &cost.s + th.transpose() * &cost.r * th;
            let mut ell = Vec::with_capacity(n * (steps + 1));
            let mut c = Vec::with_capacity(steps + 1);
            for (k, xb) in mean.iter().enumerate() {
                let t = k as f64 * dt;
                let ub = tb * xb + &vs[k];
                let qt = q.eval(t, n);
                let rt = rho.eval(t, d.m());
                let l = &cost.q * xb + cost.s.transpose() * &ub + th.transpose() * (&cost.s * xb + &cost.r * &ub) + &qt + th.transpose() * &rt;
                ell.extend(l.iter());
                c.push(xb.dot(&(&h.q * xb)) + 2.0 * ub.dot(&(&h.s * xb)) + ub.dot(&(&h.r * &ub)) + 2.0 * qt.dot(xb) + 2.0 * rt.dot(&ub));
            }
            CostPlan { q_th: flat(&q_th), ell, c }
        })
        .collect();

    Plan {
        n,
        steps,
        dt,
        a_th: flat(&a_th),
        c_th: flat(&c_th),
        diff0,
        mean: mean.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()).collect(),
        blocks,
        tail_from: (0.9 * steps as f64).ceil() as usize,
    }
}

struct PathOut {
    records: Vec<f64>,
    terminal: Vec<f64>,
    costs: Vec<f64>,
    tails: Vec<f64>,
    blowup: Option<f64>,
}

/// Runs one or two (antithetic) paths from a single normal stream.
fn run_stream(p: &Plan, x0: &[f64], stream: u64, seed: u64, signs: &[f64], record_every: usize) -> Vec<PathOut> {
    let n = p.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let sq = p.dt.sqrt();
    let nb = p.blocks.len();
    let mut xi: Vec<Vec<f64>> = signs.iter().map(|_| x0.iter().zip(&p.mean[..n]).map(|(a, b)| a - b).collect()).collect();
    let mut outs: Vec<PathOut> = signs
        .iter()
        .map(|_| PathOut { records: Vec::new(), terminal: Vec::new(), costs: vec![0.0; nb], tails: vec![0.0; nb], blowup: None })
        .collect();
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let integrand = |k: usize, x: &[f64], b: &CostPlan| -> f64 {
        let ell = &b.ell[k * n..(k + 1) * n];
        quad(&b.q_th, x) + 2.0 * x.iter().zip(ell).map(|(a, c)| a * c).sum::<f64>() + b.c[k]
    };
    let record = |k: usize| record_every > 0 && (k % record_every == 0 || k == p.steps);
    for k in 0..=p.steps {
        let weight = if k == 0 || k == p.steps { 0.5 * p.dt } else { p.dt };
        let z: f64 = if k < p.steps { StandardNormal.sample(&mut rng) } else { 0.0 };
        for (j, &s) in signs.iter().enumerate() {
            let out = &mut outs[j];
            if out.blowup.is_some() {
                continue;
            }
            let x = &mut xi[j];
            for (bi, b) in p.blocks.iter().enumerate() {
                let f = integrand(k, x, b) * weight;
                out.costs[bi] += f;
                if k >= p.tail_from {
                    let tw = if k == p.tail_from || k == p.steps { 0.5 * p.dt } else { p.dt };
                    out.tails[bi] += integrand(k, x, b) * tw;
                }
            }
            if record(k) {
                out.records.extend(x.iter().zip(&p.mean[k * n..(k + 1) * n]).map(|(a, b)| a + b));
            }
            if k == p.steps {
                out.terminal = x.iter().zip(&p.mean[k * n..(k + 1) * n]).map(|(a, b)| a + b).collect();
                continue;
            }
            // Only the fluctuation ξ = X − E[X] is stepped; the mean is exact.
            matvec(&p.a_th, x, &mut drift);
            matvec(&p.c_th, x, &mut diff);
            let s0 = &p.diff0[k * n..(k + 1) * n];
            let dw = s * z * sq;
            let mut finite = true;
            for i in 0..n {
                x[i] += drift[i] * p.dt + (diff[i] + s0[i]) * dw;
                finite &= x[i].is_finite();
            }
            if !finite {
                out.blowup = Some((k + 1) as f64 * p.dt);
            }
        }
    }
    outs
}

/// Simulates the closed-loop mean-field SDE under `strategy` from `x0`.
pub fn simulate_closed_loop(spec: &GameSpec, strategy: &FeedbackStrategy, x0: &Vector, opts: &SimOptions) -> Result<PathEnsemble, SimError> {
    let steps = opts.steps()?;
    check_dims(spec, strategy, x0)?;
    let mut warnings = Vec::new();
    let cert = check_stabilizer_dyn(&spec.dynamics, &strategy.theta, &strategy.theta_bar);
    if !cert.is_stabilizer {
        warnings.push(format!("strategy is not a stabilizer ({:?}); simulating anyway", cert.failure_reason));
    }
    let p = plan(spec, strategy, x0, steps, opts.dt);
    let x0s: Vec<f64> = x0.iter().copied().collect();
    let signs: &[f64] = if opts.antithetic { &[1.0, -1.0] } else { &[1.0] };
    let streams = opts.paths / signs.len();
    let results: Vec<Vec<PathOut>> = (0..streams)
        .into_par_iter()
        .map(|s| run_stream(&p, &x0s, s as u64, opts.seed, signs, opts.record_every))
        .collect();
    let outs: Vec<PathOut> = results.into_iter().flatten().collect();

    if let Some((path, time)) = outs.iter().enumerate().filter_map(|(i, o)| o.blowup.map(|t| (i, t))).min_by(|a, b| a.1.total_cmp(&b.1)) {
        return Err(SimError::NonFiniteState { time, path });
    }
    let n = p.n;
    let rec_idx: Vec<usize> = if opts.record_every > 0 {
        (0..=steps).filter(|k| k % opts.record_every == 0 || *k == steps).collect()
    } else {
        vec![steps]
    };
    let nb = p.blocks.len();
    let mut costs = vec![Vec::with_capacity(outs.len()); nb];
    let mut tail_costs = vec![Vec::with_capacity(outs.len()); nb];
    let mut states = Vec::new();
    let mut terminal = Vec::with_capacity(outs.len());
    for o in &outs {
        for b in 0..nb {
            costs[b].push(o.costs[b]);
            tail_costs[b].push(o.tails[b]);
        }
        if opts.record_every > 0 {
            states.push(Mat::from_column_slice(n, rec_idx.len(), &o.records));
        }
        terminal.push(Vector::from_column_slice(&o.terminal));
    }
    Ok(PathEnsemble {
        options: *opts,
        steps,
        times: rec_idx.iter().map(|&k| k as f64 * opts.dt).collect(),
        mean: rec_idx.iter().map(|&k| Vector::from_column_slice(&p.mean[k * n..(k + 1) * n])).collect(),
        states,
        terminal,
        costs,
        tail_costs,
        theta: strategy.theta.clone(),
        theta_bar: strategy.theta_bar.clone(),
        warnings,
    })
}

/// Mean and standard error of per-path samples; antithetic pairs are averaged first.
pub fn sample_stats(samples: &[f64], antithetic: bool) -> (f64, f64) {
    let pooled: Vec<f64> = if antithetic { samples.chunks(2).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect() } else { samples.to_vec() };
    let k = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / k;
    if pooled.len() < 2 {
        return (mean, 0.0);
    }
    let var = pooled.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

/// Estimates `J_i(x0; strategy)` on `[0, T]` from the ensemble.
pub fn estimate_cost(ensemble: &PathEnsemble, spec: &GameSpec, strategy: &FeedbackStrategy, player: usize) -> Result<CostEstimate, SimError> {
    if player == 0 || player > ensemble.costs.len() || spec.players.len() != ensemble.costs.len() {
        return Err(SimError::DimensionMismatch(format!("no cost block {player} in this ensemble")));
    }
    if strategy.theta != ensemble.theta || strategy.theta_bar != ensemble.theta_bar {
        return Err(SimError::DimensionMismatch("strategy differs from the simulated one".into()));
    }
    let o = &ensemble.options;
    let (mean, stderr) = sample_stats(&ensemble.costs[player - 1], o.antithetic);
    let (tail, _) = sample_stats(&ensemble.tail_costs[player - 1], o.antithetic);
    Ok(CostEstimate {
        mean,
        stderr,
        horizon: o.horizon,
        dt: o.dt,
        paths: ensemble.costs[player - 1].len(),
        tail_flag: tail.abs() > 0.01 * mean.abs(),
    })
}

// ---------------------------------------------------------------------------
// Deviation tests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationKind {
    Nash,
    Saddle,
}

/// Open-loop perturbation `δ(t)` added to player `player`'s offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub player: usize,
    /// Profile with `m_player`-vector amplitudes.
    pub delta: Profile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationEntry {
    pub player: usize,
    pub index: usize,
    /// Change of the judged cost (own cost for Nash, the shared cost for a saddle).
    pub delta_j: f64,
    pub stderr: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub kind: DeviationKind,
    pub entries: Vec<DeviationEntry>,
    pub passed: bool,
}

/// Six exponential perturbations per player: `±0.5e^{−t}`, `±e^{−2t}`, `±0.25e^{−t/2}`
/// along the normalized all-ones direction of the player's controls.
pub fn default_battery(spec: &GameSpec) -> Vec<Perturbation> {
    let d = &spec.dynamics;
    let mut out = Vec::new();
    for player in 1..=2 {
        let mi = d.player_rows(player).len();
        if mi == 0 {
            continue;
        }
        let dir = Vector::from_element(mi, 1.0 / (mi as f64).sqrt());
        for (amp, rate) in [(0.5, 1.0), (-0.5, 1.0), (1.0, 2.0), (-1.0, 2.0), (0.25, 0.5), (-0.25, 0.5)] {
            let mut delta = Profile::zero();
            delta.push(&dir * amp, rate);
            out.push(Perturbation { player, delta });
        }
    }
    out
}

/// Checks the equilibrium inequalities against open-loop perturbations of the offsets,
/// using common random numbers for the baseline and each perturbed run.
pub fn deviation_test(
    spec: &GameSpec,
    strategy: &FeedbackStrategy,
    x0: &Vector,
    kind: DeviationKind,
    perturbations: &[Perturbation],
    opts: &SimOptions,
) -> Result<DeviationReport, SimError> {
    let d = &spec.dynamics;
    let base = simulate_closed_loop(spec, strategy, x0, opts)?;
    let mut entries = Vec::new();
    for (index, pert) in perturbations.iter().enumerate() {
        let rows = d.player_rows(pert.player);
        if pert.delta.terms.iter().any(|(c, _)| c.len() != rows.len()) {
            return Err(SimError::DimensionMismatch(format!("perturbation {index} does not match player {}'s controls", pert.player)));
        }
        let mut offset = strategy.offset.clone();
        for (c, rate) in &pert.delta.terms {
            let mut full = Vector::zeros(d.m());
            full.rows_mut(rows.start, rows.len()).copy_from(c);
            offset.push(full, *rate);
        }
        let moved = FeedbackStrategy { offset, ..strategy.clone() };
        let run = simulate_closed_loop(spec, &moved, x0, opts)?;
        let block = match kind {
            DeviationKind::Saddle => 0,
            DeviationKind::Nash => (pert.player - 1).min(spec.players.len() - 1),
        };
        let diffs: Vec<f64> = run.costs[block].iter().zip(&base.costs[block]).map(|(a, b)| a - b).collect();
        let (delta_j, stderr) = sample_stats(&diffs, opts.antithetic);
        let passed = match (kind, pert.player) {
            (DeviationKind::Saddle, 2) => delta_j <= 3.0 * stderr,
            _ => delta_j >= -3.0 * stderr,
        };
        entries.push(DeviationEntry { player: pert.player, index, delta_j, stderr, passed });
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(DeviationReport { kind, entries, passed })
}
