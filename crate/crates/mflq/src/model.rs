//! Problem data: dynamics, costs, forcing, and the transforms between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linops::{asymmetry, cols, sym, Mat, Vector};

/// Tolerance for "nominally symmetric" blocks and for zero-sum identities.
pub const TAU_SYM: f64 = 1e-9;
/// Tolerance for intrinsic equivalence of strategies.
pub const TAU_SAME: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry in {0}")]
    NonFinite(String),
    #[error("{block} is not symmetric (max |x_ij - x_ji| = {asymmetry:e})")]
    AsymmetryExceedsTolerance { block: String, asymmetry: f64 },
    #[error("not a zero-sum game: {0}")]
    NotZeroSum(String),
    #[error("invalid forcing: {0}")]
    InvalidForcing(String),
    #[error("not a single-player problem: {0}")]
    NotControl(String),
    #[error("not a two-player game: {0}")]
    NotGame(String),
    #[error("malformed document: {0}")]
    Schema(String),
}

// ---------------------------------------------------------------------------
// Forcing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForcingKind {
    B,
    Sigma,
    Q1,
    Q2,
    Rho1,
    Rho2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcingTerm {
    pub kind: ForcingKind,
    pub amplitude: Vector,
    pub rate: f64,
}

/// Finite sum of exponential profiles `c·e^(−λt)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Profile {
    pub terms: Vec<(Vector, f64)>,
}

fn same_rate(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-14 * a.abs().max(b.abs())
}

impl Profile {
    pub fn zero() -> Self {
        Profile { terms: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds `c·e^(−λt)`, merging with an existing term of the same rate.
    pub fn push(&mut self, c: Vector, rate: f64) {
        if let Some(t) = self.terms.iter_mut().find(|t| same_rate(t.1, rate)) {
            t.0 += c;
        } else {
            self.terms.push((c, rate));
        }
    }

    /// Amplitude at `rate` (zero vector of `dim` if absent).
    pub fn at(&self, rate: f64, dim: usize) -> Vector {
        self.terms
            .iter()
            .find(|t| same_rate(t.1, rate))
            .map(|t| t.0.clone())
            .unwrap_or_else(|| Vector::zeros(dim))
    }

    pub fn eval(&self, t: f64, dim: usize) -> Vector {
        let mut out = Vector::zeros(dim);
        for (c, l) in &self.terms {
            out.axpy((-l * t).exp(), c, 1.0);
        }
        out
    }

    pub fn scaled(&self, k: f64) -> Profile {
        Profile { terms: self.terms.iter().map(|(c, l)| (c * k, *l)).collect() }
    }

    /// Left-multiplies every amplitude by `m`.
    pub fn mapped(&self, m: &Mat) -> Profile {
        Profile { terms: self.terms.iter().map(|(c, l)| (m * c, *l)).collect() }
    }

    pub fn add(&self, other: &Profile) -> Profile {
        let mut out = self.clone();
        for (c, l) in &other.terms {
            out.push(c.clone(), *l);
        }
        out
    }

    /// `∫₀^∞ ⟨M f(t), g(t)⟩ dt` for profiles f (self) and g.
    pub fn inner_integral(&self, m: &Mat, g: &Profile) -> f64 {
        let mut s = 0.0;
        for (a, la) in &self.terms {
            let ma = m * a;
            for (b, lb) in &g.terms {
                s += ma.dot(b) / (la + lb);
            }
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Forcing {
    pub terms: Vec<ForcingTerm>,
}

impl Forcing {
    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn profile(&self, kind: ForcingKind) -> Profile {
        let mut p = Profile::zero();
        for t in self.terms.iter().filter(|t| t.kind == kind) {
            p.push(t.amplitude.clone(), t.rate);
        }
        p
    }

    /// Distinct rates, ascending.
    pub fn rates(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for t in &self.terms {
            if !out.iter().any(|r| same_rate(*r, t.rate)) {
                out.push(t.rate);
            }
        }
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out
    }
}

// ---------------------------------------------------------------------------
// Coefficients

/// State-equation coefficients, with both players' control columns stacked
/// as `B = (B1, B2)` etc.
#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    pub a: Mat,
    pub a_bar: Mat,
    pub b: Mat,
    pub b_bar: Mat,
    pub c: Mat,
    pub c_bar: Mat,
    pub d: Mat,
    pub d_bar: Mat,
}

impl Dynamics {
    pub fn m(&self) -> usize {
        self.m1 + self.m2
    }

    /// Control rows (columns of B) owned by player `i` ∈ {1, 2}.
    pub fn player_rows(&self, i: usize) -> std::ops::Range<usize> {
        match i {
            1 => 0..self.m1,
            _ => self.m1..self.m1 + self.m2,
        }
    }

    pub fn a_hat(&self) -> Mat {
        &self.a + &self.a_bar
    }
    pub fn b_hat(&self) -> Mat {
        &self.b + &self.b_bar
    }
    pub fn c_hat(&self) -> Mat {
        &self.c + &self.c_bar
    }
    pub fn d_hat(&self) -> Mat {
        &self.d + &self.d_bar
    }

    pub fn b_i(&self, i: usize) -> Mat {
        cols(&self.b, self.player_rows(i))
    }
    pub fn d_i(&self, i: usize) -> Mat {
        cols(&self.d, self.player_rows(i))
    }
    pub fn b_hat_i(&self, i: usize) -> Mat {
        cols(&self.b_hat(), self.player_rows(i))
    }
    pub fn d_hat_i(&self, i: usize) -> Mat {
        cols(&self.d_hat(), self.player_rows(i))
    }

    /// Same dynamics with every barred block multiplied by `k`.
    pub fn with_bars_scaled(&self, k: f64) -> Dynamics {
        Dynamics {
            a_bar: &self.a_bar * k,
            b_bar: &self.b_bar * k,
            c_bar: &self.c_bar * k,
            d_bar: &self.d_bar * k,
            ..self.clone()
        }
    }
}

/// One cost functional, with `S = (S·1; S·2)` (m×n) and the full m×m `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerCost {
    pub q: Mat,
    pub q_bar: Mat,
    pub s: Mat,
    pub s_bar: Mat,
    pub r: Mat,
    pub r_bar: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HatCost {
    pub q: Mat,
    pub s: Mat,
    pub r: Mat,
}

impl PlayerCost {
    pub fn zeros(n: usize, m: usize) -> Self {
        PlayerCost {
            q: Mat::zeros(n, n),
            q_bar: Mat::zeros(n, n),
            s: Mat::zeros(m, n),
            s_bar: Mat::zeros(m, n),
            r: Mat::zeros(m, m),
            r_bar: Mat::zeros(m, m),
        }
    }

    pub fn hat(&self) -> HatCost {
        HatCost {
            q: &self.q + &self.q_bar,
            s: &self.s + &self.s_bar,
            r: &self.r + &self.r_bar,
        }
    }

    pub fn negated(&self) -> PlayerCost {
        PlayerCost {
            q: -&self.q,
            q_bar: -&self.q_bar,
            s: -&self.s,
            s_bar: -&self.s_bar,
            r: -&self.r,
            r_bar: -&self.r_bar,
        }
    }

    fn with_bars_scaled(&self, k: f64) -> PlayerCost {
        PlayerCost {
            q_bar: &self.q_bar * k,
            s_bar: &self.s_bar * k,
            r_bar: &self.r_bar * k,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HatCoefficients {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    pub costs: Vec<HatCost>,
}

/// Anything carrying dynamics, cost blocks and forcing.
pub trait Problem {
    fn dynamics(&self) -> &Dynamics;
    fn costs(&self) -> Vec<&PlayerCost>;
    fn forcing(&self) -> &Forcing;

    fn hat(&self) -> HatCoefficients {
        let d = self.dynamics();
        HatCoefficients {
            a: d.a_hat(),
            b: d.b_hat(),
            c: d.c_hat(),
            d: d.d_hat(),
            costs: self.costs().iter().map(|c| c.hat()).collect(),
        }
    }
}

/// Validated problem data. Holds one cost block (a control problem, m2 = 0)
/// or two (a game).
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub dynamics: Dynamics,
    pub players: Vec<PlayerCost>,
    pub forcing: Forcing,
}

impl Problem for GameSpec {
    fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }
    fn costs(&self) -> Vec<&PlayerCost> {
        self.players.iter().collect()
    }
    fn forcing(&self) -> &Forcing {
        &self.forcing
    }
}

impl GameSpec {
    pub fn n(&self) -> usize {
        self.dynamics.n
    }

    pub fn is_game(&self) -> bool {
        self.players.len() == 2
    }

    /// Single-player specialization; requires one cost block.
    pub fn control(&self) -> Result<ControlSpec, ModelError> {
        if self.players.len() != 1 || self.dynamics.m2 != 0 {
            return Err(ModelError::NotControl(format!(
                "{} cost blocks, m2 = {}",
                self.players.len(),
                self.dynamics.m2
            )));
        }
        Ok(ControlSpec {
            dynamics: self.dynamics.clone(),
            cost: self.players[0].clone(),
            forcing: self.forcing.clone(),
        })
    }

    pub fn with_bars_scaled(&self, k: f64) -> GameSpec {
        GameSpec {
            dynamics: self.dynamics.with_bars_scaled(k),
            players: self.players.iter().map(|p| p.with_bars_scaled(k)).collect(),
            forcing: self.forcing.clone(),
        }
    }

    /// Player `i`'s linear cost weights `(q_i, ρ_i)`.
    pub fn player_forcing(&self, i: usize) -> (Profile, Profile) {
        let (qk, rk) = if i == 1 {
            (ForcingKind::Q1, ForcingKind::Rho1)
        } else {
            (ForcingKind::Q2, ForcingKind::Rho2)
        };
        (self.forcing.profile(qk), self.forcing.profile(rk))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub dynamics: Dynamics,
    pub cost: PlayerCost,
    pub forcing: Forcing,
}

impl Problem for ControlSpec {
    fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }
    fn costs(&self) -> Vec<&PlayerCost> {
        vec![&self.cost]
    }
    fn forcing(&self) -> &Forcing {
        &self.forcing
    }
}

/// Zero-sum game: player 1 minimizes and player 2 maximizes the shared cost.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroSumSpec {
    pub dynamics: Dynamics,
    pub cost: PlayerCost,
    pub forcing: Forcing,
}

impl Problem for ZeroSumSpec {
    fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }
    fn costs(&self) -> Vec<&PlayerCost> {
        vec![&self.cost]
    }
    fn forcing(&self) -> &Forcing {
        &self.forcing
    }
}

impl ZeroSumSpec {
    /// The two-player game with `J₂ = −J₁`.
    pub fn to_game(&self) -> GameSpec {
        let mut terms = self.forcing.terms.clone();
        for t in &self.forcing.terms {
            let kind = match t.kind {
                ForcingKind::Q1 => ForcingKind::Q2,
                ForcingKind::Rho1 => ForcingKind::Rho2,
                _ => continue,
            };
            terms.push(ForcingTerm { kind, amplitude: -&t.amplitude, rate: t.rate });
        }
        GameSpec {
            dynamics: self.dynamics.clone(),
            players: vec![self.cost.clone(), self.cost.negated()],
            forcing: Forcing { terms },
        }
    }

    /// Linear cost weights `(q, ρ)` of the shared cost.
    pub fn linear_weights(&self) -> (Profile, Profile) {
        (self.forcing.profile(ForcingKind::Q1), self.forcing.profile(ForcingKind::Rho1))
    }
}

impl ControlSpec {
    pub fn linear_weights(&self) -> (Profile, Profile) {
        (self.forcing.profile(ForcingKind::Q1), self.forcing.profile(ForcingKind::Rho1))
    }
}

// ---------------------------------------------------------------------------
// Raw records and validation

/// Row-major matrix as nested arrays.
pub type RawMatrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawDynamics {
    #[serde(rename = "A", default, skip_serializing_if = "Option::is_none")]
    pub a: Option<RawMatrix>,
    #[serde(rename = "A_bar", default, skip_serializing_if = "Option::is_none")]
    pub a_bar: Option<RawMatrix>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<RawMatrix>,
    #[serde(rename = "C_bar", default, skip_serializing_if = "Option::is_none")]
    pub c_bar: Option<RawMatrix>,
    #[serde(rename = "B1", default, skip_serializing_if = "Option::is_none")]
    pub b1: Option<RawMatrix>,
    #[serde(rename = "B1_bar", default, skip_serializing_if = "Option::is_none")]
    pub b1_bar: Option<RawMatrix>,
    #[serde(rename = "D1", default, skip_serializing_if = "Option::is_none")]
    pub d1: Option<RawMatrix>,
    #[serde(rename = "D1_bar", default, skip_serializing_if = "Option::is_none")]
    pub d1_bar: Option<RawMatrix>,
    #[serde(rename = "B2", default, skip_serializing_if = "Option::is_none")]
    pub b2: Option<RawMatrix>,
    #[serde(rename = "B2_bar", default, skip_serializing_if = "Option::is_none")]
    pub b2_bar: Option<RawMatrix>,
    #[serde(rename = "D2", default, skip_serializing_if = "Option::is_none")]
    pub d2: Option<RawMatrix>,
    #[serde(rename = "D2_bar", default, skip_serializing_if = "Option::is_none")]
    pub d2_bar: Option<RawMatrix>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawPlayer {
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<RawMatrix>,
    #[serde(rename = "Q_bar", default, skip_serializing_if = "Option::is_none")]
    pub q_bar: Option<RawMatrix>,
    #[serde(rename = "S1", default, skip_serializing_if = "Option::is_none")]
    pub s1: Option<RawMatrix>,
    #[serde(rename = "S1_bar", default, skip_serializing_if = "Option::is_none")]
    pub s1_bar: Option<RawMatrix>,
    #[serde(rename = "S2", default, skip_serializing_if = "Option::is_none")]
    pub s2: Option<RawMatrix>,
    #[serde(rename = "S2_bar", default, skip_serializing_if = "Option::is_none")]
    pub s2_bar: Option<RawMatrix>,
    #[serde(rename = "R11", default, skip_serializing_if = "Option::is_none")]
    pub r11: Option<RawMatrix>,
    #[serde(rename = "R11_bar", default, skip_serializing_if = "Option::is_none")]
    pub r11_bar: Option<RawMatrix>,
    #[serde(rename = "R12", default, skip_serializing_if = "Option::is_none")]
    pub r12: Option<RawMatrix>,
    #[serde(rename = "R12_bar", default, skip_serializing_if = "Option::is_none")]
    pub r12_bar: Option<RawMatrix>,
    #[serde(rename = "R22", default, skip_serializing_if = "Option::is_none")]
    pub r22: Option<RawMatrix>,
    #[serde(rename = "R22_bar", default, skip_serializing_if = "Option::is_none")]
    pub r22_bar: Option<RawMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawForcingTerm {
    pub kind: ForcingKind,
    pub amplitude: Vec<f64>,
    pub rate: f64,
}

/// Unvalidated problem record, as read from a problem file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RawSpec {
    pub n: usize,
    pub m1: usize,
    #[serde(default)]
    pub m2: usize,
    pub dynamics: RawDynamics,
    pub players: Vec<RawPlayer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing: Option<Vec<RawForcingTerm>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<crate::riccati::SolveOptions>,
}

/// Converts a nested-array matrix; a missing block is zero.
pub fn mat_from_raw(raw: Option<&RawMatrix>, rows: usize, ncols: usize, name: &str) -> Result<Mat, ModelError> {
    let Some(raw) = raw else {
        return Ok(Mat::zeros(rows, ncols));
    };
    if rows == 0 || ncols == 0 {
        // Accept [] or rows of [] for degenerate blocks.
        let ok = raw.is_empty() || (raw.len() == rows && raw.iter().all(|r| r.is_empty()));
        if !ok {
            return Err(ModelError::DimensionMismatch(format!("{name}: expected {rows}x{ncols}")));
        }
        return Ok(Mat::zeros(rows, ncols));
    }
    if raw.len() != rows || raw.iter().any(|r| r.len() != ncols) {
        let got_cols = raw.first().map(|r| r.len()).unwrap_or(0);
        return Err(ModelError::DimensionMismatch(format!(
            "{name}: expected {rows}x{ncols}, got {}x{got_cols}",
            raw.len()
        )));
    }
    let mut m = Mat::zeros(rows, ncols);
    for (i, r) in raw.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(ModelError::NonFinite(name.to_string()));
            }
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

pub fn mat_to_raw(m: &Mat) -> RawMatrix {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn check_symmetric(m: Mat, name: &str) -> Result<Mat, ModelError> {
    let asym = asymmetry(&m);
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if asym > TAU_SYM * scale {
        return Err(ModelError::AsymmetryExceedsTolerance { block: name.to_string(), asymmetry: asym });
    }
    Ok(sym(&m))
}

fn stack_rows(top: &Mat, bottom: &Mat) -> Mat {
    let mut out = Mat::zeros(top.nrows() + bottom.nrows(), top.ncols().max(bottom.ncols()));
    if top.nrows() > 0 {
        out.rows_mut(0, top.nrows()).copy_from(top);
    }
    if bottom.nrows() > 0 {
        out.rows_mut(top.nrows(), bottom.nrows()).copy_from(bottom);
    }
    out
}

fn stack_cols(left: &Mat, right: &Mat) -> Mat {
    let mut out = Mat::zeros(left.nrows().max(right.nrows()), left.ncols() + right.ncols());
    if left.ncols() > 0 {
        out.columns_mut(0, left.ncols()).copy_from(left);
    }
    if right.ncols() > 0 {
        out.columns_mut(left.ncols(), right.ncols()).copy_from(right);
    }
    out
}

fn block_r(r11: &Mat, r12: &Mat, r22: &Mat) -> Mat {
    let top = stack_cols(r11, r12);
    let bottom = stack_cols(&r12.transpose(), r22);
    stack_rows(&top, &bottom)
}

fn player_from_raw(p: &RawPlayer, n: usize, m1: usize, m2: usize, idx: usize) -> Result<PlayerCost, ModelError> {
    let nm = |s: &str| format!("players[{idx}].{s}");
    let q = check_symmetric(mat_from_raw(p.q.as_ref(), n, n, &nm("Q"))?, &nm("Q"))?;
    let q_bar = check_symmetric(mat_from_raw(p.q_bar.as_ref(), n, n, &nm("Q_bar"))?, &nm("Q_bar"))?;
    let s1 = mat_from_raw(p.s1.as_ref(), m1, n, &nm("S1"))?;
    let s1b = mat_from_raw(p.s1_bar.as_ref(), m1, n, &nm("S1_bar"))?;
    let s2 = mat_from_raw(p.s2.as_ref(), m2, n, &nm("S2"))?;
    let s2b = mat_from_raw(p.s2_bar.as_ref(), m2, n, &nm("S2_bar"))?;
    let r11 = check_symmetric(mat_from_raw(p.r11.as_ref(), m1, m1, &nm("R11"))?, &nm("R11"))?;
    let r11b = check_symmetric(mat_from_raw(p.r11_bar.as_ref(), m1, m1, &nm("R11_bar"))?, &nm("R11_bar"))?;
    let r22 = check_symmetric(mat_from_raw(p.r22.as_ref(), m2, m2, &nm("R22"))?, &nm("R22"))?;
    let r22b = check_symmetric(mat_from_raw(p.r22_bar.as_ref(), m2, m2, &nm("R22_bar"))?, &nm("R22_bar"))?;
    let r12 = mat_from_raw(p.r12.as_ref(), m1, m2, &nm("R12"))?;
    let r12b = mat_from_raw(p.r12_bar.as_ref(), m1, m2, &nm("R12_bar"))?;
    Ok(PlayerCost {
        q,
        q_bar,
        s: stack_rows(&s1, &s2),
        s_bar: stack_rows(&s1b, &s2b),
        r: block_r(&r11, &r12, &r22),
        r_bar: block_r(&r11b, &r12b, &r22b),
    })
}

/// Checks shapes, finiteness and symmetry; symmetrizes nominally symmetric blocks.
pub fn validate(raw: &RawSpec) -> Result<GameSpec, ModelError> {
    let (n, m1, m2) = (raw.n, raw.m1, raw.m2);
    if n == 0 {
        return Err(ModelError::DimensionMismatch("n must be positive".into()));
    }
    if m1 + m2 == 0 {
        return Err(ModelError::DimensionMismatch("m1 + m2 must be at least 1".into()));
    }
    match raw.players.len() {
        1 if m2 != 0 => {
            return Err(ModelError::DimensionMismatch("a single cost block requires m2 = 0".into()))
        }
        1 | 2 => {}
        k => return Err(ModelError::DimensionMismatch(format!("expected 1 or 2 players, got {k}"))),
    }
    let dy = &raw.dynamics;
    let a = mat_from_raw(dy.a.as_ref(), n, n, "A")?;
    let a_bar = mat_from_raw(dy.a_bar.as_ref(), n, n, "A_bar")?;
    let c = mat_from_raw(dy.c.as_ref(), n, n, "C")?;
    let c_bar = mat_from_raw(dy.c_bar.as_ref(), n, n, "C_bar")?;
    let b1 = mat_from_raw(dy.b1.as_ref(), n, m1, "B1")?;
    let b1b = mat_from_raw(dy.b1_bar.as_ref(), n, m1, "B1_bar")?;
    let d1 = mat_from_raw(dy.d1.as_ref(), n, m1, "D1")?;
    let d1b = mat_from_raw(dy.d1_bar.as_ref(), n, m1, "D1_bar")?;
    let b2 = mat_from_raw(dy.b2.as_ref(), n, m2, "B2")?;
    let b2b = mat_from_raw(dy.b2_bar.as_ref(), n, m2, "B2_bar")?;
    let d2 = mat_from_raw(dy.d2.as_ref(), n, m2, "D2")?;
    let d2b = mat_from_raw(dy.d2_bar.as_ref(), n, m2, "D2_bar")?;
    let dynamics = Dynamics {
        n,
        m1,
        m2,
        a,
        a_bar,
        b: stack_cols(&b1, &b2),
        b_bar: stack_cols(&b1b, &b2b),
        c,
        c_bar,
        d: stack_cols(&d1, &d2),
        d_bar: stack_cols(&d1b, &d2b),
    };
    let players = raw
        .players
        .iter()
        .enumerate()
        .map(|(i, p)| player_from_raw(p, n, m1, m2, i))
        .collect::<Result<Vec<_>, _>>()?;

    let mut terms = Vec::new();
    for (k, t) in raw.forcing.iter().flatten().enumerate() {
        let want = match t.kind {
            ForcingKind::B | ForcingKind::Sigma | ForcingKind::Q1 | ForcingKind::Q2 => n,
            ForcingKind::Rho1 | ForcingKind::Rho2 => m1 + m2,
        };
        if t.amplitude.len() != want {
            return Err(ModelError::DimensionMismatch(format!(
                "forcing[{k}] amplitude has length {}, expected {want}",
                t.amplitude.len()
            )));
        }
        if t.amplitude.iter().any(|v| !v.is_finite()) || !t.rate.is_finite() {
            return Err(ModelError::NonFinite(format!("forcing[{k}]")));
        }
        if !(t.rate > 0.0) {
            return Err(ModelError::InvalidForcing(format!("forcing[{k}] rate must be positive")));
        }
        if players.len() == 1 && matches!(t.kind, ForcingKind::Q2 | ForcingKind::Rho2) {
            return Err(ModelError::InvalidForcing(format!("forcing[{k}] refers to player 2")));
        }
        terms.push(ForcingTerm { kind: t.kind, amplitude: Vector::from_vec(t.amplitude.clone()), rate: t.rate });
    }
    Ok(GameSpec { dynamics, players, forcing: Forcing { terms } })
}

impl GameSpec {
    /// Raw record reproducing this spec (forcing terms kept as listed).
    pub fn to_raw(&self) -> RawSpec {
        let d = &self.dynamics;
        let r1 = d.player_rows(1);
        let r2 = d.player_rows(2);
        let sub = |m: &Mat, rr: &std::ops::Range<usize>, cc: &std::ops::Range<usize>| {
            mat_to_raw(&m.view((rr.start, cc.start), (rr.len(), cc.len())).into_owned())
        };
        let all_n = 0..d.n;
        let players = self
            .players
            .iter()
            .map(|p| RawPlayer {
                q: Some(mat_to_raw(&p.q)),
                q_bar: Some(mat_to_raw(&p.q_bar)),
                s1: Some(sub(&p.s, &r1, &all_n)),
                s1_bar: Some(sub(&p.s_bar, &r1, &all_n)),
                s2: Some(sub(&p.s, &r2, &all_n)),
                s2_bar: Some(sub(&p.s_bar, &r2, &all_n)),
                r11: Some(sub(&p.r, &r1, &r1)),
                r11_bar: Some(sub(&p.r_bar, &r1, &r1)),
                r12: Some(sub(&p.r, &r1, &r2)),
                r12_bar: Some(sub(&p.r_bar, &r1, &r2)),
                r22: Some(sub(&p.r, &r2, &r2)),
                r22_bar: Some(sub(&p.r_bar, &r2, &r2)),
            })
            .collect();
        RawSpec {
            n: d.n,
            m1: d.m1,
            m2: d.m2,
            dynamics: RawDynamics {
                a: Some(mat_to_raw(&d.a)),
                a_bar: Some(mat_to_raw(&d.a_bar)),
                c: Some(mat_to_raw(&d.c)),
                c_bar: Some(mat_to_raw(&d.c_bar)),
                b1: Some(sub(&d.b, &all_n, &r1)),
                b1_bar: Some(sub(&d.b_bar, &all_n, &r1)),
                d1: Some(sub(&d.d, &all_n, &r1)),
                d1_bar: Some(sub(&d.d_bar, &all_n, &r1)),
                b2: Some(sub(&d.b, &all_n, &r2)),
                b2_bar: Some(sub(&d.b_bar, &all_n, &r2)),
                d2: Some(sub(&d.d, &all_n, &r2)),
                d2_bar: Some(sub(&d.d_bar, &all_n, &r2)),
            },
            players,
            forcing: if self.forcing.is_empty() {
                None
            } else {
                Some(
                    self.forcing
                        .terms
                        .iter()
                        .map(|t| RawForcingTerm { kind: t.kind, amplitude: t.amplitude.iter().cloned().collect(), rate: t.rate })
                        .collect(),
                )
            },
            options: None,
        }
    }
}

fn close(a: &Mat, b: &Mat) -> bool {
    let scale = a.iter().chain(b.iter()).fold(1.0_f64, |s, v| s.max(v.abs()));
    (a + b).iter().all(|v| v.abs() <= TAU_SYM * scale)
}

/// Identifies a two-player game with `J₁ + J₂ ≡ 0` as a zero-sum game.
pub fn zero_sum_reduce(spec: &GameSpec) -> Result<ZeroSumSpec, ModelError> {
    if spec.players.len() != 2 {
        return Err(ModelError::NotZeroSum("needs two cost blocks".into()));
    }
    let (p1, p2) = (&spec.players[0], &spec.players[1]);
    let pairs = [
        ("Q", &p1.q, &p2.q),
        ("Q_bar", &p1.q_bar, &p2.q_bar),
        ("S", &p1.s, &p2.s),
        ("S_bar", &p1.s_bar, &p2.s_bar),
        ("R", &p1.r, &p2.r),
        ("R_bar", &p1.r_bar, &p2.r_bar),
    ];
    for (name, a, b) in pairs {
        if !close(a, b) {
            return Err(ModelError::NotZeroSum(format!("{name}1 + {name}2 ≠ 0")));
        }
    }
    for (k1, k2) in [(ForcingKind::Q1, ForcingKind::Q2), (ForcingKind::Rho1, ForcingKind::Rho2)] {
        let f1 = spec.forcing.profile(k1);
        let f2 = spec.forcing.profile(k2);
        let dim = if k1 == ForcingKind::Q1 { spec.n() } else { spec.dynamics.m() };
        let mut rates: Vec<f64> = f1.terms.iter().chain(f2.terms.iter()).map(|t| t.1).collect();
        rates.dedup();
        for r in rates {
            let s = f1.at(r, dim) + f2.at(r, dim);
            let scale = f1.at(r, dim).amax().max(1.0);
            if s.amax() > TAU_SYM * scale {
                return Err(ModelError::NotZeroSum(format!("forcing {k1:?} + {k2:?} ≠ 0")));
            }
        }
    }
    let terms = spec
        .forcing
        .terms
        .iter()
        .filter(|t| !matches!(t.kind, ForcingKind::Q2 | ForcingKind::Rho2))
        .cloned()
        .collect();
    Ok(ZeroSumSpec { dynamics: spec.dynamics.clone(), cost: p1.clone(), forcing: Forcing { terms } })
}

// ---------------------------------------------------------------------------
// Strategies and closed-loop transforms

/// Feedback gains plus a deterministic open-loop offset `v*(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackStrategy {
    pub theta: Mat,
    pub theta_bar: Mat,
    pub offset: Profile,
}

impl FeedbackStrategy {
    pub fn new(theta: Mat, theta_bar: Mat) -> Self {
        FeedbackStrategy { theta, theta_bar, offset: Profile::zero() }
    }

    pub fn zeros(m: usize, n: usize) -> Self {
        Self::new(Mat::zeros(m, n), Mat::zeros(m, n))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopCost {
    pub q: Mat,
    pub q_bar: Mat,
    pub s: Mat,
    pub s_bar: Mat,
    pub q_hat: Mat,
    pub s_hat: Mat,
    /// `q_Θ = q + Θ̄ᵀρ` (deterministic forcing: `ρ − E[ρ] = 0`).
    pub q_forcing: Profile,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a: Mat,
    pub a_bar: Mat,
    pub c: Mat,
    pub c_bar: Mat,
    pub a_hat: Mat,
    pub c_hat: Mat,
    pub costs: Vec<ClosedLoopCost>,
}

fn check_gain_shape(d: &Dynamics, s: &FeedbackStrategy) -> Result<(), ModelError> {
    let want = (d.m(), d.n);
    if s.theta.shape() != want || s.theta_bar.shape() != want {
        return Err(ModelError::DimensionMismatch(format!(
            "gains must be {}x{}, got {:?} and {:?}",
            want.0,
            want.1,
            s.theta.shape(),
            s.theta_bar.shape()
        )));
    }
    Ok(())
}

/// Coefficients of the state equation and costs after substituting
/// `u = Θ(X − E[X]) + Θ̄E[X] + v`.
pub fn closed_loop_transform<P: Problem>(spec: &P, strategy: &FeedbackStrategy) -> Result<ClosedLoop, ModelError> {
    let d = spec.dynamics();
    check_gain_shape(d, strategy)?;
    let (th, tb) = (&strategy.theta, &strategy.theta_bar);
    let diff = tb - th;
    let a = &d.a + &d.b * th;
    let a_bar = &d.a_bar + &d.b_bar * tb + &d.b * &diff;
    let c = &d.c + &d.d * th;
    let c_bar = &d.c_bar + &d.d_bar * tb + &d.d * &diff;
    let a_hat = &a + &a_bar;
    let c_hat = &c + &c_bar;

    let linear: Vec<(Profile, Profile)> = player_linear_weights(spec);
    let costs = spec
        .costs()
        .iter()
        .zip(linear)
        .map(|(pc, (q, rho))| {
            let h = pc.hat();
            let q_th = &pc.q + pc.s.transpose() * th + th.transpose() * &pc.s + th.transpose() * &pc.r * th;
            let q_bar_th = &pc.q_bar + h.s.transpose() * tb + tb.transpose() * &h.s + tb.transpose() * &h.r * tb
                - pc.s.transpose() * th
                - th.transpose() * &pc.s
                - th.transpose() * &pc.r * th;
            let s_th = &pc.s + &pc.r * th;
            let s_bar_th = &pc.s_bar + &h.r * tb - &pc.r * th;
            ClosedLoopCost {
                q_hat: &q_th + &q_bar_th,
                s_hat: &s_th + &s_bar_th,
                q: q_th,
                q_bar: q_bar_th,
                s: s_th,
                s_bar: s_bar_th,
                q_forcing: q.add(&rho.mapped(&tb.transpose())),
            }
        })
        .collect();
    Ok(ClosedLoop { a, a_bar, c, c_bar, a_hat, c_hat, costs })
}

/// `(q_i, ρ_i)` for each cost block of a problem, in `costs()` order.
pub fn player_linear_weights<P: Problem + ?Sized>(spec: &P) -> Vec<(Profile, Profile)> {
    let f = spec.forcing();
    let k = spec.costs().len();
    (0..k)
        .map(|i| {
            if i == 0 {
                (f.profile(ForcingKind::Q1), f.profile(ForcingKind::Rho1))
            } else {
                (f.profile(ForcingKind::Q2), f.profile(ForcingKind::Rho2))
            }
        })
        .collect()
}

/// Do the two strategies generate the same state process for every initial state?
pub fn intrinsically_same(s1: &FeedbackStrategy, s2: &FeedbackStrategy, d: &Dynamics) -> bool {
    if check_gain_shape(d, s1).is_err() || check_gain_shape(d, s2).is_err() {
        return false;
    }
    let dt = &s1.theta - &s2.theta;
    let dtb = &s1.theta_bar - &s2.theta_bar;
    let (bh, dh) = (d.b_hat(), d.d_hat());
    let gains_ok = (&d.b * &dt).norm() <= TAU_SAME
        && (&d.d * &dt).norm() <= TAU_SAME
        && (&bh * &dtb).norm() <= TAU_SAME
        && (&dh * &dtb).norm() <= TAU_SAME;
    if !gains_ok {
        return false;
    }
    let diff = s1.offset.add(&s2.offset.scaled(-1.0));
    diff.terms.iter().all(|(dv, _)| {
        (&d.b * dv).norm() <= TAU_SAME
            && (&d.d * dv).norm() <= TAU_SAME
            && (&bh * dv).norm() <= TAU_SAME
            && (&dh * dv).norm() <= TAU_SAME
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_raw() -> RawSpec {
        RawSpec {
            n: 1,
            m1: 1,
            m2: 0,
            dynamics: RawDynamics { a: Some(vec![vec![-1.0]]), b1: Some(vec![vec![1.0]]), ..Default::default() },
            players: vec![RawPlayer { q: Some(vec![vec![1.0]]), r11: Some(vec![vec![1.0]]), ..Default::default() }],
            forcing: None,
            options: None,
        }
    }

    #[test]
    fn missing_blocks_are_zero() {
        let g = validate(&scalar_raw()).unwrap();
        assert_eq!(g.dynamics.c[(0, 0)], 0.0);
        assert_eq!(g.dynamics.b.shape(), (1, 1));
        assert!(g.control().is_ok());
    }

    #[test]
    fn rejects_bad_shape() {
        let mut r = scalar_raw();
        r.dynamics.a = Some(vec![vec![1.0, 2.0]]);
        assert!(matches!(validate(&r), Err(ModelError::DimensionMismatch(_))));
    }

    #[test]
    fn rejects_nonpositive_rate() {
        let mut r = scalar_raw();
        r.forcing = Some(vec![RawForcingTerm { kind: ForcingKind::B, amplitude: vec![1.0], rate: 0.0 }]);
        assert!(matches!(validate(&r), Err(ModelError::InvalidForcing(_))));
    }

    #[test]
    fn profile_integral() {
        let mut p = Profile::zero();
        p.push(Vector::from_vec(vec![2.0]), 1.0);
        // ∫ 4 e^{-2t} = 2
        assert!((p.inner_integral(&Mat::identity(1, 1), &p) - 2.0).abs() < 1e-15);
    }
}
