//! Command-line front end: `mflq solve | verify | simulate`.
//!
//! Exit codes: 0 solved / all gates pass, 1 input error, 2 no certified solution,
//! 3 simulation blow-up.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    candidate_strategy, exact_cost, nash_certificate, synthesize_strategy, ConvexityGrid, ConvexityReport, NashCertificate,
    ValueReport,
};
use crate::linops::Vector;
use crate::model::{mat_from_raw, mat_to_raw, validate, GameSpec, Profile, RawMatrix, RawSpec};
use crate::riccati::{are_residuals, solve, FreeComponents, Gate, Mode, SolveOptions, Solution, Status};
use crate::simulate::{
    default_battery, deviation_test, estimate_cost, simulate_closed_loop, CostEstimate, DeviationKind, DeviationReport, SimError,
    SimOptions,
};
use crate::stabilizability::StabilizerCertificate;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NOT_CERTIFIED: i32 = 2;
pub const EXIT_BLOWUP: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mflq", version, about = "Mean-field LQ control and two-player games in an infinite horizon")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the Riccati system for a problem file and write a report.
    Solve(SolveArgs),
    /// Recompute every certificate of a report from scratch.
    Verify(VerifyArgs),
    /// Monte-Carlo cost estimates (and optional deviation tests) for a report's strategy.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Mode,
    /// Report path (standard output when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file {"theta": m×n, "theta_bar": m×n} with free gain components.
    #[arg(long)]
    pub theta_free: Option<PathBuf>,
    /// Record the solver's wall time (makes reports non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub solution: PathBuf,
    /// Also run the convexity checks for open-loop representations.
    #[arg(long)]
    pub convexity: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub solution: PathBuf,
    /// Initial state as comma-separated values.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub x0: Vec<f64>,
    #[arg(long, default_value_t = 20.0)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub dt: f64,
    #[arg(long, default_value_t = 1000)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub deviation_test: bool,
    /// Simulate even if the report is not certified.
    #[arg(long)]
    pub force: bool,
    #[arg(long)]
    pub no_antithetic: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    Mode::parse(s).ok_or_else(|| {
        let names: Vec<_> = Mode::ALL.iter().map(|m| m.name()).collect();
        format!("unknown mode {s:?}; expected one of {}", names.join(", "))
    })
}

// ---------------------------------------------------------------------------
// JSON output

/// Pretty printer that writes every float with 17 significant digits.
struct Fixed17(serde_json::ser::PrettyFormatter<'static>);

pub fn format_f64(v: f64) -> String {
    let e = format!("{v:.16e}");
    let exp: i32 = e.rsplit('e').next().and_then(|x| x.parse().ok()).unwrap_or(0);
    if (-5..17).contains(&exp) {
        format!("{:.*}", (16 - exp) as usize, v)
    } else {
        e
    }
}

macro_rules! forward {
    ($($name:ident($($arg:ident: $ty:ty),*);)*) => {
        $(fn $name<W: ?Sized + std::io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> std::io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for Fixed17 {
    fn write_f64<W: ?Sized + std::io::Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }
    forward! {
        begin_array();
        end_array();
        begin_array_value(first: bool);
        end_array_value();
        begin_object();
        end_object();
        begin_object_key(first: bool);
        begin_object_value();
        end_object_value();
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Fixed17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser).expect("serializable report");
    buf.push(b'\n');
    String::from_utf8(buf).expect("utf-8 json")
}

/// Non-finite floats are written as `null` and read back as NaN.
mod nullable {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

mod nullable_map {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let v: BTreeMap<&String, Option<f64>> = m.iter().map(|(k, v)| (k, v.is_finite().then_some(*v))).collect();
        v.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        let m = BTreeMap::<String, Option<f64>>::deserialize(d)?;
        Ok(m.into_iter().map(|(k, v)| (k, v.unwrap_or(f64::NAN))).collect())
    }
}

// ---------------------------------------------------------------------------
// Report file

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilizerReport {
    pub is_stabilizer: bool,
    #[serde(rename = "min_eig_P0", with = "nullable")]
    pub min_eig_p0: f64,
    #[serde(rename = "min_eig_P0bar", with = "nullable")]
    pub min_eig_p0_bar: f64,
    #[serde(with = "nullable")]
    pub hurwitz_abscissa: f64,
    #[serde(with = "nullable")]
    pub stochastic_abscissa: f64,
    pub failure_reason: crate::stabilizability::FailureReason,
}

impl From<&StabilizerCertificate> for StabilizerReport {
    fn from(c: &StabilizerCertificate) -> Self {
        StabilizerReport {
            is_stabilizer: c.is_stabilizer,
            min_eig_p0: c.min_eig_p0,
            min_eig_p0_bar: c.min_eig_p0_bar,
            hurwitz_abscissa: c.hurwitz_abscissa,
            stochastic_abscissa: c.stochastic_abscissa,
            failure_reason: c.failure_reason,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffsetTerm {
    pub amplitude: Vec<f64>,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverMeta {
    pub iterations: usize,
    pub eps_chain: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_gate: Option<Gate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationReport {
    pub x0: Vec<f64>,
    pub seed: u64,
    pub antithetic: bool,
    /// One estimate per cost block.
    pub estimates: Vec<CostEstimate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation_test: Option<DeviationReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    pub mode: Mode,
    pub status: Status,
    pub solution: BTreeMap<String, RawMatrix>,
    #[serde(with = "nullable_map")]
    pub residuals: BTreeMap<String, f64>,
    #[serde(with = "nullable_map")]
    pub sign_margins: BTreeMap<String, f64>,
    #[serde(with = "nullable_map")]
    pub range_residuals: BTreeMap<String, f64>,
    pub stabilizer: StabilizerReport,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub offset: Vec<OffsetTerm>,
    /// Exact cost per cost block at the simulated initial state.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<Vec<Option<ValueReport>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationReport>,
    pub solver_meta: SolverMeta,
    pub options: SolveOptions,
}

impl ReportFile {
    pub fn from_solution(mode: Mode, solution: &Solution, spec: &GameSpec, opts: &SolveOptions) -> ReportFile {
        let mut meta = SolverMeta {
            iterations: solution.info().iterations,
            eps_chain: solution.info().eps_chain.clone(),
            failed_gate: solution.info().failed_gate,
            diagnostic: solution.info().diagnostic.clone(),
            wall_time_ms: None,
        };
        let (residuals, sign_margins, range_residuals) = match are_residuals(solution, spec) {
            Ok(r) => (r.equations, r.sign, r.range),
            Err(_) => (solution.residuals().clone(), BTreeMap::new(), BTreeMap::new()),
        };
        let offset = match candidate_strategy(spec, solution, opts.free_components.as_ref()) {
            Ok(s) => s.offset.terms.iter().map(|(c, r)| OffsetTerm { amplitude: c.iter().copied().collect(), rate: *r }).collect(),
            Err(e) => {
                if !spec.forcing.is_empty() {
                    meta.diagnostic.get_or_insert_with(|| format!("offsets unavailable: {e}"));
                }
                Vec::new()
            }
        };
        ReportFile {
            mode,
            status: solution.status(),
            solution: solution.matrices().into_iter().map(|(k, m)| (k.to_string(), mat_to_raw(&m))).collect(),
            residuals,
            sign_margins,
            range_residuals,
            stabilizer: solution.stabilizer().into(),
            offset,
            value: None,
            simulation: None,
            solver_meta: meta,
            options: opts.clone(),
        }
    }

    /// Solution rebuilt from the report's matrices against `spec`.
    pub fn to_solution(&self, spec: &GameSpec) -> Result<Solution, String> {
        let d = &spec.dynamics;
        let mut mats = BTreeMap::new();
        for (k, raw) in &self.solution {
            let rows = raw.len();
            let cols = raw.first().map(|r| r.len()).unwrap_or(0);
            let (rows, cols) = if k.starts_with("Theta") { (d.m(), d.n) } else { (rows, cols) };
            let m = mat_from_raw(Some(raw), rows, cols, k).map_err(|e| e.to_string())?;
            mats.insert(k.clone(), m);
        }
        Solution::from_matrices(self.mode, &mats, self.status, spec).map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------------
// Loading

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFree {
    theta: RawMatrix,
    theta_bar: RawMatrix,
}

fn read(path: &Path) -> Result<String, String> {
    std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))
}

/// Parses and validates a problem file; returns the spec and its solver options.
pub fn load_problem(path: &Path) -> Result<(GameSpec, SolveOptions), String> {
    let text = read(path)?;
    parse_problem(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_problem(text: &str) -> Result<(GameSpec, SolveOptions), String> {
    let raw: RawSpec = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let spec = validate(&raw).map_err(|e| e.to_string())?;
    Ok((spec, raw.options.unwrap_or_default()))
}

fn load_free(path: &Path, spec: &GameSpec) -> Result<FreeComponents, String> {
    let raw: RawFree = serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))?;
    let (m, n) = (spec.dynamics.m(), spec.dynamics.n);
    Ok(FreeComponents {
        theta: mat_from_raw(Some(&raw.theta), m, n, "theta").map_err(|e| e.to_string())?,
        theta_bar: mat_from_raw(Some(&raw.theta_bar), m, n, "theta_bar").map_err(|e| e.to_string())?,
    })
}

pub fn load_report(path: &Path) -> Result<ReportFile, String> {
    serde_json::from_str(&read(path)?).map_err(|e| format!("{}: {e}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), String> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| format!("{}: {e}", p.display())),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes()).map_err(|e| e.to_string())
        }
    }
}

/// Caps rayon's worker count from `MFLQ_THREADS` (0 or unset: automatic).
pub fn init_threads() {
    let n = std::env::var("MFLQ_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()).unwrap_or(0);
    if n > 0 {
        // A second initialization (e.g. in tests) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

// ---------------------------------------------------------------------------
// Commands

/// Solves and returns the report plus its exit code.
pub fn solve_report(spec: &GameSpec, mode: Mode, opts: &SolveOptions, timing: bool) -> Result<(ReportFile, i32), String> {
    let t = Instant::now();
    let solution = solve(spec, mode, opts).map_err(|e| e.to_string())?;
    let mut report = ReportFile::from_solution(mode, &solution, spec, opts);
    if timing {
        report.solver_meta.wall_time_ms = Some(t.elapsed().as_secs_f64() * 1e3);
    }
    let code = if solution.status() == Status::Solved { EXIT_OK } else { EXIT_NOT_CERTIFIED };
    Ok((report, code))
}

pub fn cmd_solve(a: &SolveArgs) -> Result<i32, String> {
    let (spec, mut opts) = load_problem(&a.problem)?;
    if let Some(p) = &a.theta_free {
        opts.free_components = Some(load_free(p, &spec)?);
    }
    let (report, code) = solve_report(&spec, a.mode, &opts, a.timing)?;
    emit(a.out.as_deref(), &to_json(&report))?;
    if code != EXIT_OK {
        eprintln!("mflq: status {}", serde_json::to_value(report.status).map(|v| v.as_str().unwrap_or_default().to_string()).unwrap_or_default());
    }
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateReport {
    pub mode: Mode,
    pub passed: bool,
    pub failures: Vec<String>,
    #[serde(with = "nullable_map")]
    pub stationarity_residuals: BTreeMap<String, f64>,
    #[serde(with = "nullable_map")]
    pub sign_margins: BTreeMap<String, f64>,
    #[serde(with = "nullable_map")]
    pub range_residuals: BTreeMap<String, f64>,
    pub stabilizer: StabilizerReport,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub convexity: Vec<ConvexityReport>,
    pub are_tol: f64,
}

impl CertificateReport {
    fn new(mode: Mode, c: NashCertificate, are_tol: f64) -> Self {
        CertificateReport {
            mode,
            passed: c.passed,
            failures: c.failures,
            stationarity_residuals: c.stationarity_residuals,
            sign_margins: c.sign_margins,
            range_residuals: c.range_residuals,
            stabilizer: (&c.stabilizer).into(),
            convexity: c.convexity,
            are_tol,
        }
    }
}

/// Recomputes the certificate of `report` against `spec`.
pub fn verify_report(spec: &GameSpec, report: &ReportFile, convexity: bool) -> Result<CertificateReport, String> {
    let solution = report.to_solution(spec)?;
    let grid = convexity.then(ConvexityGrid::default);
    let cert = nash_certificate(spec, &solution, report.options.are_tol, grid).map_err(|e| e.to_string())?;
    Ok(CertificateReport::new(report.mode, cert, report.options.are_tol))
}

pub fn cmd_verify(a: &VerifyArgs) -> Result<i32, String> {
    let (spec, _) = load_problem(&a.problem)?;
    let report = load_report(&a.solution)?;
    let cert = verify_report(&spec, &report, a.convexity)?;
    emit(a.out.as_deref(), &to_json(&cert))?;
    if cert.passed {
        Ok(EXIT_OK)
    } else {
        for f in &cert.failures {
            eprintln!("mflq: {f}");
        }
        Ok(EXIT_NOT_CERTIFIED)
    }
}

pub enum SimOutcome {
    Done(Box<ReportFile>),
    BlowUp(SimError),
}

/// Simulation pipeline shared by the CLI and the tests.
pub fn simulate_report(
    spec: &GameSpec,
    report: &ReportFile,
    x0: &Vector,
    opts: &SimOptions,
    deviation: bool,
    force: bool,
) -> Result<SimOutcome, String> {
    let solution = report.to_solution(spec)?;
    let strategy = if force {
        candidate_strategy(spec, &solution, None)
    } else {
        synthesize_strategy(spec, &solution, None)
    }
    .map_err(|e| format!("{e} (use --force to simulate uncertified candidates)"))?;
    let ensemble = match simulate_closed_loop(spec, &strategy, x0, opts) {
        Ok(e) => e,
        Err(e @ SimError::NonFiniteState { .. }) => return Ok(SimOutcome::BlowUp(e)),
        Err(e) => return Err(e.to_string()),
    };
    let estimates = (1..=spec.players.len())
        .map(|i| estimate_cost(&ensemble, spec, &strategy, i))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let values = (1..=spec.players.len()).map(|i| exact_cost(spec, &strategy, i, x0).ok()).collect();
    let deviation_test = if deviation {
        let kind = match report.mode {
            Mode::ZerosumOpen | Mode::ZerosumClosed => DeviationKind::Saddle,
            _ => DeviationKind::Nash,
        };
        match deviation_test(spec, &strategy, x0, kind, &default_battery(spec), opts) {
            Ok(r) => Some(r),
            Err(e @ SimError::NonFiniteState { .. }) => return Ok(SimOutcome::BlowUp(e)),
            Err(e) => return Err(e.to_string()),
        }
    } else {
        None
    };
    let mut out = report.clone();
    out.value = Some(values);
    out.simulation = Some(SimulationReport {
        x0: x0.iter().copied().collect(),
        seed: opts.seed,
        antithetic: opts.antithetic,
        estimates,
        warnings: ensemble.warnings,
        deviation_test,
    });
    Ok(SimOutcome::Done(Box::new(out)))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<i32, String> {
    let (spec, _) = load_problem(&a.problem)?;
    let report = load_report(&a.solution)?;
    if report.status != Status::Solved && !a.force {
        eprintln!("mflq: report status is {:?}; pass --force to simulate the candidate", report.status);
        return Ok(EXIT_NOT_CERTIFIED);
    }
    let x0 = if a.x0.is_empty() { Vector::zeros(spec.dynamics.n) } else { Vector::from_vec(a.x0.clone()) };
    if x0.len() != spec.dynamics.n {
        return Err(format!("--x0 has {} entries, expected {}", x0.len(), spec.dynamics.n));
    }
    let opts = SimOptions {
        horizon: a.horizon,
        dt: a.dt,
        paths: a.paths,
        seed: a.seed,
        antithetic: !a.no_antithetic,
        record_every: 0,
    };
    match simulate_report(&spec, &report, &x0, &opts, a.deviation_test, a.force)? {
        SimOutcome::Done(r) => {
            for w in r.simulation.iter().flat_map(|s| s.warnings.iter()) {
                eprintln!("mflq: warning: {w}");
            }
            emit(a.out.as_deref(), &to_json(&r))?;
            Ok(EXIT_OK)
        }
        SimOutcome::BlowUp(e) => {
            eprintln!("mflq: {e}");
            Ok(EXIT_BLOWUP)
        }
    }
}

/// Entry point; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    init_threads();
    let res = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match res {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("mflq: {msg}");
            EXIT_INPUT
        }
    }
}

/// Offsets as a profile (for callers holding a parsed report).
pub fn offset_profile(terms: &[OffsetTerm]) -> Profile {
    let mut p = Profile::zero();
    for t in terms {
        p.push(Vector::from_vec(t.amplitude.clone()), t.rate);
    }
    p
}
