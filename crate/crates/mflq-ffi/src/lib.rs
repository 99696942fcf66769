//! C interface to the `mflq` solver.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `*_free` function. Every fallible call returns an [`MflqError`];
//! on failure a message is available from [`mflq_last_error`] on the same thread.
//! Matrices cross the boundary as row-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mflq::cli::{parse_problem, to_json, verify_report, ReportFile};
use mflq::riccati::{solve, Mode};
use mflq::{GameSpec, SolveOptions, Solution, Status};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MflqError {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    UnknownMatrix = 4,
    BufferTooSmall = 5,
    Internal = 6,
}

/// Problem class to solve for.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MflqMode {
    Control = 0,
    NashOpen = 1,
    NashClosed = 2,
    ZerosumOpen = 3,
    ZerosumClosed = 4,
}

/// Outcome of a solve.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MflqStatus {
    Solved = 0,
    NotStaticStabilizing = 1,
    PsdViolated = 2,
    MaxIterations = 3,
    Diverged = 4,
}

/// Validated problem plus the solver options from its JSON.
pub struct MflqProblem {
    spec: GameSpec,
    options: SolveOptions,
}

/// Solver output for one problem and mode.
pub struct MflqSolution {
    mode: Mode,
    solution: Solution,
    report: ReportFile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn guard(f: impl FnOnce() -> Result<(), (MflqError, String)>) -> MflqError {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MflqError::Ok,
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            MflqError::Internal
        }
    }
}

fn null(what: &str) -> (MflqError, String) {
    (MflqError::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (MflqError, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|e| (MflqError::InvalidUtf8, format!("{what}: {e}")))
}

impl From<Mode> for MflqMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Control => MflqMode::Control,
            Mode::NashOpen => MflqMode::NashOpen,
            Mode::NashClosed => MflqMode::NashClosed,
            Mode::ZerosumOpen => MflqMode::ZerosumOpen,
            Mode::ZerosumClosed => MflqMode::ZerosumClosed,
        }
    }
}

impl From<MflqMode> for Mode {
    fn from(m: MflqMode) -> Self {
        match m {
            MflqMode::Control => Mode::Control,
            MflqMode::NashOpen => Mode::NashOpen,
            MflqMode::NashClosed => Mode::NashClosed,
            MflqMode::ZerosumOpen => Mode::ZerosumOpen,
            MflqMode::ZerosumClosed => Mode::ZerosumClosed,
        }
    }
}

impl From<Status> for MflqStatus {
    fn from(s: Status) -> Self {
        match s {
            Status::Solved => MflqStatus::Solved,
            Status::NotStaticStabilizing => MflqStatus::NotStaticStabilizing,
            Status::PsdViolated => MflqStatus::PsdViolated,
            Status::MaxIterations => MflqStatus::MaxIterations,
            Status::Diverged => MflqStatus::Diverged,
        }
    }
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn mflq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mflq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a problem from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_from_json(json: *const c_char, out: *mut *mut MflqProblem) -> MflqError {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let text = str_arg(json, "json")?;
        let (spec, options) = parse_problem(text).map_err(|e| (MflqError::InvalidInput, e))?;
        *out = Box::into_raw(Box::new(MflqProblem { spec, options }));
        Ok(())
    })
}

/// Releases a problem; NULL is ignored.
///
/// # Safety
/// `p` must come from [`mflq_problem_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_free(p: *mut MflqProblem) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// State and control dimensions (`m2` is 0 for a control problem).
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_problem_dims(p: *const MflqProblem, n: *mut usize, m1: *mut usize, m2: *mut usize) -> MflqError {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        if n.is_null() || m1.is_null() || m2.is_null() {
            return Err(null("output"));
        }
        let d = &p.spec.dynamics;
        (*n, *m1, *m2) = (d.n, d.m1, d.m2);
        Ok(())
    })
}

/// Solves `p` in `mode`. A solution handle is produced whenever the solver ran,
/// certified or not; inspect it with [`mflq_solution_status`].
///
/// # Safety
/// `p` must be a live problem and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mflq_solve(p: *const MflqProblem, mode: MflqMode, out: *mut *mut MflqSolution) -> MflqError {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        let mode = Mode::from(mode);
        let solution = solve(&p.spec, mode, &p.options).map_err(|e| (MflqError::InvalidInput, e.to_string()))?;
        let report = ReportFile::from_solution(mode, &solution, &p.spec, &p.options);
        *out = Box::into_raw(Box::new(MflqSolution { mode, solution, report }));
        Ok(())
    })
}

/// Releases a solution; NULL is ignored.
///
/// # Safety
/// `s` must come from [`mflq_solve`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_free(s: *mut MflqSolution) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Solver status of `s`.
///
/// # Safety
/// `s` and `status` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_status(s: *const MflqSolution, status: *mut MflqStatus) -> MflqError {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let status = status.as_mut().ok_or_else(|| null("status"))?;
        *status = s.solution.status().into();
        Ok(())
    })
}

/// Mode the solution was computed in.
///
/// # Safety
/// `s` and `mode` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_mode(s: *const MflqSolution, mode: *mut MflqMode) -> MflqError {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let mode = mode.as_mut().ok_or_else(|| null("mode"))?;
        *mode = s.mode.into();
        Ok(())
    })
}

/// Copies the named matrix (e.g. `"Theta"`, `"P_hat"`) row-major into `buf`.
///
/// `rows`/`cols` always receive the shape, so a call with `len == 0` queries it;
/// `BufferTooSmall` is returned if `len < rows * cols`.
///
/// # Safety
/// `name` must be NUL-terminated, `rows`/`cols` valid, and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_matrix(
    s: *const MflqSolution,
    name: *const c_char,
    buf: *mut f64,
    len: usize,
    rows: *mut usize,
    cols: *mut usize,
) -> MflqError {
    guard(|| {
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let name = str_arg(name, "name")?;
        if rows.is_null() || cols.is_null() {
            return Err(null("shape output"));
        }
        let mats = s.solution.matrices();
        let Some((_, m)) = mats.iter().find(|(k, _)| *k == name) else {
            let known: Vec<_> = mats.iter().map(|(k, _)| *k).collect();
            return Err((MflqError::UnknownMatrix, format!("no matrix {name:?}; available: {}", known.join(", "))));
        };
        (*rows, *cols) = m.shape();
        let need = m.nrows() * m.ncols();
        if len < need {
            return Err((MflqError::BufferTooSmall, format!("{name} needs {need} entries, buffer has {len}")));
        }
        if need > 0 {
            if buf.is_null() {
                return Err(null("buf"));
            }
            let out = std::slice::from_raw_parts_mut(buf, need);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out[i * m.ncols() + j] = m[(i, j)];
                }
            }
        }
        Ok(())
    })
}

/// Full report as JSON; release it with [`mflq_string_free`].
///
/// # Safety
/// `s` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_to_json(s: *const MflqSolution, out: *mut *mut c_char) -> MflqError {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let text = CString::new(to_json(&s.report)).map_err(|e| (MflqError::Internal, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// Recomputes the equilibrium certificate; `passed` receives 1 or 0.
///
/// # Safety
/// All pointers must be valid; `s` must have been solved from `p`.
#[no_mangle]
pub unsafe extern "C" fn mflq_solution_verify(
    p: *const MflqProblem,
    s: *const MflqSolution,
    convexity: bool,
    passed: *mut i32,
) -> MflqError {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("problem"))?;
        let s = s.as_ref().ok_or_else(|| null("solution"))?;
        let passed = passed.as_mut().ok_or_else(|| null("passed"))?;
        let cert = verify_report(&p.spec, &s.report, convexity).map_err(|e| (MflqError::InvalidInput, e))?;
        *passed = cert.passed as i32;
        Ok(())
    })
}

/// Releases a string returned by this library; NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mflq_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
