use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mflq_ffi::*;

const SCALAR: &str = r#"{"n":1,"m1":1,"m2":0,
  "dynamics":{"A":[[1]],"B1":[[1]],"C":[[0]],"D1":[[0]]},
  "players":[{"Q":[[1]],"R11":[[1]]}]}"#;

fn fixture(name: &str) -> CString {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name);
    CString::new(std::fs::read_to_string(p).unwrap()).unwrap()
}

fn last_error() -> String {
    let p = mflq_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn problem(json: &CStr) -> *mut MflqProblem {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { mflq_problem_from_json(json.as_ptr(), &mut p) }, MflqError::Ok);
    p
}

#[test]
fn scalar_control_round_trip() {
    let json = CString::new(SCALAR).unwrap();
    let p = problem(&json);
    let (mut n, mut m1, mut m2) = (0, 0, 0);
    assert_eq!(unsafe { mflq_problem_dims(p, &mut n, &mut m1, &mut m2) }, MflqError::Ok);
    assert_eq!((n, m1, m2), (1, 1, 0));

    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mflq_solve(p, MflqMode::Control, &mut s) }, MflqError::Ok);
    let mut status = MflqStatus::Diverged;
    assert_eq!(unsafe { mflq_solution_status(s, &mut status) }, MflqError::Ok);
    assert_eq!(status, MflqStatus::Solved);

    // 2P - P^2 + 1 = 0 → P = 1 + √2, Θ = -P.
    let name = CString::new("P").unwrap();
    let (mut r, mut c) = (0, 0);
    let mut buf = [0.0f64; 1];
    assert_eq!(unsafe { mflq_solution_matrix(s, name.as_ptr(), buf.as_mut_ptr(), 1, &mut r, &mut c) }, MflqError::Ok);
    assert_eq!((r, c), (1, 1));
    assert!((buf[0] - (1.0 + 2f64.sqrt())).abs() < 1e-10);

    let theta = CString::new("Theta").unwrap();
    assert_eq!(unsafe { mflq_solution_matrix(s, theta.as_ptr(), buf.as_mut_ptr(), 1, &mut r, &mut c) }, MflqError::Ok);
    assert!((buf[0] + 1.0 + 2f64.sqrt()).abs() < 1e-10);

    let mut passed = 0;
    assert_eq!(unsafe { mflq_solution_verify(p, s, false, &mut passed) }, MflqError::Ok);
    assert_eq!(passed, 1);

    let mut text = ptr::null_mut();
    assert_eq!(unsafe { mflq_solution_to_json(s, &mut text) }, MflqError::Ok);
    let j: serde_json::Value = serde_json::from_str(unsafe { CStr::from_ptr(text) }.to_str().unwrap()).unwrap();
    assert_eq!(j["mode"], "control");
    assert_eq!(j["status"], "solved");
    unsafe {
        mflq_string_free(text);
        mflq_solution_free(s);
        mflq_problem_free(p);
    }
}

#[test]
fn matrix_shape_query_and_small_buffer() {
    let json = fixture("ex5_5.json");
    let p = problem(&json);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mflq_solve(p, MflqMode::ZerosumClosed, &mut s) }, MflqError::Ok);
    let name = CString::new("Theta_bar").unwrap();
    let (mut r, mut c) = (0, 0);
    assert_eq!(
        unsafe { mflq_solution_matrix(s, name.as_ptr(), ptr::null_mut(), 0, &mut r, &mut c) },
        MflqError::BufferTooSmall
    );
    assert_eq!((r, c), (2, 2));
    let mut buf = vec![0.0; r * c];
    assert_eq!(unsafe { mflq_solution_matrix(s, name.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut r, &mut c) }, MflqError::Ok);
    assert!(buf.iter().all(|x| x.is_finite()));

    let bogus = CString::new("Nope").unwrap();
    assert_eq!(
        unsafe { mflq_solution_matrix(s, bogus.as_ptr(), buf.as_mut_ptr(), buf.len(), &mut r, &mut c) },
        MflqError::UnknownMatrix
    );
    assert!(last_error().contains("Theta"));
    unsafe {
        mflq_solution_free(s);
        mflq_problem_free(p);
    }
}

#[test]
fn errors_are_reported() {
    let mut p = ptr::null_mut();
    assert_eq!(unsafe { mflq_problem_from_json(ptr::null(), &mut p) }, MflqError::NullPointer);
    assert!(p.is_null());

    let bad = CString::new(r#"{"n":1}"#).unwrap();
    assert_eq!(unsafe { mflq_problem_from_json(bad.as_ptr(), &mut p) }, MflqError::InvalidInput);
    assert!(!last_error().is_empty());

    let asym = CString::new(
        r#"{"n":2,"m1":1,"m2":0,"dynamics":{"A":[[0,0],[0,0]],"B1":[[1],[0]]},
            "players":[{"Q":[[1,1],[0,1]],"R11":[[1]]}]}"#,
    )
    .unwrap();
    assert_eq!(unsafe { mflq_problem_from_json(asym.as_ptr(), &mut p) }, MflqError::InvalidInput);

    // A control problem cannot be solved as a game.
    let json = CString::new(SCALAR).unwrap();
    let p = problem(&json);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mflq_solve(p, MflqMode::NashClosed, &mut s) }, MflqError::InvalidInput);
    assert!(s.is_null());
    assert_eq!(unsafe { mflq_solve(ptr::null(), MflqMode::Control, &mut s) }, MflqError::NullPointer);
    unsafe {
        mflq_problem_free(p);
        mflq_problem_free(ptr::null_mut());
        mflq_solution_free(ptr::null_mut());
        mflq_string_free(ptr::null_mut());
    }
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(mflq_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

// Compiles a small C program against the generated header and the static library.
#[test]
fn header_compiles_and_links_from_c() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = dir.join("include/mflq.h");
    assert!(header.exists(), "header not generated");
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "mflq.h"
int main(void) {
    const char *json = "{\"n\":1,\"m1\":1,\"m2\":0,\"dynamics\":{\"A\":[[1]],\"B1\":[[1]]},"
                       "\"players\":[{\"Q\":[[1]],\"R11\":[[1]]}]}";
    MflqProblem *p = NULL;
    MflqSolution *s = NULL;
    if (mflq_problem_from_json(json, &p) != MFLQ_ERROR_OK) return 10;
    if (mflq_solve(p, MFLQ_MODE_CONTROL, &s) != MFLQ_ERROR_OK) return 11;
    MflqStatus st;
    if (mflq_solution_status(s, &st) != MFLQ_ERROR_OK || st != MFLQ_STATUS_SOLVED) return 12;
    double P; size_t r, c;
    if (mflq_solution_matrix(s, "P", &P, 1, &r, &c) != MFLQ_ERROR_OK) return 13;
    printf("%.12f\n", P);
    mflq_solution_free(s);
    mflq_problem_free(p);
    return 0;
}
"#,
    )
    .unwrap();
    // Syntax check always; link only if the static library from this build is present.
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
        .unwrap();
    assert!(status.success(), "header does not compile as C99");

    let Some(lib) = static_lib() else {
        eprintln!("static library not found; link step skipped");
        return;
    };
    let exe = tmp.path().join("main");
    let status = Command::new(&cc)
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "link failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "C program exited with {:?}", out.status);
    let p: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((p - (1.0 + 2f64.sqrt())).abs() < 1e-10);
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc.to_string());
        }
    }
    Err(())
}

fn static_lib() -> Option<PathBuf> {
    // tests run from target/<profile>/deps/
    let exe = std::env::current_exe().ok()?;
    let lib = exe.parent()?.parent()?.join("libmflq_ffi.a");
    lib.exists().then_some(lib)
}
