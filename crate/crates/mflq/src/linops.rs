//! Dense matrix machinery: pseudo-inverse, range tests, Lyapunov solves, spectra.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative singular-value cutoff for [`pinv`].
pub const PINV_REL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinopsError {
    #[error("Lyapunov operator is singular (min |λi+λj| = {0:e})")]
    SingularLyapunov(f64),
    #[error("linear matrix operator is singular or ill-conditioned (rcond ≈ {0:e})")]
    SingularOperator(f64),
    #[error("stochastic Lyapunov operator is not stable (abscissa = {0:e})")]
    UnstableOperator(f64),
}

#[derive(Debug, Clone)]
pub struct PinvResult {
    pub pinv: Mat,
    pub rank: usize,
    pub singular_values: Vector,
    pub tol_used: f64,
}

/// Thin singular value decomposition `A = U diag(s) Vᵀ`, `s` unordered.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Mat,
    pub s: Vector,
    pub v: Mat,
}

/// One-sided Jacobi SVD.
///
/// Used instead of nalgebra's bidiagonal SVD, which on nearly rank-deficient
/// inputs reconstructs `A` only to ~1e-6 relative and breaks the Penrose
/// identities of the pseudo-inverse.
pub fn svd(a: &Mat) -> Svd {
    let (p, q) = a.shape();
    if p < q {
        let t = svd(&a.transpose());
        return Svd { u: t.v, s: t.s, v: t.u };
    }
    let mut u = a.clone();
    let mut v = Mat::identity(q, q);
    for _sweep in 0..80 {
        let mut rotated = false;
        for i in 0..q {
            for j in i + 1..q {
                let alpha = u.column(i).norm_squared();
                let beta = u.column(j).norm_squared();
                let gamma = u.column(i).dot(&u.column(j));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for r in 0..m.nrows() {
                        let (x, y) = (m[(r, i)], m[(r, j)]);
                        m[(r, i)] = c * x - s * y;
                        m[(r, j)] = s * x + c * y;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s = Vector::from_fn(q, |j, _| u.column(j).norm());
    for j in 0..q {
        if s[j] > 0.0 {
            u.column_mut(j).unscale_mut(s[j]);
        }
    }
    Svd { u, s, v }
}

/// Moore–Penrose pseudo-inverse; singular values below `rel_tol·σ_max` are dropped.
pub fn pinv(m: &Mat, rel_tol: f64) -> PinvResult {
    pinv_scaled(m, rel_tol, 0.0)
}

/// Pseudo-inverse with cutoff `rel_tol·max(σ_max, scale)`.
///
/// `scale` lets callers express "small relative to the problem", not just
/// relative to `m` itself — a matrix that is numerically zero (all singular
/// values ~1e-17) must collapse to rank 0 rather than be inverted.
pub fn pinv_scaled(m: &Mat, rel_tol: f64, scale: f64) -> PinvResult {
    let (p, q) = m.shape();
    if p == 0 || q == 0 {
        return PinvResult {
            pinv: Mat::zeros(q, p),
            rank: 0,
            singular_values: Vector::zeros(0),
            tol_used: 0.0,
        };
    }
    let svd = svd(m);
    let (u, vt, s) = (&svd.u, &svd.v.transpose(), &svd.s);
    let smax = s.iter().cloned().fold(0.0_f64, f64::max);
    let tol = rel_tol * smax.max(scale);
    let mut out = Mat::zeros(q, p);
    let mut rank = 0;
    for k in 0..s.len() {
        if s[k] > tol && s[k] > 0.0 {
            rank += 1;
            let inv = 1.0 / s[k];
            // out += v_k * inv * u_kᵀ
            for i in 0..q {
                let vik = vt[(k, i)] * inv;
                if vik == 0.0 {
                    continue;
                }
                for j in 0..p {
                    out[(i, j)] += vik * u[(j, k)];
                }
            }
        }
    }
    let mut sv: Vec<f64> = s.iter().cloned().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    PinvResult {
        pinv: out,
        rank,
        singular_values: Vector::from_vec(sv),
        tol_used: tol,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeCheck {
    pub contained: bool,
    pub residual: f64,
}

/// Is every column of `v` in the column space of the symmetric `sigma`?
pub fn range_contains(sigma: &Mat, v: &Mat, tol: f64) -> RangeCheck {
    let pi = pinv(sigma, PINV_REL_TOL);
    range_contains_with(sigma, &pi.pinv, v, tol)
}

/// Range test against a precomputed pseudo-inverse.
pub fn range_contains_with(sigma: &Mat, sigma_pinv: &Mat, v: &Mat, tol: f64) -> RangeCheck {
    if v.nrows() == 0 || v.ncols() == 0 {
        return RangeCheck { contained: true, residual: 0.0 };
    }
    let proj = sigma * (sigma_pinv * v);
    let residual = (v - proj).norm();
    RangeCheck {
        contained: residual <= tol * v.norm().max(1.0),
        residual,
    }
}

pub fn sym(x: &Mat) -> Mat {
    (x + x.transpose()) * 0.5
}

pub fn fro(x: &Mat) -> f64 {
    x.norm()
}

/// Largest absolute entry of `x - xᵀ`.
pub fn asymmetry(x: &Mat) -> f64 {
    let n = x.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((x[(i, j)] - x[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part; `+∞` for an empty matrix.
pub fn min_sym_eig(x: &Mat) -> f64 {
    if x.nrows() == 0 {
        return f64::INFINITY;
    }
    sym(x).symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest eigenvalue of the symmetric part; `−∞` for an empty matrix.
pub fn max_sym_eig(x: &Mat) -> f64 {
    if x.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    sym(x).symmetric_eigenvalues().iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Complex eigenvalues as (re, im) pairs, via a real Schur form.
pub fn eigenvalues(f: &Mat) -> Vec<(f64, f64)> {
    if f.nrows() == 0 {
        return Vec::new();
    }
    match nalgebra::Schur::try_new(f.clone(), f64::EPSILON, 0) {
        Some(s) => s.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect(),
        None => vec![(f64::NAN, 0.0)],
    }
}

/// Maximum real part of the spectrum (`−∞` for an empty matrix).
pub fn spectral_abscissa(f: &Mat) -> f64 {
    eigenvalues(f)
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, |a, b| if b.is_nan() || a.is_nan() { f64::NAN } else { a.max(b) })
}

/// vec (column-major) of a matrix.
pub fn vec_of(x: &Mat) -> Vector {
    Vector::from_column_slice(x.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

/// Kronecker matrix of `X ↦ Σ_k L_k X R_k` acting on vec(X).
pub fn kron_operator(terms: &[(&Mat, &Mat)]) -> Mat {
    let (l0, r0) = terms[0];
    let dim = l0.ncols() * r0.nrows();
    let mut k = Mat::zeros(l0.nrows() * r0.ncols(), dim);
    for (l, r) in terms {
        k += r.transpose().kronecker(*l);
    }
    k
}

/// Solves `K x = rhs` by full-pivot LU, with one step of iterative refinement.
/// Returns the solution and a pivot-ratio condition indicator.
fn lu_solve(k: &Mat, rhs: &Vector) -> Result<Vector, LinopsError> {
    let lu = k.clone().full_piv_lu();
    let u = lu.u();
    let mut dmax = 0.0_f64;
    let mut dmin = f64::INFINITY;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].abs();
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }
    let rcond = if dmax > 0.0 { dmin / dmax } else { 0.0 };
    if !(rcond > 1e-14) {
        return Err(LinopsError::SingularOperator(rcond));
    }
    let mut x = lu.solve(rhs).ok_or(LinopsError::SingularOperator(rcond))?;
    let r = rhs - k * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinopsError::SingularOperator(rcond));
    }
    Ok(x)
}

/// Solves `Σ_k L_k X R_k = −W` for X (general, not necessarily symmetric).
pub fn solve_matrix_equation(terms: &[(&Mat, &Mat)], w: &Mat) -> Result<Mat, LinopsError> {
    let k = kron_operator(terms);
    let x = lu_solve(&k, &(-vec_of(w)))?;
    Ok(unvec(&x, w.nrows(), w.ncols()))
}

/// Solves `F X + X Fᵀ = −W`; output symmetrized.
pub fn solve_lyapunov(f: &Mat, w: &Mat) -> Result<Mat, LinopsError> {
    let n = f.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let eig = eigenvalues(f);
    let scale = f.norm().max(1.0);
    let mut gap = f64::INFINITY;
    for a in &eig {
        for b in &eig {
            let s = ((a.0 + b.0).powi(2) + (a.1 + b.1).powi(2)).sqrt();
            gap = gap.min(s);
        }
    }
    if !(gap > 1e-12 * scale) {
        return Err(LinopsError::SingularLyapunov(gap));
    }
    let id = Mat::identity(n, n);
    let ft = f.transpose();
    let x = solve_matrix_equation(&[(f, &id), (&id, &ft)], w)
        .map_err(|_| LinopsError::SingularLyapunov(gap))?;
    Ok(sym(&x))
}

/// Kronecker matrix of `X ↦ F X + X Fᵀ + G X Gᵀ`.
pub fn stochastic_operator(f: &Mat, g: &Mat) -> Mat {
    let n = f.nrows();
    let id = Mat::identity(n, n);
    let ft = f.transpose();
    let gt = g.transpose();
    kron_operator(&[(f, &id), (&id, &ft), (g, &gt)])
}

/// Spectral abscissa of the stochastic Lyapunov operator of (F, G).
pub fn stochastic_abscissa(f: &Mat, g: &Mat) -> f64 {
    if f.nrows() == 0 {
        return f64::NEG_INFINITY;
    }
    spectral_abscissa(&stochastic_operator(f, g))
}

/// Solves `F X + X Fᵀ + G X Gᵀ = −W`; output symmetrized when W is symmetric.
pub fn solve_stochastic_lyapunov(f: &Mat, g: &Mat, w: &Mat) -> Result<Mat, LinopsError> {
    let n = f.nrows();
    if n == 0 {
        return Ok(Mat::zeros(0, 0));
    }
    let k = stochastic_operator(f, g);
    let x = lu_solve(&k, &(-vec_of(w)))?;
    let x = unvec(&x, n, n);
    if asymmetry(w) <= 1e-12 * w.norm().max(1.0) {
        Ok(sym(&x))
    } else {
        Ok(x)
    }
}

/// As [`solve_stochastic_lyapunov`], but refuses unstable operators.
pub fn solve_stochastic_lyapunov_stable(f: &Mat, g: &Mat, w: &Mat) -> Result<Mat, LinopsError> {
    let a = stochastic_abscissa(f, g);
    if !(a < 0.0) {
        return Err(LinopsError::UnstableOperator(a));
    }
    solve_stochastic_lyapunov(f, g, w)
}

/// Upper-triangle coordinates of a symmetric matrix (row-major over i ≤ j).
pub fn vech(x: &Mat) -> Vector {
    let n = x.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            v.push(x[(i, j)]);
        }
    }
    Vector::from_vec(v)
}

pub fn unvech(v: &Vector, n: usize) -> Mat {
    let mut x = Mat::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            x[(i, j)] = v[k];
            x[(j, i)] = v[k];
            k += 1;
        }
    }
    x
}

/// Column blocks `cols` of `m`.
pub fn cols(m: &Mat, range: std::ops::Range<usize>) -> Mat {
    m.columns(range.start, range.len()).into_owned()
}

/// Row blocks `rows` of `m`.
pub fn rows(m: &Mat, range: std::ops::Range<usize>) -> Mat {
    m.rows(range.start, range.len()).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_zero_is_zero() {
        let r = pinv(&Mat::zeros(2, 3), PINV_REL_TOL);
        assert_eq!(r.rank, 0);
        assert_eq!(r.pinv.shape(), (3, 2));
        assert_eq!(r.pinv.norm(), 0.0);
    }

    #[test]
    fn scaled_cutoff_drops_roundoff() {
        let m = Mat::from_row_slice(2, 2, &[1e-17, 0.0, 0.0, -2e-17]);
        assert_eq!(pinv(&m, PINV_REL_TOL).rank, 2);
        assert_eq!(pinv_scaled(&m, PINV_REL_TOL, 1.0).rank, 0);
    }

    #[test]
    fn range_orthogonal_complement() {
        let s = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let v = Mat::from_row_slice(2, 1, &[0.0, 1.0]);
        let r = range_contains(&s, &v, 1e-8);
        assert!(!r.contained);
        assert!((r.residual - 1.0).abs() < 1e-14);
    }

    #[test]
    fn lyapunov_scalar() {
        let x = solve_lyapunov(&Mat::from_element(1, 1, -2.0), &Mat::from_element(1, 1, 1.0)).unwrap();
        assert!((x[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn lyapunov_singular_detected() {
        let f = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(solve_lyapunov(&f, &Mat::identity(2, 2)), Err(LinopsError::SingularLyapunov(_))));
    }

    #[test]
    fn stochastic_lyapunov_examples() {
        let x = solve_stochastic_lyapunov(
            &Mat::from_element(1, 1, -1.0),
            &Mat::from_element(1, 1, 0.5),
            &Mat::from_element(1, 1, 1.0),
        )
        .unwrap();
        assert!((x[(0, 0)] - 4.0 / 7.0).abs() < 1e-14);
        let i2 = Mat::identity(2, 2);
        let x = solve_stochastic_lyapunov(&(-&i2), &i2, &i2).unwrap();
        assert!((x - &i2).norm() < 1e-14);
    }

    #[test]
    fn abscissa_examples() {
        assert!((spectral_abscissa(&(-Mat::identity(3, 3))) + 1.0).abs() < 1e-14);
        let rot = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(spectral_abscissa(&rot).abs() < 1e-14);
        assert_eq!(spectral_abscissa(&Mat::zeros(0, 0)), f64::NEG_INFINITY);
    }

    #[test]
    fn vech_roundtrip() {
        let x = Mat::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        assert_eq!(unvech(&vech(&x), 3), x);
    }
}
