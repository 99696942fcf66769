//! Mean-field L²-stabilizer test with a Lyapunov-type certificate.

use serde::{Deserialize, Serialize};

use crate::linops::{fro, min_sym_eig, solve_lyapunov, solve_stochastic_lyapunov, spectral_abscissa, stochastic_abscissa, Mat};
use crate::model::{Dynamics, Problem};

/// Strict-stability margin for both spectral abscissas.
pub const EPS_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    None,
    MeanSystemUnstable,
    VarianceSystemUnstable,
    CertificateNotPositive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilizerCertificate {
    pub is_stabilizer: bool,
    pub p0: Option<Mat>,
    pub p0_bar: Option<Mat>,
    pub min_eig_p0: f64,
    pub min_eig_p0_bar: f64,
    /// Spectral abscissa of `Â + B̂Θ̄`.
    pub hurwitz_abscissa: f64,
    /// Spectral abscissa of `X ↦ A_Θ X + X A_Θᵀ + C_Θ X C_Θᵀ`.
    pub stochastic_abscissa: f64,
    pub failure_reason: FailureReason,
}

fn pd_threshold(x: &Mat) -> f64 {
    1e-9 * (1.0 + fro(x))
}

/// Checks whether `(Θ, Θ̄)` is an MF-L²-stabilizer of the dynamics.
pub fn check_stabilizer_dyn(d: &Dynamics, theta: &Mat, theta_bar: &Mat) -> StabilizerCertificate {
    let n = d.n;
    let a_cl_hat = d.a_hat() + d.b_hat() * theta_bar;
    let a_th = &d.a + &d.b * theta;
    let c_th = &d.c + &d.d * theta;
    let c_cl_hat = d.c_hat() + d.d_hat() * theta_bar;
    let hurwitz = spectral_abscissa(&a_cl_hat);
    let stoch = stochastic_abscissa(&a_th, &c_th);

    let mut cert = StabilizerCertificate {
        is_stabilizer: false,
        p0: None,
        p0_bar: None,
        min_eig_p0: f64::NAN,
        min_eig_p0_bar: f64::NAN,
        hurwitz_abscissa: hurwitz,
        stochastic_abscissa: stoch,
        failure_reason: FailureReason::MeanSystemUnstable,
    };
    if !(hurwitz < -EPS_MARGIN) {
        return cert;
    }
    let id = Mat::identity(n, n);
    let p0_bar = match solve_lyapunov(&a_cl_hat, &id) {
        Ok(x) => x,
        Err(_) => return cert,
    };
    cert.min_eig_p0_bar = min_sym_eig(&p0_bar);
    let bar_ok = cert.min_eig_p0_bar > pd_threshold(&p0_bar);
    cert.p0_bar = Some(p0_bar.clone());

    if !(stoch < -EPS_MARGIN) {
        cert.failure_reason = FailureReason::VarianceSystemUnstable;
        return cert;
    }
    let w = &id + &c_cl_hat * &p0_bar * c_cl_hat.transpose();
    let p0 = match solve_stochastic_lyapunov(&a_th, &c_th, &w) {
        Ok(x) => x,
        Err(_) => {
            cert.failure_reason = FailureReason::VarianceSystemUnstable;
            return cert;
        }
    };
    cert.min_eig_p0 = min_sym_eig(&p0);
    let ok = bar_ok && cert.min_eig_p0 > pd_threshold(&p0);
    cert.p0 = Some(p0);
    cert.is_stabilizer = ok;
    cert.failure_reason = if ok { FailureReason::None } else { FailureReason::CertificateNotPositive };
    cert
}

pub fn check_stabilizer<P: Problem + ?Sized>(spec: &P, theta: &Mat, theta_bar: &Mat) -> StabilizerCertificate {
    check_stabilizer_dyn(spec.dynamics(), theta, theta_bar)
}

/// Stability of the uncontrolled system `[A, Ā, C, C̄]`.
pub fn check_uncontrolled_stability<P: Problem + ?Sized>(spec: &P) -> StabilizerCertificate {
    let d = spec.dynamics();
    let z = Mat::zeros(d.m(), d.n);
    check_stabilizer_dyn(d, &z, &z)
}
