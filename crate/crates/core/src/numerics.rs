//! Central record of numerical tolerances and iteration caps.
//!
//! Every module takes its thresholds from [`NumericsConfig`] rather than
//! hard-coding them, so a run can be re-tuned from one place.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsConfig {
    /// Allowed asymmetry when accepting a matrix as symmetric.
    pub symmetry_tol: f64,
    /// Relative reconstruction tolerance for eigen/Cholesky factorizations.
    pub factorization_tol: f64,
    /// Sweep cap for the tridiagonal QL and Hessenberg QR iterations.
    pub eig_max_sweeps: usize,

    /// SDP: Newton-step cap.
    pub sdp_max_iterations: usize,
    /// SDP: cap on the total number of scalar unknowns.
    pub sdp_max_variables: usize,
    /// SDP: relative duality-gap stopping tolerance.
    pub sdp_gap_tol: f64,
    /// SDP: relative primal/dual residual stopping tolerance.
    pub sdp_feas_tol: f64,
    /// SDP: merit (max of relative gap and residuals) accepted when the
    /// iteration stalls before reaching the stopping tolerances.
    pub sdp_accept_tol: f64,
    /// SDP: ratio used to accept a Farkas-type infeasibility certificate.
    pub sdp_infeas_tol: f64,
    /// SDP: fraction of the distance to the cone boundary taken per step.
    pub sdp_step_fraction: f64,

    /// Largest eigenvalue an LMI residual may have and still count as satisfied.
    pub lmi_residual_tol: f64,
    /// A design counts as exact when the slack scalar is at most this.
    pub kappa_zero_tol: f64,

    /// Default GP jitter added to the Gram diagonal.
    pub gp_jitter: f64,
    /// Jitter ceiling for the escalation loop in GP fitting.
    pub gp_max_jitter: f64,

    /// Default state-norm guard for plant and observer simulation.
    pub divergence_guard: f64,
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            symmetry_tol: 1e-12,
            factorization_tol: 1e-9,
            eig_max_sweeps: 60,
            sdp_max_iterations: 200,
            sdp_max_variables: 200,
            sdp_gap_tol: 1e-9,
            sdp_feas_tol: 1e-9,
            sdp_accept_tol: 1e-7,
            sdp_infeas_tol: 1e-8,
            sdp_step_fraction: 0.95,
            lmi_residual_tol: 1e-6,
            kappa_zero_tol: 1e-6,
            gp_jitter: 1e-10,
            gp_max_jitter: 1e-4,
            divergence_guard: 1e6,
        }
    }
}
