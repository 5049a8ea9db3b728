//! Semidefinite programming and LMI-based observer synthesis.

mod design;
mod problem;
mod solver;

pub use design::{
    build_initial_design_problem, build_redesign_problem, line_search_lipschitz,
    performance_constants, solve_design, verify_certificate, CertificateReport, DesignMode,
    DesignProblem, DesignVars, LineSearchResult, LmiSolution, SearchMethod,
};
pub use problem::{
    AffineMatrix, LinearConstraint, LmiBlock, MatVar, ScalarVar, SdpProblem, Sense, SymVar,
    VarValue, VariableDecl, VariableShape,
};
pub use solver::{sdp_solve, SdpSolution, SdpStatus};
