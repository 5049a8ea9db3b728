//! Observer-gain synthesis problems, certificate verification, and the
//! line search over the admissible Lipschitz constant.

use serde::{Deserialize, Serialize};

use super::problem::{AffineMatrix, MatVar, ScalarVar, SdpProblem, Sense, SymVar, VarValue};
use super::solver::{sdp_solve, SdpStatus};
use crate::error::{invalid, Error, Result};
use crate::linalg::{frobenius_norm, max_eig, min_eig, solve, spectral_radius, Matrix, SymMatrix};
use crate::system::SystemModel;
use crate::NumericsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMode {
    Initial,
    Redesign,
}

/// Handles to the unknowns of a design problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignVars {
    pub p: SymVar,
    pub q: SymVar,
    pub k: MatVar,
    pub kappa: [ScalarVar; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignProblem {
    pub mode: DesignMode,
    pub problem: SdpProblem,
    pub vars: DesignVars,
    pub lipschitz: f64,
    pub p_bar: f64,
    pub lambda_kappa: f64,
    /// Selection matrix of the learned nonlinearity (redesign only).
    pub b_phi: Option<Matrix>,
}

impl DesignProblem {
    /// Same constraints with the regularization weight replaced.
    pub fn with_lambda(&self, lambda_kappa: f64) -> Self {
        let mut out = self.clone();
        for v in &self.vars.kappa[1..] {
            let c = self.problem.objective[v.0];
            out.problem.objective[v.0] = if self.lambda_kappa == 0.0 {
                0.0
            } else {
                c / self.lambda_kappa * lambda_kappa
            };
        }
        out.lambda_kappa = lambda_kappa;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmiSolution {
    pub mode: DesignMode,
    pub status: SdpStatus,
    pub p: SymMatrix,
    pub q: SymMatrix,
    pub k: Matrix,
    /// `P⁻¹K`; error dynamics `e⁺ = (A + LC)e + …`.
    pub l: Matrix,
    pub kappa: [f64; 4],
    pub objective: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub lipschitz: f64,
    pub p_bar: f64,
    pub b_phi: Option<Matrix>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub lyap_residual: f64,
    pub gain_cond_slack: f64,
    pub schur_radius: f64,
    pub delta0: f64,
    pub delta1: f64,
    pub passed: bool,
}

/// Pieces shared by both design problems.
struct Common {
    prob: SdpProblem,
    vars: DesignVars,
    /// `PA + KC`
    pak: AffineMatrix,
}

fn check_inputs(sys: &SystemModel, p_bar: f64, lipschitz: f64) -> Result<()> {
    sys.validate()?;
    if !(lipschitz >= 0.0 && lipschitz.is_finite()) {
        return invalid("Lipschitz constant must be finite and non-negative");
    }
    if !(p_bar > 0.0 && p_bar.is_finite()) {
        return invalid("coefficient bound p̄ must be positive");
    }
    if !sys.is_observable() {
        return Err(Error::Precondition(format!(
            "(A, C) is not observable: observability rank {} < {}",
            sys.observability_rank(),
            sys.n_x()
        )));
    }
    Ok(())
}

fn common(sys: &SystemModel, p_bar: f64, lipschitz: f64) -> Result<Common> {
    let n = sys.n_x();
    let mut prob = SdpProblem::new();
    let p = prob.sym_var("P", n);
    let q = prob.sym_var("Q", n);
    let k = prob.mat_var("K", n, sys.n_y());
    let kappa = [
        prob.scalar_var("kappa0"),
        prob.scalar_var("kappa1"),
        prob.scalar_var("kappa2"),
        prob.scalar_var("kappa3"),
    ];
    let pe = AffineMatrix::sym(p);
    let pak = pe
        .right_mul(&sys.a)?
        .add(&AffineMatrix::mat(k).right_mul(&sys.c)?)?;

    let kap = |i: usize, n| AffineMatrix::scalar_identity(kappa[i], 1.0, n);
    prob.add_lmi(
        "Q >= kappa1 I",
        Sense::Psd,
        AffineMatrix::sym(q).sub(&kap(1, n))?,
    )?;
    prob.add_lmi("P <= kappa2 I", Sense::Psd, kap(2, n).sub(&pe)?)?;
    let v = pak.vectorize();
    let nn = v.rows;
    prob.add_lmi(
        "frobenius lift",
        Sense::Psd,
        AffineMatrix::blocks(&[
            vec![Some(kap(3, nn)), Some(v.clone())],
            vec![Some(v.transpose()), Some(kap(3, 1))],
        ])?,
    )?;
    let c2 = 4.0 * lipschitz * lipschitz * p_bar * p_bar;
    let c3 = 8.0 * p_bar * lipschitz;
    prob.add_scalar(
        "gain condition",
        &[(kappa[2], c2), (kappa[3], c3), (kappa[1], -1.0)],
        0.0,
        Sense::Nsd,
    )?;
    prob.add_scalar("kappa0 >= 0", &[(kappa[0], 1.0)], 0.0, Sense::Psd)?;
    Ok(Common {
        prob,
        vars: DesignVars { p, q, k, kappa },
        pak,
    })
}

/// Initial design: minimize `κ₀ + λ_κ(κ₁+κ₂+κ₃)` subject to
/// `[−P+Q, ⋆; PA+KC, −P] ⪯ κ₀I`, `Q ⪰ κ₁I`, `I ⪯ P ⪯ κ₂I`,
/// `‖PA+KC‖_F ≤ κ₃`, `4𝔏²p̄²κ₂ + 8p̄𝔏κ₃ ≤ κ₁`, `κ₁ ≥ 1`, `κ₀ ≥ 0`.
///
/// The constraints are homogeneous in `(P, Q, K, κ)`, so `κ₁ ≥ 1` only fixes
/// the scale; `κ₀ = 0` at the optimum means the unrelaxed conditions hold.
pub fn build_initial_design_problem(
    sys: &SystemModel,
    p_bar: f64,
    lipschitz: f64,
    lambda_kappa: f64,
) -> Result<DesignProblem> {
    check_inputs(sys, p_bar, lipschitz)?;
    let n = sys.n_x();
    let Common {
        mut prob,
        vars,
        pak,
    } = common(sys, p_bar, lipschitz)?;
    let pe = AffineMatrix::sym(vars.p);
    let qe = AffineMatrix::sym(vars.q);
    let k0 = |n| AffineMatrix::scalar_identity(vars.kappa[0], 1.0, n);
    let main = AffineMatrix::blocks(&[
        vec![Some(qe.sub(&pe)?.sub(&k0(n))?), Some(pak.transpose())],
        vec![Some(pak.clone()), Some(pe.scale(-1.0).sub(&k0(n))?)],
    ])?;
    prob.add_lmi("lyapunov", Sense::Nsd, main)?;
    prob.add_lmi(
        "P >= I",
        Sense::Psd,
        pe.sub(&AffineMatrix::constant(Matrix::identity(n)))?,
    )?;
    prob.add_scalar("kappa1 >= 1", &[(vars.kappa[1], 1.0)], -1.0, Sense::Psd)?;
    prob.set_objective(&[
        (vars.kappa[0], 1.0),
        (vars.kappa[1], lambda_kappa),
        (vars.kappa[2], lambda_kappa),
        (vars.kappa[3], lambda_kappa),
    ]);
    Ok(DesignProblem {
        mode: DesignMode::Initial,
        problem: prob,
        vars,
        lipschitz,
        p_bar,
        lambda_kappa,
        b_phi: None,
    })
}

/// Redesign with the learned model:
/// `[−P+Q, ⋆, ⋆, 𝔏C_qᵀ; PA+KC, −P, 0, 0; B_φᵀ(PA+KC), 0, B_φᵀPB_φ−I, 0; 𝔏C_q, 0, 0, −I] ⪯ κ₀I`
/// with the same κ-constraints as the initial design. The `−I` blocks fix the
/// scale, so `κ₁` is only required non-negative and the objective
/// `κ₀ + λ_κ(κ₂ + κ₃ − κ₁)` favors a large decrease margin. With `𝔏 = 0` the
/// last block row is dropped.
pub fn build_redesign_problem(
    sys: &SystemModel,
    lipschitz: f64,
    p_bar: f64,
    b_phi: &Matrix,
    lambda_kappa: f64,
) -> Result<DesignProblem> {
    check_inputs(sys, p_bar, lipschitz)?;
    let n = sys.n_x();
    if b_phi.rows() != n
        || b_phi.cols() == 0
        || b_phi.as_slice().iter().any(|v| *v != 0.0 && *v != 1.0)
    {
        return invalid("B_φ must be an n_x × k matrix of zeros and ones");
    }
    let na = b_phi.cols();
    let nq = sys.n_q();
    let Common {
        mut prob,
        vars,
        pak,
    } = common(sys, p_bar, lipschitz)?;
    let pe = AffineMatrix::sym(vars.p);
    let qe = AffineMatrix::sym(vars.q);
    let k0 = |n| AffineMatrix::scalar_identity(vars.kappa[0], 1.0, n);
    let bpak = pak.left_mul(&b_phi.transpose())?;
    let bpb = pe.left_mul(&b_phi.transpose())?.right_mul(b_phi)?;
    let eye = |n| AffineMatrix::constant(Matrix::identity(n));
    let mut grid = vec![
        vec![
            Some(qe.sub(&pe)?.sub(&k0(n))?),
            Some(pak.transpose()),
            Some(bpak.transpose()),
        ],
        vec![Some(pak.clone()), Some(pe.scale(-1.0).sub(&k0(n))?), None],
        vec![Some(bpak), None, Some(bpb.sub(&eye(na))?.sub(&k0(na))?)],
    ];
    if lipschitz > 0.0 {
        let lcq = AffineMatrix::constant(sys.cq.scale(lipschitz));
        grid[0].push(Some(lcq.transpose()));
        grid[1].push(None);
        grid[2].push(None);
        grid.push(vec![
            Some(lcq),
            None,
            None,
            Some(eye(nq).scale(-1.0).sub(&k0(nq))?),
        ]);
    }
    prob.add_lmi("redesign", Sense::Nsd, AffineMatrix::blocks(&grid)?)?;
    prob.add_scalar("kappa1 >= 0", &[(vars.kappa[1], 1.0)], 0.0, Sense::Psd)?;
    prob.set_objective(&[
        (vars.kappa[0], 1.0),
        (vars.kappa[1], -lambda_kappa),
        (vars.kappa[2], lambda_kappa),
        (vars.kappa[3], lambda_kappa),
    ]);
    Ok(DesignProblem {
        mode: DesignMode::Redesign,
        problem: prob,
        vars,
        lipschitz,
        p_bar,
        lambda_kappa,
        b_phi: Some(b_phi.clone()),
    })
}

/// Decrease constants `(δ₀, δ₁)` of the certificate.
pub fn performance_constants(
    sys: &SystemModel,
    mode: DesignMode,
    p: &SymMatrix,
    q: &SymMatrix,
    lipschitz: f64,
) -> Result<(f64, f64)> {
    let mut d0 = 0.5 * min_eig(q)?;
    if mode == DesignMode::Redesign {
        let cqtcq = SymMatrix::from_symmetric_part(&(&sys.cq.transpose() * &sys.cq));
        d0 += lipschitz * lipschitz * min_eig(&cqtcq)?;
    }
    let d1 = sys.phi_bound * sys.phi_bound * max_eig(p)?;
    Ok((d0, d1))
}

/// Solve a design problem and extract `P, Q, K, L, κ`.
///
/// A certificate may need large `P`, so the `λ_κ` regularizer can make the
/// optimum trade a small positive `κ₀` for smaller `κ₂, κ₃`. When that
/// happens the problem is re-solved with `λ_κ` reduced by 10³ and then with
/// `λ_κ = 0`, so exactness is decided by `κ₀` alone.
pub fn solve_design(
    dp: &DesignProblem,
    sys: &SystemModel,
    cfg: &NumericsConfig,
) -> Result<LmiSolution> {
    let mut sol = solve_design_once(dp, sys, cfg)?;
    for lambda in [dp.lambda_kappa * 1e-3, 0.0] {
        if sol.is_exact(cfg) || dp.lambda_kappa == 0.0 {
            break;
        }
        let retry = solve_design_once(&dp.with_lambda(lambda), sys, cfg)?;
        if retry.status == SdpStatus::Optimal
            && (sol.status != SdpStatus::Optimal || retry.kappa[0] < sol.kappa[0])
        {
            sol = retry;
        }
    }
    Ok(sol)
}

fn solve_design_once(
    dp: &DesignProblem,
    sys: &SystemModel,
    cfg: &NumericsConfig,
) -> Result<LmiSolution> {
    let sol = sdp_solve(&dp.problem, cfg)?;
    let x = &sol.x;
    let p = dp.vars.p.value(x);
    let q = dp.vars.q.value(x);
    let k = dp.vars.k.value(x);
    let l = solve(p.as_matrix(), &k).unwrap_or_else(|_| Matrix::zeros(k.rows(), k.cols()));
    let kappa = dp.vars.kappa.map(|v| v.value(x));
    let (delta0, delta1) =
        performance_constants(sys, dp.mode, &p, &q, dp.lipschitz).unwrap_or((f64::NAN, f64::NAN));
    Ok(LmiSolution {
        mode: dp.mode,
        status: sol.status,
        p,
        q,
        k,
        l,
        kappa,
        objective: sol.objective,
        delta0,
        delta1,
        lipschitz: dp.lipschitz,
        p_bar: dp.p_bar,
        b_phi: dp.b_phi.clone(),
        iterations: sol.iterations,
    })
}

impl LmiSolution {
    /// `κ₀` at most the threshold with an optimal solver status.
    pub fn is_exact(&self, cfg: &NumericsConfig) -> bool {
        self.status == SdpStatus::Optimal && self.kappa[0] <= cfg.kappa_zero_tol
    }
}

/// Recompute every certificate condition from `P`, `Q`, `L` and the system.
///
/// Initial mode: `λ_max(MᵀPM − P + Q)`, with `M = A + LC`. Redesign mode: the
/// largest eigenvalue of the assembled redesign block matrix with `PA + KC`
/// replaced by `PM`. In both modes negative definiteness failures of `P` or
/// `Q` also count towards the residual.
pub fn verify_certificate(
    sol: &LmiSolution,
    sys: &SystemModel,
    lipschitz: f64,
    p_bar: f64,
    cfg: &NumericsConfig,
) -> CertificateReport {
    let fail = CertificateReport {
        lyap_residual: f64::INFINITY,
        gain_cond_slack: f64::INFINITY,
        schur_radius: f64::INFINITY,
        delta0: f64::NAN,
        delta1: f64::NAN,
        passed: false,
    };
    let inner = || -> Result<CertificateReport> {
        let n = sys.n_x();
        let m = &sys.a + &(&sol.l * &sys.c);
        let p = sol.p.as_matrix();
        let pm = p * &m;
        let mut resid = match sol.mode {
            DesignMode::Initial => {
                let r = &(&(&m.transpose() * &pm) - p) + sol.q.as_matrix();
                max_eig(&SymMatrix::from_symmetric_part(&r))?
            }
            DesignMode::Redesign => {
                let b = sol.b_phi.clone().ok_or_else(|| {
                    Error::InvalidInput("redesign certificate without B_φ".into())
                })?;
                let na = b.cols();
                let nq = sys.n_q();
                let bpm = &b.transpose() * &pm;
                let bpb = &(&b.transpose() * p) * &b;
                let lcq = sys.cq.scale(lipschitz);
                let z = |r, c| Some(Matrix::zeros(r, c));
                let big = Matrix::from_blocks(&[
                    vec![
                        Some(sol.q.as_matrix() - p),
                        Some(pm.transpose()),
                        Some(bpm.transpose()),
                        Some(lcq.transpose()),
                    ],
                    vec![Some(pm.clone()), Some(p.scale(-1.0)), z(n, na), z(n, nq)],
                    vec![
                        Some(bpm),
                        z(na, n),
                        Some(&bpb - &Matrix::identity(na)),
                        z(na, nq),
                    ],
                    vec![
                        Some(lcq),
                        z(nq, n),
                        z(nq, na),
                        Some(Matrix::identity(nq).scale(-1.0)),
                    ],
                ])?;
                max_eig(&SymMatrix::from_symmetric_part(&big))?
            }
        };
        resid = resid.max(-min_eig(&sol.p)?).max(-min_eig(&sol.q)?);
        let slack = 4.0 * p_bar * p_bar * lipschitz * lipschitz * max_eig(&sol.p)?
            + 8.0 * p_bar * lipschitz * frobenius_norm(&pm)
            - min_eig(&sol.q)?;
        let rho = spectral_radius(&m)?;
        let (delta0, delta1) = performance_constants(sys, sol.mode, &sol.p, &sol.q, lipschitz)?;
        let passed = resid <= cfg.lmi_residual_tol
            && slack <= 0.0
            && rho < 1.0
            && min_eig(&sol.p)? > 0.0
            && min_eig(&sol.q)? > 0.0;
        Ok(CertificateReport {
            lyap_residual: resid,
            gain_cond_slack: slack,
            schur_radius: rho,
            delta0,
            delta1,
            passed,
        })
    };
    if !sol.l.is_finite() || sol.l.shape() != (sys.n_x(), sys.n_y()) {
        return fail;
    }
    inner().unwrap_or(fail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMethod {
    #[default]
    Bisection,
    Golden,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LineSearchResult {
    pub lipschitz: f64,
    pub solution: LmiSolution,
    pub report: CertificateReport,
    /// Every probe: `(𝔏, κ₀, accepted)`.
    pub probes: Vec<(f64, f64, bool)>,
}

/// Largest `𝔏 ∈ [lo, hi]` (to within `tol`) whose initial design is exact and
/// whose certificate verifies. Feasibility is monotone in `𝔏`, so the search
/// only shrinks a bracket `[feasible, infeasible]`.
#[allow(clippy::too_many_arguments)]
pub fn line_search_lipschitz(
    sys: &SystemModel,
    p_bar: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    lambda_kappa: f64,
    method: SearchMethod,
    cfg: &NumericsConfig,
) -> Result<LineSearchResult> {
    if !(lo >= 0.0 && hi >= lo && lo.is_finite() && hi.is_finite()) {
        return invalid("line search needs 0 ≤ lo ≤ hi");
    }
    if !(tol > 0.0) && hi > lo {
        return invalid("line search tolerance must be positive");
    }
    let mut probes = Vec::new();
    let mut probe = |lip: f64| -> Result<(bool, LmiSolution, CertificateReport)> {
        let dp = build_initial_design_problem(sys, p_bar, lip, lambda_kappa)?;
        let sol = solve_design(&dp, sys, cfg)?;
        let rep = verify_certificate(&sol, sys, lip, p_bar, cfg);
        let ok = sol.is_exact(cfg) && rep.passed;
        log::debug!(
            "line search probe 𝔏 = {lip:.6}: κ₀ = {:.3e}, certificate {}",
            sol.kappa[0],
            rep.passed
        );
        probes.push((lip, sol.kappa[0], ok));
        Ok((ok, sol, rep))
    };
    let (ok, mut best_sol, mut best_rep) = probe(lo)?;
    if !ok {
        return Err(Error::NoDesign(format!(
            "no certified design even at 𝔏 = {lo} (κ₀ = {:.3e}, residual {:.3e}, radius {:.4})",
            best_sol.kappa[0], best_rep.lyap_residual, best_rep.schur_radius
        )));
    }
    let mut a = lo;
    let mut b = hi;
    if hi > lo {
        let (ok, s, r) = probe(hi)?;
        if ok {
            a = hi;
            best_sol = s;
            best_rep = r;
        }
    }
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    while b - a > tol && a < hi {
        let mid = match method {
            SearchMethod::Bisection => 0.5 * (a + b),
            SearchMethod::Golden => b - INV_PHI * (b - a),
        };
        let (ok, s, r) = probe(mid)?;
        if ok {
            a = mid;
            best_sol = s;
            best_rep = r;
        } else {
            b = mid;
        }
    }
    Ok(LineSearchResult {
        lipschitz: a,
        solution: best_sol,
        report: best_rep,
        probes,
    })
}
