//! Infeasible-start primal-dual interior-point method for affine LMIs.
//!
//! Solves `min cᵀx  s.t.  Fⱼ(x) = Fⱼ₀ + Σₖ xₖFⱼₖ ⪰ 0` together with its dual
//! `max −Σⱼ⟨Fⱼ₀, Zⱼ⟩  s.t.  Σⱼ⟨Fⱼₖ, Zⱼ⟩ = cₖ, Zⱼ ⪰ 0`. Search directions use
//! Nesterov–Todd scaling and a Mehrotra predictor-corrector centering rule.

use serde::{Deserialize, Serialize};

use super::problem::SdpProblem;
use crate::error::Result;
use crate::linalg::{cholesky, cholesky_solve, min_eig, solve_vec, sym_eig, Matrix, SymMatrix};
use crate::NumericsConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    pub rel_gap: f64,
    /// Relative residual of `F(x) − S`.
    pub primal_residual: f64,
    /// Relative residual of `A*(Z) − c`.
    pub dual_residual: f64,
    /// For `Infeasible`: `‖A*(Ẑ)‖ / (−⟨F₀, Ẑ⟩)` of the normalized Farkas certificate `Ẑ`.
    pub infeasibility_measure: Option<f64>,
}

struct Block {
    n: usize,
    f0: Matrix,
    /// `(unknown index, coefficient)` pairs.
    fk: Vec<(usize, Matrix)>,
}

impl Block {
    fn eval(&self, x: &[f64]) -> Matrix {
        let mut out = self.f0.clone();
        for (k, m) in &self.fk {
            axpy(&mut out, x[*k], m);
        }
        out
    }

    /// `Σₖ dₖ Fⱼₖ` without the constant.
    fn linear(&self, d: &[f64]) -> Matrix {
        let mut out = Matrix::zeros(self.n, self.n);
        for (k, m) in &self.fk {
            axpy(&mut out, d[*k], m);
        }
        out
    }
}

fn axpy(y: &mut Matrix, a: f64, x: &Matrix) {
    if a == 0.0 {
        return;
    }
    for i in 0..y.rows() {
        for j in 0..y.cols() {
            y[(i, j)] += a * x[(i, j)];
        }
    }
}

fn sym(m: &Matrix) -> SymMatrix {
    SymMatrix::from_symmetric_part(m)
}

/// Largest `α` with `X + αΔ ⪰ 0`, given `X ≻ 0`.
fn max_step(x: &Matrix, d: &Matrix) -> Result<f64> {
    let ex = sym_eig(&sym(x))?;
    if ex.min() <= 0.0 {
        return Ok(0.0);
    }
    let x_mhalf = ex.map(|v| 1.0 / v.sqrt()).into_matrix();
    let lmin = min_eig(&sym(&(&(&x_mhalf * d) * &x_mhalf)))?;
    Ok(if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    })
}

struct Scaling {
    w: Matrix,
    s_inv: Matrix,
}

/// NT scaling point `W` with `W S W = Z`.
fn nt_scaling(s: &Matrix, z: &Matrix) -> Result<Scaling> {
    let es = sym_eig(&sym(s))?;
    let s_half = es.map(|v| v.max(f64::MIN_POSITIVE).sqrt()).into_matrix();
    let s_mhalf = es
        .map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt())
        .into_matrix();
    let s_inv = es.map(|v| 1.0 / v.max(f64::MIN_POSITIVE)).into_matrix();
    let g = &(&s_half * z) * &s_half;
    let g_half = sym_eig(&sym(&g))?.map(|v| v.max(0.0).sqrt()).into_matrix();
    let w = (&(&s_mhalf * &g_half) * &s_mhalf).symmetric_part();
    Ok(Scaling { w, s_inv })
}

struct Direction {
    dx: Vec<f64>,
    ds: Vec<Matrix>,
    dz: Vec<Matrix>,
}

pub fn sdp_solve(prob: &SdpProblem, cfg: &NumericsConfig) -> Result<SdpSolution> {
    prob.validate(cfg.sdp_max_variables)?;
    let blocks: Vec<Block> = prob
        .standard_blocks()
        .into_iter()
        .map(|(_, e)| Block {
            n: e.rows,
            f0: e.constant.symmetric_part(),
            fk: e
                .terms
                .iter()
                .map(|(k, f)| (*k, f.symmetric_part()))
                .collect(),
        })
        .collect();
    let run = ipm(&blocks, &prob.objective, cfg)?;
    if run.solution.status != SdpStatus::MaxIterations {
        return Ok(run.solution);
    }
    // Unresolved: decide feasibility with the always-feasible auxiliary problem
    // min t s.t. F(x) + tI ⪰ 0, t ≥ −1.
    let m = prob.num_unknowns;
    let t = m;
    let mut aux: Vec<Block> = blocks
        .iter()
        .map(|b| {
            let mut fk = b.fk.clone();
            fk.push((t, Matrix::identity(b.n)));
            Block {
                n: b.n,
                f0: b.f0.clone(),
                fk,
            }
        })
        .collect();
    aux.push(Block {
        n: 1,
        f0: Matrix::from_diag(&[1.0]),
        fk: vec![(t, Matrix::from_diag(&[1.0]))],
    });
    let mut c = vec![0.0; m + 1];
    c[t] = 1.0;
    let phase1 = ipm(&aux, &c, cfg)?;
    let mut sol = run.solution;
    if phase1.solution.status == SdpStatus::Optimal && phase1.solution.x[t] > cfg.lmi_residual_tol {
        // The phase-1 dual restricted to the original blocks is a Farkas certificate.
        let zs = &phase1.z[..blocks.len()];
        let trz: f64 = zs.iter().map(Matrix::trace).sum();
        let mut az = vec![0.0; m];
        for (b, zj) in blocks.iter().zip(zs) {
            for (k, f) in &b.fk {
                az[*k] += f.dot(zj);
            }
        }
        let num = az.iter().map(|v| v * v).sum::<f64>().sqrt() / trz;
        let den = -blocks
            .iter()
            .zip(zs)
            .map(|(b, zj)| b.f0.dot(zj))
            .sum::<f64>()
            / trz;
        sol.status = SdpStatus::Infeasible;
        sol.infeasibility_measure = Some(if den > 0.0 { num / den } else { f64::INFINITY });
    }
    Ok(sol)
}

struct IpmRun {
    solution: SdpSolution,
    z: Vec<Matrix>,
}

fn ipm(blocks: &[Block], c: &[f64], cfg: &NumericsConfig) -> Result<IpmRun> {
    let m = c.len();
    let total_dim: usize = blocks.iter().map(|b| b.n).sum();
    let norm_c = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let norm_f0 = blocks.iter().map(|b| b.f0.dot(&b.f0)).sum::<f64>().sqrt();

    // Starting point scaled to the data.
    let mut x = vec![0.0; m];
    let mut s: Vec<Matrix> = Vec::with_capacity(blocks.len());
    let mut z: Vec<Matrix> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let nf = b.n as f64;
        let fmax =
            b.fk.iter()
                .map(|(_, f)| f.frobenius_norm())
                .fold(b.f0.frobenius_norm(), f64::max);
        let eta = 10f64.max(nf.sqrt()).max(fmax);
        let zeta =
            b.fk.iter()
                .map(|(k, f)| nf * (1.0 + c[*k].abs()) / (1.0 + f.frobenius_norm()))
                .fold(10f64.max(nf.sqrt()), f64::max);
        s.push(Matrix::identity(b.n).scale(eta));
        z.push(Matrix::identity(b.n).scale(zeta));
    }

    let mut best: Option<(f64, SdpSolution, Vec<Matrix>)> = None;
    let mut best_iter = 0;
    for iter in 0..cfg.sdp_max_iterations.max(1) {
        // Residuals and objectives.
        let rd: Vec<Matrix> = blocks
            .iter()
            .zip(&s)
            .map(|(b, s)| &b.eval(&x) - s)
            .collect();
        let mut az = vec![0.0; m];
        for (b, zj) in blocks.iter().zip(&z) {
            for (k, f) in &b.fk {
                az[*k] += f.dot(zj);
            }
        }
        let rp: Vec<f64> = (0..m).map(|k| c[k] - az[k]).collect();
        let sz: f64 = s.iter().zip(&z).map(|(a, b)| a.dot(b)).sum();
        let mu = sz / total_dim as f64;
        let pobj: f64 = c.iter().zip(&x).map(|(a, b)| a * b).sum();
        let dobj: f64 = -blocks
            .iter()
            .zip(&z)
            .map(|(b, zj)| b.f0.dot(zj))
            .sum::<f64>();
        let pres = rd.iter().map(|r| r.dot(r)).sum::<f64>().sqrt() / (1.0 + norm_f0);
        let dres = rp.iter().map(|v| v * v).sum::<f64>().sqrt() / (1.0 + norm_c);
        let gap = sz.max((pobj - dobj).abs());
        let rel_gap = gap / (1.0 + pobj.abs() + dobj.abs());
        let snapshot = |status, measure| SdpSolution {
            status,
            x: x.clone(),
            objective: pobj,
            dual_objective: dobj,
            iterations: iter,
            rel_gap,
            primal_residual: pres,
            dual_residual: dres,
            infeasibility_measure: measure,
        };
        log::trace!("sdp iter {iter}: pobj {pobj:.6e} dobj {dobj:.6e} gap {rel_gap:.2e} pres {pres:.2e} dres {dres:.2e}");
        if rel_gap <= cfg.sdp_gap_tol && pres <= cfg.sdp_feas_tol && dres <= cfg.sdp_feas_tol {
            return Ok(IpmRun {
                solution: snapshot(SdpStatus::Optimal, None),
                z,
            });
        }
        // Farkas test on the trace-normalized dual iterate.
        let trz: f64 = z.iter().map(Matrix::trace).sum();
        if trz > 0.0 && dobj > 0.0 {
            let ratio = az.iter().map(|v| v * v).sum::<f64>().sqrt() / dobj;
            if ratio <= cfg.sdp_infeas_tol {
                return Ok(IpmRun {
                    solution: snapshot(SdpStatus::Infeasible, Some(ratio)),
                    z,
                });
            }
        }
        let merit = rel_gap.max(pres).max(dres);
        if best.as_ref().map_or(true, |b| merit < b.0) {
            best = Some((merit, snapshot(SdpStatus::MaxIterations, None), z.clone()));
            best_iter = iter;
        } else if iter - best_iter >= STALL_ITERATIONS {
            break;
        }
        let blown_up = x.iter().map(|v| v.abs()).fold(0.0, f64::max) > BLOWUP || trz > BLOWUP;
        if blown_up {
            break;
        }

        // Schur complement system. A numerical failure here ends the run and
        // leaves the status to the best iterate seen so far.
        let step = || -> Result<(Direction, f64, f64)> {
            let scal: Vec<Scaling> = s
                .iter()
                .zip(&z)
                .map(|(s, z)| nt_scaling(s, z))
                .collect::<Result<_>>()?;
            let mut schur = Matrix::zeros(m, m);
            for (b, sc) in blocks.iter().zip(&scal) {
                let g: Vec<Matrix> = b.fk.iter().map(|(_, f)| &(&sc.w * f) * &sc.w).collect();
                for (a, (k, fk)) in b.fk.iter().enumerate() {
                    for (l, gl) in b.fk.iter().map(|t| t.0).zip(&g).skip(a) {
                        let v = fk.dot(gl);
                        schur[(*k, l)] += v;
                        if l != *k {
                            schur[(l, *k)] += v;
                        }
                    }
                }
            }
            let schur = sym(&schur);
            let chol = cholesky(&schur, 0.0).or_else(|_| {
                let d = (0..m).map(|i| schur[(i, i)].abs()).fold(0.0, f64::max);
                cholesky(&schur, 1e-13 * d.max(1.0))
            });

            let direction = |sigma_mu: f64| -> Result<Direction> {
                // ΔZ = σμS⁻¹ − Z − WΔSW with ΔS = Σ Δxₖ Fₖ + R_d.
                let centered: Vec<Matrix> = scal
                    .iter()
                    .zip(&z)
                    .map(|(sc, zj)| &sc.s_inv.scale(sigma_mu) - zj)
                    .collect();
                let mut rhs: Vec<f64> = rp.iter().map(|v| -v).collect();
                for ((b, sc), (t, r)) in blocks.iter().zip(&scal).zip(centered.iter().zip(&rd)) {
                    let target = t - &(&(&sc.w * r) * &sc.w);
                    for (k, f) in &b.fk {
                        rhs[*k] += f.dot(&target);
                    }
                }
                let dx = match &chol {
                    Ok(l) => cholesky_solve(l, &rhs),
                    Err(_) => solve_vec(schur.as_matrix(), &rhs)?,
                };
                let mut ds = Vec::with_capacity(blocks.len());
                let mut dz = Vec::with_capacity(blocks.len());
                for ((b, sc), (t, r)) in blocks.iter().zip(&scal).zip(centered.iter().zip(&rd)) {
                    let dsj = (&b.linear(&dx) + r).symmetric_part();
                    dz.push((t - &(&(&sc.w * &dsj) * &sc.w)).symmetric_part());
                    ds.push(dsj);
                }
                Ok(Direction { dx, ds, dz })
            };
            let steps = |d: &Direction| -> Result<(f64, f64)> {
                let mut ap = f64::INFINITY;
                let mut ad = f64::INFINITY;
                for j in 0..blocks.len() {
                    ap = ap.min(max_step(&s[j], &d.ds[j])?);
                    ad = ad.min(max_step(&z[j], &d.dz[j])?);
                }
                Ok((ap, ad))
            };

            // Predictor.
            let aff = direction(0.0)?;
            let (ap, ad) = steps(&aff)?;
            let (ap, ad) = (ap.min(1.0), ad.min(1.0));
            let mut sz_aff = 0.0;
            for j in 0..blocks.len() {
                let sj = &s[j] + &aff.ds[j].scale(ap);
                let zj = &z[j] + &aff.dz[j].scale(ad);
                sz_aff += sj.dot(&zj);
            }
            let mu_aff = sz_aff / total_dim as f64;
            let sigma = if mu > 0.0 {
                (mu_aff / mu).clamp(0.0, 1.0).powi(3)
            } else {
                0.0
            };

            // Corrector (centering only).
            let d = direction(sigma * mu)?;
            let (ap, ad) = steps(&d)?;
            let ap = (cfg.sdp_step_fraction * ap).min(1.0);
            let ad = (cfg.sdp_step_fraction * ad).min(1.0);
            Ok((d, ap, ad))
        };
        let (d, ap, ad) = match step() {
            Ok(v) => v,
            Err(e) => {
                log::debug!("sdp iteration {iter} stopped: {e}");
                break;
            }
        };
        for k in 0..m {
            x[k] += ap * d.dx[k];
        }
        for j in 0..blocks.len() {
            s[j] = (&s[j] + &d.ds[j].scale(ap)).symmetric_part();
            z[j] = (&z[j] + &d.dz[j].scale(ad)).symmetric_part();
        }
        if x.iter().any(|v| !v.is_finite()) || s.iter().chain(&z).any(|m| !m.is_finite()) {
            break;
        }
    }
    let (merit, mut sol, z) = best.expect("at least one iteration");
    if merit <= cfg.sdp_accept_tol {
        sol.status = SdpStatus::Optimal;
    }
    Ok(IpmRun { solution: sol, z })
}

/// Iterations without improvement of the best merit before giving up.
const STALL_ITERATIONS: usize = 10;
/// Iterate magnitude treated as divergence.
const BLOWUP: f64 = 1e12;
