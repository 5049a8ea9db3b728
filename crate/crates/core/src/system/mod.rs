//! Discrete-time plant `x⁺ = Ax + Bu + φ(C_q x)`, `y = Cx`, the
//! Luenberger-type observer with a basis-expansion model of `φ`, and the
//! output-residual reward used for learning.

mod basis;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use basis::{van_der_pol_basis_terms, BasisExpansion, BasisTerm, Monomial};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm2, rank, Matrix};

/// Ground-truth nonlinearity, used only to simulate the plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Nonlinearity {
    Zero,
    /// `φ(q) = (0, −τ q₁² q₂)`.
    VanDerPol {
        tau: f64,
    },
    /// `φ(q) = B · ∏ qᵢ^{eᵢ}`: the nonlinearity enters through the input matrix.
    InputMonomial {
        exps: Vec<u32>,
    },
    Expansion(BasisExpansion),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    pub cq: Matrix,
    pub true_phi: Option<Nonlinearity>,
    /// Bound `φ̄` on the nonlinearity; only used for reporting `δ₁`.
    pub phi_bound: f64,
}

impl SystemModel {
    pub fn new(
        a: Matrix,
        b: Matrix,
        c: Matrix,
        cq: Matrix,
        true_phi: Option<Nonlinearity>,
        phi_bound: f64,
    ) -> Result<Self> {
        let s = Self {
            a,
            b,
            c,
            cq,
            true_phi,
            phi_bound,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_x();
        if n == 0 || !self.a.is_square() {
            return invalid("A must be square and non-empty");
        }
        if self.b.rows() != n || self.c.cols() != n || self.cq.cols() != n {
            return invalid(format!(
                "dimension mismatch: A {:?}, B {:?}, C {:?}, C_q {:?}",
                self.a.shape(),
                self.b.shape(),
                self.c.shape(),
                self.cq.shape()
            ));
        }
        if ![&self.a, &self.b, &self.c, &self.cq]
            .iter()
            .all(|m| m.is_finite())
        {
            return invalid("system matrices must be finite");
        }
        if !(self.phi_bound > 0.0 && self.phi_bound.is_finite()) {
            return invalid("phi_bound must be positive");
        }
        match &self.true_phi {
            Some(Nonlinearity::Expansion(e)) => {
                e.validate()?;
                if e.n_x != n || e.n_q != self.n_q() {
                    return invalid("true_phi expansion does not match the system dimensions");
                }
            }
            Some(Nonlinearity::VanDerPol { .. }) if n != 2 || self.n_q() != 2 => {
                return invalid("Van der Pol nonlinearity needs n_x = n_q = 2");
            }
            Some(Nonlinearity::InputMonomial { exps })
                if exps.len() != self.n_q() || self.n_u() != 1 =>
            {
                return invalid("input monomial needs n_u = 1 and one exponent per q component");
            }
            _ => {}
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        self.a.rows()
    }

    pub fn n_u(&self) -> usize {
        self.b.cols()
    }

    pub fn n_y(&self) -> usize {
        self.c.rows()
    }

    pub fn n_q(&self) -> usize {
        self.cq.rows()
    }

    /// `[C; CA; …; CA^{n−1}]`.
    pub fn observability_matrix(&self) -> Matrix {
        let n = self.n_x();
        let mut rows = Vec::with_capacity(n * self.n_y());
        let mut cak = self.c.clone();
        for _ in 0..n {
            rows.extend(cak.to_rows());
            cak = &cak * &self.a;
        }
        Matrix::from_rows(&rows).expect("consistent rows")
    }

    pub fn observability_rank(&self) -> usize {
        rank(&self.observability_matrix(), 1e-10)
    }

    pub fn is_observable(&self) -> bool {
        self.observability_rank() == self.n_x()
    }

    /// Ground-truth `φ(q)`.
    pub fn phi(&self, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_x();
        Ok(match &self.true_phi {
            None => {
                return Err(Error::Precondition(
                    "plant simulation needs true_phi".into(),
                ))
            }
            Some(Nonlinearity::Zero) => vec![0.0; n],
            Some(Nonlinearity::VanDerPol { tau }) => vec![0.0, -tau * q[0] * q[0] * q[1]],
            Some(Nonlinearity::InputMonomial { exps }) => {
                let m: f64 = exps
                    .iter()
                    .zip(q)
                    .map(|(&e, &v)| v.powi(e as i32))
                    .product();
                self.b.col_vec(0).iter().map(|b| b * m).collect()
            }
            Some(Nonlinearity::Expansion(e)) => e.eval(q),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverConfig {
    pub gain: Matrix,
    pub expansion: BasisExpansion,
    pub x0_hat: Vec<f64>,
}

impl ObserverConfig {
    fn validate(&self, sys: &SystemModel) -> Result<()> {
        if self.gain.shape() != (sys.n_x(), sys.n_y()) {
            return invalid(format!("gain must be {}×{}", sys.n_x(), sys.n_y()));
        }
        if self.x0_hat.len() != sys.n_x() {
            return invalid("initial estimate has the wrong dimension");
        }
        self.expansion.validate()?;
        if self.expansion.n_x != sys.n_x() || self.expansion.n_q != sys.n_q() {
            return invalid("expansion does not match the system dimensions");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSeries {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub tau: f64,
    pub x: Vec<Vec<f64>>,
    pub x_hat: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub u: Vec<Vec<f64>>,
    pub err_norm: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// `Cx̂_t` for every step.
    pub fn y_hat(&self, sys: &SystemModel) -> Vec<Vec<f64>> {
        self.x_hat.iter().map(|xh| sys.c.matvec(xh)).collect()
    }

    /// `Σ_{t ≥ from} ‖Cx̂_t − y_t‖²`.
    pub fn output_error_energy(&self, sys: &SystemModel, from: usize) -> f64 {
        output_error_energy(&self.y, &self.y_hat(sys), from)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.x.first().map_or(0, Vec::len);
        let m = self.y.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("xhat{i}")));
        header.extend((1..=m).map(|i| format!("y{i}")));
        header.push("errnorm".into());
        writeln!(w, "{}", header.join(","))?;
        for t in 0..self.len() {
            let mut row = vec![format!("{}", t as f64 * self.tau)];
            row.extend(self.x[t].iter().map(|v| format!("{v:e}")));
            row.extend(self.x_hat[t].iter().map(|v| format!("{v:e}")));
            row.extend(self.y[t].iter().map(|v| format!("{v:e}")));
            row.push(format!("{:e}", self.err_norm[t]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub fn output_error_energy(y: &[Vec<f64>], y_hat: &[Vec<f64>], from: usize) -> f64 {
    y.iter()
        .zip(y_hat)
        .skip(from)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (v - u) * (v - u)).sum::<f64>())
        .sum()
}

fn guard(step: usize, v: &[f64], limit: f64) -> Result<()> {
    let n = norm2(v);
    if !(n <= limit) {
        return Err(Error::Divergence { step, norm: n });
    }
    Ok(())
}

fn input_at(u_seq: &[Vec<f64>], t: usize, n_u: usize) -> Vec<f64> {
    u_seq.get(t).cloned().unwrap_or_else(|| vec![0.0; n_u])
}

fn check_inputs(u_seq: &[Vec<f64>], n_u: usize) -> Result<()> {
    if u_seq.iter().any(|u| u.len() != n_u) {
        return invalid(format!("every input must have length {n_u}"));
    }
    Ok(())
}

/// `T` samples `x_0 … x_{T−1}`; missing inputs are zero.
pub fn simulate_plant(
    sys: &SystemModel,
    x0: &[f64],
    u_seq: &[Vec<f64>],
    steps: usize,
    divergence_guard: f64,
) -> Result<PlantSeries> {
    if steps == 0 {
        return invalid("simulation needs T ≥ 1");
    }
    if x0.len() != sys.n_x() {
        return invalid("x0 has the wrong dimension");
    }
    check_inputs(u_seq, sys.n_u())?;
    let mut x = Vec::with_capacity(steps);
    let mut y = Vec::with_capacity(steps);
    let mut u = Vec::with_capacity(steps);
    let mut xt = x0.to_vec();
    guard(0, &xt, divergence_guard)?;
    for t in 0..steps {
        let ut = input_at(u_seq, t, sys.n_u());
        y.push(sys.c.matvec(&xt));
        let next = if t + 1 < steps {
            let phi = sys.phi(&sys.cq.matvec(&xt))?;
            let ax = sys.a.matvec(&xt);
            let bu = sys.b.matvec(&ut);
            let nx: Vec<f64> = (0..sys.n_x()).map(|i| ax[i] + bu[i] + phi[i]).collect();
            guard(t + 1, &nx, divergence_guard)?;
            Some(nx)
        } else {
            None
        };
        x.push(std::mem::take(&mut xt));
        u.push(ut);
        if let Some(nx) = next {
            xt = nx;
        }
    }
    Ok(PlantSeries { x, y, u })
}

/// Estimates `x̂_0 … x̂_{T−1}` driven by the measured outputs.
pub fn run_observer(
    sys: &SystemModel,
    obs: &ObserverConfig,
    y_seq: &[Vec<f64>],
    u_seq: &[Vec<f64>],
    divergence_guard: f64,
) -> Result<Vec<Vec<f64>>> {
    obs.validate(sys)?;
    check_inputs(u_seq, sys.n_u())?;
    if y_seq.is_empty() || y_seq.iter().any(|y| y.len() != sys.n_y()) {
        return invalid(format!(
            "outputs must be a non-empty series of length-{} vectors",
            sys.n_y()
        ));
    }
    if !u_seq.is_empty() && u_seq.len() < y_seq.len() {
        return invalid("input series shorter than the output series");
    }
    let steps = y_seq.len();
    let mut out = Vec::with_capacity(steps);
    let mut xh = obs.x0_hat.clone();
    guard(0, &xh, divergence_guard)?;
    for t in 0..steps {
        if t + 1 < steps {
            let ut = input_at(u_seq, t, sys.n_u());
            let phi = obs.expansion.eval(&sys.cq.matvec(&xh));
            let ax = sys.a.matvec(&xh);
            let bu = sys.b.matvec(&ut);
            let cx = sys.c.matvec(&xh);
            let innov: Vec<f64> = cx.iter().zip(&y_seq[t]).map(|(a, b)| a - b).collect();
            let li = obs.gain.matvec(&innov);
            let nx: Vec<f64> = (0..sys.n_x())
                .map(|i| ax[i] + bu[i] + phi[i] + li[i])
                .collect();
            guard(t + 1, &nx, divergence_guard)?;
            out.push(std::mem::replace(&mut xh, nx));
        } else {
            out.push(std::mem::take(&mut xh));
        }
    }
    Ok(out)
}

/// Plant and observer over the same horizon.
pub fn simulate_closed_loop(
    sys: &SystemModel,
    obs: &ObserverConfig,
    x0: &[f64],
    u_seq: &[Vec<f64>],
    steps: usize,
    tau: f64,
    divergence_guard: f64,
) -> Result<Trajectory> {
    let plant = simulate_plant(sys, x0, u_seq, steps, divergence_guard)?;
    let x_hat = run_observer(sys, obs, &plant.y, &plant.u, divergence_guard)?;
    let err_norm = plant
        .x
        .iter()
        .zip(&x_hat)
        .map(|(x, xh)| norm2(&x.iter().zip(xh).map(|(a, b)| b - a).collect::<Vec<_>>()))
        .collect();
    Ok(Trajectory {
        tau,
        x: plant.x,
        x_hat,
        y: plant.y,
        u: plant.u,
        err_norm,
    })
}

/// Reward weights and horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    /// `n_y × n_y`, positive definite.
    pub w1: Matrix,
    /// `n_p × n_p`, positive semidefinite.
    pub w2: Matrix,
    pub anchor: Vec<f64>,
    /// Horizon `T_ℓ` in steps.
    pub horizon: usize,
    /// First step counted in the output sum.
    pub t_star: usize,
}

fn quad(w: &Matrix, v: &[f64]) -> f64 {
    v.iter().zip(w.matvec(v)).map(|(a, b)| a * b).sum()
}

/// `−(Σ_{t=t⋆}^{T_ℓ−1} ‖ŷ_t − y_t‖²_{W₁} + ‖p − anchor‖²_{W₂} / T_ℓ)`.
pub fn compute_reward(
    y: &[Vec<f64>],
    y_hat: &[Vec<f64>],
    p: &[f64],
    spec: &RewardSpec,
) -> Result<f64> {
    let RewardSpec {
        w1,
        w2,
        anchor,
        horizon,
        t_star,
    } = spec;
    if *horizon == 0 || t_star >= horizon {
        return invalid("reward needs 0 ≤ t⋆ < T_ℓ");
    }
    if y.len() < *horizon || y_hat.len() < *horizon {
        return invalid(format!(
            "reward horizon {horizon} exceeds the series length"
        ));
    }
    let n_y = w1.rows();
    if !w1.is_square() || y.iter().chain(y_hat).any(|v| v.len() != n_y) {
        return invalid("W₁ does not match the output dimension");
    }
    if !w2.is_square() || w2.rows() != p.len() || anchor.len() != p.len() {
        return invalid("W₂, anchor and p dimensions disagree");
    }
    let mut cost = 0.0;
    for t in *t_star..*horizon {
        let r: Vec<f64> = y_hat[t].iter().zip(&y[t]).map(|(a, b)| a - b).collect();
        cost += quad(w1, &r);
    }
    let dp: Vec<f64> = p.iter().zip(anchor).map(|(a, b)| a - b).collect();
    cost += quad(w2, &dp) / *horizon as f64;
    Ok(-cost)
}

/// How the Van der Pol cubic term reaches the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VdpEncoding {
    #[default]
    TruePhi,
    InputChannel,
}

/// Euler-discretized Van der Pol benchmark and its tensor-Legendre basis
/// (active on the second state, scale 10, zero coefficients).
pub fn van_der_pol_model(
    tau: f64,
    encoding: VdpEncoding,
    coefficient_bound: f64,
    phi_bound: f64,
) -> Result<(SystemModel, BasisExpansion)> {
    if !(tau > 0.0 && tau <= 0.1) {
        return invalid("τ must lie in (0, 0.1]");
    }
    let a = Matrix::from_rows(&[vec![1.0, tau], vec![tau, 1.0 - tau]])?;
    let b = Matrix::column(&[0.0, -tau]);
    let c = Matrix::row(&[1.0, 0.0]);
    let cq = Matrix::identity(2);
    let phi = match encoding {
        VdpEncoding::TruePhi => Nonlinearity::VanDerPol { tau },
        VdpEncoding::InputChannel => Nonlinearity::InputMonomial { exps: vec![2, 1] },
    };
    let sys = SystemModel::new(a, b, c, cq, Some(phi), phi_bound)?;
    let basis = BasisExpansion::new(
        van_der_pol_basis_terms(),
        2,
        2,
        vec![1],
        vec![0.0; 5],
        coefficient_bound,
        10.0,
    )?;
    Ok((sys, basis))
}
