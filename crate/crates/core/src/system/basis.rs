use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm2, Matrix};

/// `coef · ∏ qᵢ^{exps[i]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coef: f64,
    pub exps: Vec<u32>,
}

impl Monomial {
    pub fn new(coef: f64, exps: &[u32]) -> Self {
        Self {
            coef,
            exps: exps.to_vec(),
        }
    }

    fn eval(&self, q: &[f64]) -> f64 {
        self.exps
            .iter()
            .zip(q)
            .fold(self.coef, |acc, (&e, &v)| acc * v.powi(e as i32))
    }

    fn partial(&self, q: &[f64], d: usize) -> f64 {
        let e = self.exps[d];
        if e == 0 {
            return 0.0;
        }
        let mut acc = self.coef * e as f64;
        for (i, (&ei, &v)) in self.exps.iter().zip(q).enumerate() {
            let p = if i == d { ei - 1 } else { ei };
            acc *= v.powi(p as i32);
        }
        acc
    }
}

/// One scalar basis function `ψᵢ : ℝ^{n_q} → ℝ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisTerm {
    Polynomial {
        monomials: Vec<Monomial>,
    },
    /// `tanh(wᵀq + b)`
    Tanh {
        w: Vec<f64>,
        b: f64,
    },
    /// `max(0, wᵀq + b)`; not differentiable.
    Relu {
        w: Vec<f64>,
        b: f64,
    },
}

impl BasisTerm {
    pub fn polynomial(monomials: Vec<Monomial>) -> Self {
        BasisTerm::Polynomial { monomials }
    }

    /// `q_d` alone.
    pub fn coordinate(n_q: usize, d: usize) -> Self {
        let mut exps = vec![0; n_q];
        exps[d] = 1;
        BasisTerm::polynomial(vec![Monomial { coef: 1.0, exps }])
    }

    fn consistent(&self, n_q: usize) -> bool {
        match self {
            BasisTerm::Polynomial { monomials } => monomials
                .iter()
                .all(|m| m.exps.len() == n_q && m.coef.is_finite()),
            BasisTerm::Tanh { w, b } | BasisTerm::Relu { w, b } => {
                w.len() == n_q && b.is_finite() && w.iter().all(|v| v.is_finite())
            }
        }
    }

    pub fn eval(&self, q: &[f64]) -> f64 {
        match self {
            BasisTerm::Polynomial { monomials } => monomials.iter().map(|m| m.eval(q)).sum(),
            BasisTerm::Tanh { w, b } => (affine(w, *b, q)).tanh(),
            BasisTerm::Relu { w, b } => affine(w, *b, q).max(0.0),
        }
    }

    pub fn gradient(&self, q: &[f64]) -> Result<Vec<f64>> {
        match self {
            BasisTerm::Polynomial { monomials } => Ok((0..q.len())
                .map(|d| monomials.iter().map(|m| m.partial(q, d)).sum())
                .collect()),
            BasisTerm::Tanh { w, b } => {
                let t = affine(w, *b, q).tanh();
                Ok(w.iter().map(|wi| wi * (1.0 - t * t)).collect())
            }
            BasisTerm::Relu { .. } => Err(Error::Unsupported(
                "relu basis terms have no gradient".into(),
            )),
        }
    }
}

fn affine(w: &[f64], b: f64, q: &[f64]) -> f64 {
    w.iter().zip(q).map(|(a, v)| a * v).sum::<f64>() + b
}

/// `φ̂(q) = B_φ · Pᵀ ψ(q)`: each active state row `r` receives
/// `Σᵢ p[r, i] ψᵢ(q)` where the coefficient block of row `r` is contiguous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisExpansion {
    pub terms: Vec<BasisTerm>,
    pub n_q: usize,
    pub n_x: usize,
    /// State rows affected by the expansion (0-based, increasing).
    pub active_rows: Vec<usize>,
    /// `n_p · active_rows.len()` coefficients, one block of `n_p` per active row.
    pub coefficients: Vec<f64>,
    /// Bound `p̄` on `‖p‖`.
    pub bound: f64,
    /// Common factor multiplying every `ψᵢ`.
    pub scale: f64,
}

impl BasisExpansion {
    /// Validates shapes and `‖p‖ ≤ bound`.
    pub fn new(
        terms: Vec<BasisTerm>,
        n_q: usize,
        n_x: usize,
        active_rows: Vec<usize>,
        coefficients: Vec<f64>,
        bound: f64,
        scale: f64,
    ) -> Result<Self> {
        let e = Self {
            terms,
            n_q,
            n_x,
            active_rows,
            coefficients,
            bound,
            scale,
        };
        e.validate()?;
        if norm2(&e.coefficients) > e.bound * (1.0 + 1e-12) {
            return invalid(format!(
                "‖p‖ = {} exceeds the bound {}",
                norm2(&e.coefficients),
                e.bound
            ));
        }
        Ok(e)
    }

    /// Shape checks only; the coefficient bound is not enforced.
    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() || self.n_q == 0 || self.n_x == 0 {
            return invalid("basis expansion needs at least one term, n_q ≥ 1 and n_x ≥ 1");
        }
        if let Some(t) = self.terms.iter().find(|t| !t.consistent(self.n_q)) {
            return invalid(format!(
                "basis term {t:?} does not take {} arguments",
                self.n_q
            ));
        }
        if self.active_rows.is_empty() || self.active_rows.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("active rows must be non-empty and strictly increasing");
        }
        if self.active_rows.iter().any(|&r| r >= self.n_x) {
            return invalid("active row outside the state dimension");
        }
        if self.coefficients.len() != self.num_coefficients() {
            return invalid(format!(
                "expected {} coefficients, got {}",
                self.num_coefficients(),
                self.coefficients.len()
            ));
        }
        if !(self.bound > 0.0)
            || !self.scale.is_finite()
            || self.coefficients.iter().any(|v| !v.is_finite())
        {
            return invalid("bound must be positive and coefficients/scale finite");
        }
        Ok(())
    }

    /// Number of basis functions `n_p`.
    pub fn n_p(&self) -> usize {
        self.terms.len()
    }

    /// Length of the searched coefficient vector.
    pub fn num_coefficients(&self) -> usize {
        self.n_p() * self.active_rows.len()
    }

    /// Same basis with different coefficients, bound not enforced (candidate
    /// points of a learning box may leave the ball).
    pub fn with_coefficients(&self, p: &[f64]) -> Result<Self> {
        let mut e = self.clone();
        e.coefficients = p.to_vec();
        e.validate()?;
        Ok(e)
    }

    /// `n_x × n_active` 0/1 matrix selecting the affected states.
    pub fn selection_matrix(&self) -> Matrix {
        let mut b = Matrix::zeros(self.n_x, self.active_rows.len());
        for (j, &r) in self.active_rows.iter().enumerate() {
            b[(r, j)] = 1.0;
        }
        b
    }

    /// `ψ(q)` including the scale factor.
    pub fn eval_basis(&self, q: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| self.scale * t.eval(q)).collect()
    }

    /// `∂ψ/∂q`, `n_p × n_q`.
    pub fn eval_basis_gradient(&self, q: &[f64]) -> Result<Matrix> {
        let mut j = Matrix::zeros(self.n_p(), self.n_q);
        for (i, t) in self.terms.iter().enumerate() {
            for (d, g) in t.gradient(q)?.into_iter().enumerate() {
                j[(i, d)] = self.scale * g;
            }
        }
        Ok(j)
    }

    /// `φ̂(q)` as an `n_x` vector.
    pub fn eval(&self, q: &[f64]) -> Vec<f64> {
        let psi = self.eval_basis(q);
        let n_p = self.n_p();
        let mut out = vec![0.0; self.n_x];
        for (j, &r) in self.active_rows.iter().enumerate() {
            out[r] = self.coefficients[j * n_p..(j + 1) * n_p]
                .iter()
                .zip(&psi)
                .map(|(a, b)| a * b)
                .sum();
        }
        out
    }

    /// `∂φ̂/∂q`, `n_x × n_q`.
    pub fn jacobian(&self, q: &[f64]) -> Result<Matrix> {
        let g = self.eval_basis_gradient(q)?;
        let n_p = self.n_p();
        let mut out = Matrix::zeros(self.n_x, self.n_q);
        for (j, &r) in self.active_rows.iter().enumerate() {
            for d in 0..self.n_q {
                out[(r, d)] = (0..n_p)
                    .map(|i| self.coefficients[j * n_p + i] * g[(i, d)])
                    .sum();
            }
        }
        Ok(out)
    }
}

/// The five tensor-Legendre terms of the Van der Pol example, unscaled:
/// `(3q₁²−1)(3q₂²−1)`, `(3q₁²−1)q₂`, `q₁(3q₂²−1)`, `5q₁³−3q₁`, `5q₂³−3q₂`.
pub fn van_der_pol_basis_terms() -> Vec<BasisTerm> {
    let m = Monomial::new;
    vec![
        BasisTerm::polynomial(vec![
            m(9.0, &[2, 2]),
            m(-3.0, &[2, 0]),
            m(-3.0, &[0, 2]),
            m(1.0, &[0, 0]),
        ]),
        BasisTerm::polynomial(vec![m(3.0, &[2, 1]), m(-1.0, &[0, 1])]),
        BasisTerm::polynomial(vec![m(3.0, &[1, 2]), m(-1.0, &[1, 0])]),
        BasisTerm::polynomial(vec![m(5.0, &[3, 0]), m(-3.0, &[1, 0])]),
        BasisTerm::polynomial(vec![m(5.0, &[0, 3]), m(-3.0, &[0, 1])]),
    ]
}
