//! Lipschitz-constant estimates of a learned nonlinearity over a box.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{frobenius_norm, norm2, spectral_norm, Matrix};
use crate::rng::Rng;
use crate::system::BasisExpansion;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// `[−r, r]^n`.
    pub fn symmetric(r: f64, n: usize) -> Result<Self> {
        Self::new(vec![-r; n], vec![r; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() != self.upper.len() {
            return invalid("box bounds must be non-empty and of equal length");
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l < u && l.is_finite() && u.is_finite())) {
            return invalid("box needs finite bounds with lower < upper");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Node `index` of the grid with `cells` intervals per axis, in
    /// row-major order over `(cells + 1)^dim` nodes. Corners are nodes.
    fn grid_node(&self, cells: usize, mut index: usize) -> Vec<f64> {
        let mut q = vec![0.0; self.dim()];
        for d in (0..self.dim()).rev() {
            let k = index % (cells + 1);
            index /= cells + 1;
            q[d] = if k == cells {
                self.upper[d]
            } else {
                self.lower[d] + (self.upper[d] - self.lower[d]) * k as f64 / cells as f64
            };
        }
        q
    }

    fn grid_len(&self, cells: usize) -> Option<usize> {
        (cells + 1).checked_pow(self.dim() as u32)
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(&l, &u)| rng.gen_range(l..u)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianNorm {
    #[default]
    Spectral,
    /// Cheaper upper bound on the spectral norm.
    Frobenius,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    /// Intervals per axis; the grid has `(cells + 1)^{n_q}` nodes, so
    /// doubling `cells` refines the previous grid.
    pub cells: usize,
    pub safety_factor: f64,
    pub norm: JacobianNorm,
}

impl Default for GridOptions {
    fn default() -> Self {
        Self { cells: 200, safety_factor: 1.05, norm: JacobianNorm::Spectral }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEstimate {
    /// Inflated bound.
    pub value: f64,
    /// Largest gradient norm found on the grid, before inflation and before
    /// the coefficient-norm factor (for the product bound).
    pub grid_max: f64,
    pub argmax: Vec<f64>,
    pub coefficient_norm: f64,
}

fn matrix_norm(m: &Matrix, kind: JacobianNorm) -> Result<f64> {
    match kind {
        JacobianNorm::Spectral => spectral_norm(m),
        JacobianNorm::Frobenius => Ok(frobenius_norm(m)),
    }
}

fn grid_max<F>(domain: &BoxDomain, opts: &GridOptions, f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    domain.validate()?;
    if opts.cells < 1 {
        return invalid("grid needs at least one cell per axis");
    }
    if !(opts.safety_factor >= 1.0) {
        return invalid("safety factor must be at least 1");
    }
    let n = domain.grid_len(opts.cells).filter(|&n| n <= 100_000_000).ok_or_else(|| {
        crate::Error::InvalidInput(format!("grid with {} cells per axis in {} dimensions is too large", opts.cells, domain.dim()))
    })?;
    let vals: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| f(&domain.grid_node(opts.cells, i)))
        .collect::<Result<_>>()?;
    // Sequential reduction keeps the argmax independent of the thread count.
    let mut best = 0;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    Ok((vals[best], domain.grid_node(opts.cells, best)))
}

/// `‖p‖ · max_q ‖∇_q ψ(q)‖`, the maximum taken over the grid and inflated by
/// the safety factor. `‖p‖` is the Euclidean norm of all coefficients.
pub fn analytic_lipschitz_bound(expansion: &BasisExpansion, domain: &BoxDomain, opts: &GridOptions) -> Result<GridEstimate> {
    check_dims(expansion, domain)?;
    let (m, arg) = grid_max(domain, opts, |q| matrix_norm(&expansion.eval_basis_gradient(q)?, opts.norm))?;
    let pn = norm2(&expansion.coefficients);
    Ok(GridEstimate { value: pn * m * opts.safety_factor, grid_max: m, argmax: arg, coefficient_norm: pn })
}

/// `max_q ‖∇_q φ̂(q)‖` of the expansion itself over the grid, inflated. Never
/// larger than [`analytic_lipschitz_bound`] on the same grid.
pub fn jacobian_lipschitz_bound(expansion: &BasisExpansion, domain: &BoxDomain, opts: &GridOptions) -> Result<GridEstimate> {
    check_dims(expansion, domain)?;
    let (m, arg) = grid_max(domain, opts, |q| matrix_norm(&expansion.jacobian(q)?, opts.norm))?;
    Ok(GridEstimate {
        value: m * opts.safety_factor,
        grid_max: m,
        argmax: arg,
        coefficient_norm: norm2(&expansion.coefficients),
    })
}

fn check_dims(expansion: &BasisExpansion, domain: &BoxDomain) -> Result<()> {
    if domain.dim() != expansion.n_q {
        return invalid(format!("box has dimension {}, the expansion takes {} arguments", domain.dim(), expansion.n_q));
    }
    Ok(())
}

/// Largest slope `‖f(q) − f(q′)‖ / ‖q − q′‖` over `n_pairs` uniform pairs,
/// times `inflation`. Pairs with `q = q′` are skipped.
pub fn sampled_lipschitz_estimate<F>(f: F, domain: &BoxDomain, n_pairs: usize, inflation: f64, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    domain.validate()?;
    if n_pairs == 0 {
        return invalid("at least one pair is required");
    }
    if !(inflation >= 1.0) || !inflation.is_finite() {
        return invalid("inflation must be a finite number ≥ 1");
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..n_pairs).map(|_| (domain.sample(rng), domain.sample(rng))).collect();
    let slopes: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|(a, b)| {
            let dq = norm2(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
            if dq == 0.0 {
                return None;
            }
            let (fa, fb) = (f(a), f(b));
            Some(norm2(&fa.iter().zip(&fb).map(|(x, y)| x - y).collect::<Vec<_>>()) / dq)
        })
        .collect();
    let max = slopes.into_iter().flatten().fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))));
    match max {
        Some(m) => Ok(m * inflation),
        None => invalid("every sampled pair was degenerate"),
    }
}
