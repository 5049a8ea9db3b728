//! Semidefinite programs in affine-LMI form.
//!
//! A problem has a flat vector of scalar unknowns `x`. Symmetric and
//! rectangular matrix unknowns are views onto slices of `x`. Constraints are
//! symmetric affine matrix expressions `F₀ + Σ xₖFₖ` required to be positive
//! or negative semidefinite, plus scalar affine inequalities. The objective is
//! linear.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{Matrix, SymMatrix};

/// Handle to one scalar unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalarVar(pub usize);

/// Symmetric `dim×dim` unknown stored as its upper triangle, row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymVar {
    pub offset: usize,
    pub dim: usize,
}

/// Dense `rows×cols` unknown stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatVar {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl SymVar {
    pub fn len(&self) -> usize {
        self.dim * (self.dim + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // entries before row i: sum_{r<i} (dim - r)
        self.offset + i * self.dim - (i * i - i) / 2 + (j - i)
    }
}

impl MatVar {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariableShape {
    Scalar,
    Symmetric { dim: usize },
    Matrix { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub offset: usize,
    pub shape: VariableShape,
}

/// `constant + Σ x[k]·coef_k` with matrix coefficients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineMatrix {
    pub rows: usize,
    pub cols: usize,
    pub constant: Matrix,
    /// Sparse in the variable index, sorted by index.
    pub terms: Vec<(usize, Matrix)>,
}

impl AffineMatrix {
    pub fn constant(m: Matrix) -> Self {
        Self {
            rows: m.rows(),
            cols: m.cols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::constant(Matrix::zeros(rows, cols))
    }

    /// `coef · x[v] · I_n`.
    pub fn scalar_identity(v: ScalarVar, coef: f64, n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            constant: Matrix::zeros(n, n),
            terms: vec![(v.0, Matrix::identity(n).scale(coef))],
        }
    }

    pub fn scalar(v: ScalarVar) -> Self {
        Self::scalar_identity(v, 1.0, 1)
    }

    pub fn sym(v: SymVar) -> Self {
        let n = v.dim;
        let mut terms = Vec::with_capacity(v.len());
        for i in 0..n {
            for j in i..n {
                let mut e = Matrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                terms.push((v.index(i, j), e));
            }
        }
        Self {
            rows: n,
            cols: n,
            constant: Matrix::zeros(n, n),
            terms,
        }
    }

    pub fn mat(v: MatVar) -> Self {
        let mut terms = Vec::with_capacity(v.len());
        for i in 0..v.rows {
            for j in 0..v.cols {
                let mut e = Matrix::zeros(v.rows, v.cols);
                e[(i, j)] = 1.0;
                terms.push((v.offset + i * v.cols + j, e));
            }
        }
        Self {
            rows: v.rows,
            cols: v.cols,
            constant: Matrix::zeros(v.rows, v.cols),
            terms,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn map(&self, rows: usize, cols: usize, f: impl Fn(&Matrix) -> Matrix) -> Self {
        Self {
            rows,
            cols,
            constant: f(&self.constant),
            terms: self.terms.iter().map(|(k, m)| (*k, f(m))).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        self.map(self.cols, self.rows, Matrix::transpose)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(self.rows, self.cols, |m| m.scale(s))
    }

    /// `a · self`.
    pub fn left_mul(&self, a: &Matrix) -> Result<Self> {
        if a.cols() != self.rows {
            return invalid(format!(
                "left_mul: {:?} times {:?}",
                a.shape(),
                self.shape()
            ));
        }
        Ok(self.map(a.rows(), self.cols, |m| a * m))
    }

    /// `self · b`.
    pub fn right_mul(&self, b: &Matrix) -> Result<Self> {
        if b.rows() != self.cols {
            return invalid(format!(
                "right_mul: {:?} times {:?}",
                self.shape(),
                b.shape()
            ));
        }
        Ok(self.map(self.rows, b.cols(), |m| m * b))
    }

    pub fn add(&self, other: &AffineMatrix) -> Result<Self> {
        self.combine(other, 1.0)
    }

    pub fn sub(&self, other: &AffineMatrix) -> Result<Self> {
        self.combine(other, -1.0)
    }

    pub fn add_constant(&self, c: &Matrix) -> Result<Self> {
        let mut out = self.clone();
        out.constant = out.constant.try_add(c)?;
        Ok(out)
    }

    fn combine(&self, other: &AffineMatrix, sign: f64) -> Result<Self> {
        if self.shape() != other.shape() {
            return invalid(format!(
                "affine shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        let mut acc: BTreeMap<usize, Matrix> = self.terms.iter().cloned().collect();
        for (k, m) in &other.terms {
            let m = m.scale(sign);
            acc.entry(*k).and_modify(|e| *e = &*e + &m).or_insert(m);
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            constant: &self.constant + &other.constant.scale(sign),
            terms: acc
                .into_iter()
                .filter(|(_, m)| m.max_abs() != 0.0)
                .collect(),
        })
    }

    /// Assemble from a grid of blocks; `None` is a zero block.
    pub fn blocks(grid: &[Vec<Option<AffineMatrix>>]) -> Result<Self> {
        let nr = grid.len();
        let nc = grid.first().map_or(0, Vec::len);
        let mut heights = vec![0usize; nr];
        let mut widths = vec![0usize; nc];
        for (i, row) in grid.iter().enumerate() {
            if row.len() != nc {
                return invalid("ragged affine block grid");
            }
            for (j, b) in row.iter().enumerate() {
                if let Some(b) = b {
                    heights[i] = b.rows;
                    widths[j] = b.cols;
                }
            }
        }
        let to_const = |f: &dyn Fn(&AffineMatrix) -> Option<Matrix>| -> Result<Matrix> {
            let g: Vec<Vec<Option<Matrix>>> = grid
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    row.iter()
                        .enumerate()
                        .map(|(j, b)| match b {
                            Some(b) => Some(f(b).unwrap_or_else(|| Matrix::zeros(b.rows, b.cols))),
                            None => Some(Matrix::zeros(heights[i], widths[j])),
                        })
                        .collect()
                })
                .collect();
            Matrix::from_blocks(&g)
        };
        let constant = to_const(&|b| Some(b.constant.clone()))?;
        let mut keys: Vec<usize> = grid
            .iter()
            .flatten()
            .flatten()
            .flat_map(|b| b.terms.iter().map(|t| t.0))
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut terms = Vec::with_capacity(keys.len());
        for k in keys {
            let m = to_const(&|b| b.terms.iter().find(|t| t.0 == k).map(|t| t.1.clone()))?;
            terms.push((k, m));
        }
        Ok(Self {
            rows: constant.rows(),
            cols: constant.cols(),
            constant,
            terms,
        })
    }

    /// Row-major `vec(·)` as a column.
    pub fn vectorize(&self) -> Self {
        let n = self.rows * self.cols;
        self.map(n, 1, |m| Matrix::column(&m.vec_row_major()))
    }

    pub fn eval(&self, x: &[f64]) -> Matrix {
        let mut out = self.constant.clone();
        for (k, m) in &self.terms {
            if x[*k] != 0.0 {
                out = &out + &m.scale(x[*k]);
            }
        }
        out
    }

    pub fn is_symmetric(&self) -> bool {
        let sym = |m: &Matrix| {
            m.is_square() && (m - &m.transpose()).max_abs() <= 1e-12 * (1.0 + m.max_abs())
        };
        sym(&self.constant) && self.terms.iter().all(|(_, m)| sym(m))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sense {
    /// expression ⪰ 0
    Psd,
    /// expression ⪯ 0
    Nsd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmiBlock {
    pub name: String,
    pub sense: Sense,
    pub expr: AffineMatrix,
}

/// `constant + Σ coef·x[k]` compared against zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearConstraint {
    pub name: String,
    pub coeffs: Vec<(usize, f64)>,
    pub constant: f64,
    /// `Psd` means `≥ 0`, `Nsd` means `≤ 0`.
    pub sense: Sense,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SdpProblem {
    pub variables: Vec<VariableDecl>,
    pub num_unknowns: usize,
    pub blocks: Vec<LmiBlock>,
    pub scalar_constraints: Vec<LinearConstraint>,
    /// Dense objective coefficients, minimized.
    pub objective: Vec<f64>,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, name: &str, shape: VariableShape, len: usize) -> usize {
        let offset = self.num_unknowns;
        self.variables.push(VariableDecl {
            name: name.to_string(),
            offset,
            shape,
        });
        self.num_unknowns += len;
        self.objective.resize(self.num_unknowns, 0.0);
        offset
    }

    pub fn scalar_var(&mut self, name: &str) -> ScalarVar {
        ScalarVar(self.declare(name, VariableShape::Scalar, 1))
    }

    pub fn sym_var(&mut self, name: &str, dim: usize) -> SymVar {
        let len = dim * (dim + 1) / 2;
        SymVar {
            offset: self.declare(name, VariableShape::Symmetric { dim }, len),
            dim,
        }
    }

    pub fn mat_var(&mut self, name: &str, rows: usize, cols: usize) -> MatVar {
        MatVar {
            offset: self.declare(name, VariableShape::Matrix { rows, cols }, rows * cols),
            rows,
            cols,
        }
    }

    pub fn add_lmi(&mut self, name: &str, sense: Sense, expr: AffineMatrix) -> Result<()> {
        if !expr.is_symmetric() {
            return invalid(format!("LMI block '{name}' is not symmetric"));
        }
        if expr.terms.iter().any(|(k, _)| *k >= self.num_unknowns) {
            return invalid(format!(
                "LMI block '{name}' references an undeclared unknown"
            ));
        }
        self.blocks.push(LmiBlock {
            name: name.to_string(),
            sense,
            expr,
        });
        Ok(())
    }

    pub fn add_scalar(
        &mut self,
        name: &str,
        coeffs: &[(ScalarVar, f64)],
        constant: f64,
        sense: Sense,
    ) -> Result<()> {
        if coeffs.iter().any(|(v, _)| v.0 >= self.num_unknowns) {
            return invalid(format!(
                "constraint '{name}' references an undeclared unknown"
            ));
        }
        self.scalar_constraints.push(LinearConstraint {
            name: name.to_string(),
            coeffs: coeffs.iter().map(|(v, c)| (v.0, *c)).collect(),
            constant,
            sense,
        });
        Ok(())
    }

    pub fn set_objective(&mut self, terms: &[(ScalarVar, f64)]) {
        self.objective = vec![0.0; self.num_unknowns];
        for (v, c) in terms {
            self.objective[v.0] += c;
        }
    }

    /// All constraints as `Fⱼ(x) ⪰ 0` blocks (scalar constraints become 1×1).
    pub fn standard_blocks(&self) -> Vec<(String, AffineMatrix)> {
        let mut out: Vec<(String, AffineMatrix)> = self
            .blocks
            .iter()
            .map(|b| {
                let e = match b.sense {
                    Sense::Psd => b.expr.clone(),
                    Sense::Nsd => b.expr.scale(-1.0),
                };
                (b.name.clone(), e)
            })
            .collect();
        for c in &self.scalar_constraints {
            let s = if c.sense == Sense::Psd { 1.0 } else { -1.0 };
            let expr = AffineMatrix {
                rows: 1,
                cols: 1,
                constant: Matrix::from_diag(&[s * c.constant]),
                terms: merge_scalar_terms(&c.coeffs, s),
            };
            out.push((c.name.clone(), expr));
        }
        out
    }

    pub fn validate(&self, max_unknowns: usize) -> Result<()> {
        if self.num_unknowns == 0 {
            return invalid("problem has no unknowns");
        }
        if self.num_unknowns > max_unknowns {
            return invalid(format!(
                "{} unknowns exceed the cap of {max_unknowns}",
                self.num_unknowns
            ));
        }
        if self.objective.len() != self.num_unknowns {
            return invalid("objective length does not match the unknown count");
        }
        let mut used = vec![false; self.num_unknowns];
        for (_, e) in self.standard_blocks() {
            for (k, _) in &e.terms {
                used[*k] = true;
            }
        }
        if let Some(k) = used.iter().position(|u| !u) {
            return invalid(format!("unknown {k} appears in no constraint"));
        }
        Ok(())
    }

    /// Largest violation over all constraints at `x` (≤ 0 means satisfied).
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        self.standard_blocks()
            .iter()
            .map(|(_, e)| {
                let m = SymMatrix::from_symmetric_part(&e.eval(x));
                -crate::linalg::min_eig(&m).unwrap_or(f64::NAN)
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }
}

fn merge_scalar_terms(coeffs: &[(usize, f64)], sign: f64) -> Vec<(usize, Matrix)> {
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    for (k, c) in coeffs {
        *acc.entry(*k).or_default() += sign * c;
    }
    acc.into_iter()
        .filter(|(_, c)| *c != 0.0)
        .map(|(k, c)| (k, Matrix::from_diag(&[c])))
        .collect()
}

/// Read variable values out of a solution vector.
pub trait VarValue {
    type Out;
    fn value(&self, x: &[f64]) -> Self::Out;
}

impl VarValue for ScalarVar {
    type Out = f64;
    fn value(&self, x: &[f64]) -> f64 {
        x[self.0]
    }
}

impl VarValue for SymVar {
    type Out = SymMatrix;
    fn value(&self, x: &[f64]) -> SymMatrix {
        let m = Matrix::from_fn(self.dim, self.dim, |i, j| x[self.index(i, j)]);
        SymMatrix::from_symmetric_part(&m)
    }
}

impl VarValue for MatVar {
    type Out = Matrix;
    fn value(&self, x: &[f64]) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| {
            x[self.offset + i * self.cols + j]
        })
    }
}
