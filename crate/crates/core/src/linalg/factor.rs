use super::matrix::{Matrix, SymMatrix};
use crate::error::{invalid, Error, Result};

/// Lower-triangular `L` with `L Lᵀ = m + jitter·I`.
pub fn cholesky(m: &SymMatrix, jitter: f64) -> Result<Matrix> {
    if jitter < 0.0 || !jitter.is_finite() {
        return invalid("jitter must be a finite non-negative number");
    }
    let n = m.dim();
    let a = m.as_matrix();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] + jitter - l.row_slice(j)[..j].iter().map(|v| v * v).sum::<f64>();
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let s: f64 = l.row_slice(i)[..j].iter().zip(&l.row_slice(j)[..j]).map(|(x, y)| x * y).sum();
            l[(i, j)] = (a[(i, j)] - s) / djj;
        }
    }
    // A pivot that survives only through rounding noise is not positive definite.
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max) + jitter;
    for j in 0..n {
        if l[(j, j)] * l[(j, j)] <= 64.0 * f64::EPSILON * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
    }
    Ok(l)
}

/// Solve `L x = b` for lower-triangular `L`.
pub fn forward_substitute(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `Lᵀ x = b` for lower-triangular `L`.
pub fn backward_substitute_transposed(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `(L Lᵀ) x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    backward_substitute_transposed(l, &forward_substitute(l, b))
}

/// Inverse of `L Lᵀ` from its Cholesky factor, as `L⁻ᵀ L⁻¹`.
pub fn cholesky_inverse(l: &Matrix) -> SymMatrix {
    let n = l.rows();
    // Row j of `w` holds column j of L⁻¹ (zero above the diagonal).
    let mut w = vec![0.0; n * n];
    for j in 0..n {
        let col = &mut w[j * n..(j + 1) * n];
        col[j] = 1.0 / l[(j, j)];
        for i in (j + 1)..n {
            let row = l.row_slice(i);
            let s: f64 = row[j..i].iter().zip(&col[j..i]).map(|(a, b)| a * b).sum();
            col[i] = -s / row[i];
        }
    }
    let mut inv = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = w[i * n + i..(i + 1) * n].iter().zip(&w[j * n + i..(j + 1) * n]).map(|(a, b)| a * b).sum();
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    SymMatrix::from_symmetric_part(&inv)
}

/// Solve `a X = b` by Gaussian elimination with partial pivoting.
pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if !a.is_square() || b.rows() != n {
        return invalid(format!(
            "solve: incompatible shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let m = b.cols();
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| lu[(i, col)].abs().total_cmp(&lu[(j, col)].abs()))
            .expect("non-empty pivot range");
        if lu[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        if piv != col {
            for j in 0..n {
                let t = lu[(col, j)];
                lu[(col, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
            for j in 0..m {
                let t = x[(col, j)];
                x[(col, j)] = x[(piv, j)];
                x[(piv, j)] = t;
            }
        }
        let d = lu[(col, col)];
        for i in (col + 1)..n {
            let f = lu[(i, col)] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                lu[(i, j)] -= f * lu[(col, j)];
            }
            for j in 0..m {
                x[(i, j)] -= f * x[(col, j)];
            }
        }
    }
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = x[(i, j)];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

pub fn solve_vec(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    Ok(solve(a, &Matrix::column(b))?.col_vec(0))
}

/// Rank by Gaussian elimination with a relative pivot threshold.
pub fn rank(a: &Matrix, rel_tol: f64) -> usize {
    let mut m = a.clone();
    let (rows, cols) = m.shape();
    let tol = rel_tol * m.max_abs().max(f64::MIN_POSITIVE);
    let mut r = 0;
    for c in 0..cols {
        if r == rows {
            break;
        }
        let piv = (r..rows)
            .max_by(|&i, &j| m[(i, c)].abs().total_cmp(&m[(j, c)].abs()))
            .unwrap();
        if m[(piv, c)].abs() <= tol {
            continue;
        }
        for j in 0..cols {
            let t = m[(r, j)];
            m[(r, j)] = m[(piv, j)];
            m[(piv, j)] = t;
        }
        for i in (r + 1)..rows {
            let f = m[(i, c)] / m[(r, c)];
            for j in c..cols {
                m[(i, j)] -= f * m[(r, j)];
            }
        }
        r += 1;
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(rows: &[Vec<f64>]) -> SymMatrix {
        SymMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky(&SymMatrix::identity(2), 0.0).unwrap();
        assert_eq!(l, Matrix::identity(2));
    }

    #[test]
    fn cholesky_two_by_two_closed_form() {
        // [[a, b], [b, c]] -> [[√a, 0], [b/√a, √(c - b²/a)]]
        let l = cholesky(&sym(&[vec![4.0, 2.0], vec![2.0, 3.0]]), 0.0).unwrap();
        let expected = [2.0, 0.0, 1.0, 2.0f64.sqrt()];
        for (a, b) in l.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cholesky_singular_reports_pivot() {
        match cholesky(&sym(&[vec![1.0, 1.0], vec![1.0, 1.0]]), 0.0) {
            Err(Error::NotPositiveDefinite { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected NotPositiveDefinite, got {other:?}"),
        }
        assert!(cholesky(&sym(&[vec![1.0, 1.0], vec![1.0, 1.0]]), 1e-6).is_ok());
        assert!(matches!(
            cholesky(&sym(&[vec![-1.0]]), 0.0),
            Err(Error::NotPositiveDefinite { pivot: 0 })
        ));
    }

    #[test]
    fn lu_solve_and_rank() {
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![3.0, 1.0]]).unwrap();
        let x = solve_vec(&a, &[4.0, 5.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 2.0).abs() < 1e-14);
        let s = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(solve_vec(&s, &[1.0, 1.0]), Err(Error::Singular)));
        assert_eq!(rank(&s, 1e-12), 1);
        assert_eq!(rank(&a, 1e-12), 2);
    }
}
