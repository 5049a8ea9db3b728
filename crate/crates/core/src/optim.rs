//! Box-constrained quasi-Newton minimization.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundedMinimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// Projected gradient fell below the tolerance.
    pub converged: bool,
    /// Backtracking found no decrease even along steepest descent.
    pub line_search_failed: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iterations: usize,
    /// Stop when the largest free gradient component is below this times
    /// `max(1, |f|)`.
    pub gradient_tol: f64,
    /// Stop when the relative decrease of one step is below this.
    pub value_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iterations: 200, gradient_tol: 1e-6, value_tol: 1e-12 }
    }
}

fn clamp(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter().zip(lo.iter().zip(hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
}

/// Projected BFGS: the inverse-Hessian step is restricted to the variables
/// that are not pinned at a bound, and trial points are projected back onto
/// the box. `f` returns the value and gradient, or `None` where undefined
/// (treated as an infinitely bad trial point).
///
/// Returns `None` only when `f` is undefined at the projected start.
pub fn minimize_bounded<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], opts: &BfgsOptions) -> Option<BoundedMinimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = clamp(x0, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut h = identity(n);
    let mut out = BoundedMinimum {
        x: x.clone(),
        value: fx,
        iterations: 0,
        evaluations,
        converged: false,
        line_search_failed: false,
    };
    if !fx.is_finite() {
        return Some(out);
    }
    for iter in 0..opts.max_iterations {
        out.iterations = iter;
        let free: Vec<bool> = (0..n).map(|i| !((x[i] <= lo[i] && g[i] > 0.0) || (x[i] >= hi[i] && g[i] < 0.0))).collect();
        let pg = (0..n).filter(|&i| free[i]).map(|i| g[i].abs()).fold(0.0, f64::max);
        if pg < opts.gradient_tol * fx.abs().max(1.0) {
            out.converged = true;
            break;
        }
        let mut reset = false;
        let accepted = loop {
            let mut d = vec![0.0; n];
            for i in (0..n).filter(|&i| free[i]) {
                d[i] = -(0..n).filter(|&j| free[j]).map(|j| h[i][j] * g[j]).sum::<f64>();
            }
            if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
                h = identity(n);
                reset = true;
                for i in 0..n {
                    d[i] = if free[i] { -g[i] } else { 0.0 };
                }
            }
            let mut alpha = 1.0;
            let mut found = None;
            for _ in 0..20 {
                let trial = clamp(&x.iter().zip(&d).map(|(a, b)| a + alpha * b).collect::<Vec<_>>(), lo, hi);
                let decrease: f64 = g.iter().zip(trial.iter().zip(&x)).map(|(gi, (t, xi))| gi * (t - xi)).sum();
                evaluations += 1;
                if let Some((ft, gt)) = f(&trial) {
                    if ft.is_finite() && ft <= fx + 1e-4 * decrease && gt.iter().all(|v| v.is_finite()) {
                        found = Some((trial, ft, gt));
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match found {
                Some(v) => break Some(v),
                None if !reset => {
                    h = identity(n);
                    reset = true;
                }
                None => break None,
            }
        };
        let Some((xn, fnew, gn)) = accepted else {
            out.line_search_failed = true;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if sy > 1e-12 * sn * yn {
            bfgs_update(&mut h, &s, &y, sy);
        }
        let rel = (fx - fnew) / fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if rel < opts.value_tol {
            out.converged = true;
            break;
        }
    }
    out.x = x;
    out.value = fx;
    out.evaluations = evaluations;
    Some(out)
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

/// `H ← (I − ρsyᵀ) H (I − ρysᵀ) + ρssᵀ`.
fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Option<(f64, Vec<f64>)> {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        Some((v, vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)]))
    }

    #[test]
    fn rosenbrock_unconstrained() {
        let r = minimize_bounded(rosenbrock, &[-1.2, 1.0], &[-5.0; 2], &[5.0; 2], &BfgsOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn active_bound() {
        // min (x − 3)² on [−1, 2] sits on the upper bound.
        let f = |x: &[f64]| Some(((x[0] - 3.0).powi(2), vec![2.0 * (x[0] - 3.0)]));
        let r = minimize_bounded(f, &[0.0], &[-1.0], &[2.0], &BfgsOptions::default()).unwrap();
        assert_eq!(r.x, vec![2.0]);
        assert!(r.converged);
    }
}
