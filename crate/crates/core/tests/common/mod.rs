#![allow(dead_code)]

use lbo_core::gp::{kernel_eval, kernel_matrix, GpModel, KernelKind, KernelSpec};
use lbo_core::linalg::sym_eig;
use lbo_core::rng::{stream, Rng};
use lbo_core::NumericsConfig;
use rand::Rng as _;

/// Gauss-Jordan inverse with partial pivoting.
pub fn explicit_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
        m.swap(c, p);
        let d = m[c][c];
        m[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot = m[c].clone();
                m[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Posterior mean and variance from the explicit inverse of `K + jitter·I`.
pub fn oracle_predict(spec: &KernelSpec, xs: &[Vec<f64>], ys: &[f64], p: &[f64], jitter: f64) -> (f64, f64) {
    let n = xs.len();
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| kernel_eval(spec, &xs[i], &xs[j]) + if i == j { jitter } else { 0.0 }).collect())
        .collect();
    let inv = explicit_inverse(&k);
    let kp: Vec<f64> = xs.iter().map(|x| kernel_eval(spec, x, p)).collect();
    let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| inv[i][j] * kp[j]).sum()).collect();
    let mu = w.iter().zip(ys).map(|(a, b)| a * b).sum();
    let var = kernel_eval(spec, p, p) - w.iter().zip(&kp).map(|(a, b)| a * b).sum::<f64>();
    (mu, var)
}

/// Random dataset (≤ 20 points, ≤ 5 dims) with a random kernel of the given
/// kind. Draws whose Gram matrix has condition number above 1e6 are redrawn:
/// beyond that, rounding in any O(n³) solve exceeds the 1e-9 comparison.
pub fn random_dataset(rng: &mut Rng, kind: KernelKind) -> (KernelSpec, Vec<Vec<f64>>, Vec<f64>) {
    loop {
        let dim = rng.gen_range(1..=5);
        let n = rng.gen_range(1..=20);
        let s0 = rng.gen_range(0.5..2.0);
        let spec = match kind {
            KernelKind::SquaredExponential => KernelSpec::new(kind, s0, vec![rng.gen_range(0.2..1.0)]).unwrap(),
            KernelKind::Matern52 => KernelSpec::new(kind, s0, (0..dim).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap(),
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let e = sym_eig(&kernel_matrix(&spec, &xs).add_diag(spec.jitter)).unwrap();
        if e.max() / e.min() <= 1e6 {
            return (spec, xs, ys);
        }
    }
}

/// Largest deviation of `predict` from the explicit-inverse oracle over 100
/// random datasets per kernel, 5 queries each.
pub fn worst_predict_deviation(seed: u64) -> f64 {
    let cfg = NumericsConfig::default();
    let mut rng = stream(seed, "gp-oracle");
    let mut worst = 0.0f64;
    for kind in [KernelKind::SquaredExponential, KernelKind::Matern52] {
        for _ in 0..100 {
            let (spec, xs, ys) = random_dataset(&mut rng, kind);
            let m = GpModel::fit(&xs, &ys, &spec, &cfg).unwrap();
            let dim = xs[0].len();
            for _ in 0..5 {
                let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let (mu, var) = m.predict(&p);
                let (mo, vo) = oracle_predict(&spec, &xs, &ys, &p, m.jitter_used());
                worst = worst.max((mu - mo).abs()).max((var - vo.max(0.0)).abs());
            }
        }
    }
    worst
}
