mod common;

use common::explicit_inverse;
use lbo_core::gp::{
    kernel_eval, kernel_matrix, optimize_hyperparameters, GpModel, GpSnapshot, HyperOptions, KernelKind, KernelSpec,
};
use lbo_core::linalg::{cholesky, min_eig};
use lbo_core::rng::stream;
use lbo_core::{Error, NumericsConfig};
use proptest::prelude::*;
use rand::Rng;

fn cfg() -> NumericsConfig {
    NumericsConfig::default()
}

fn se(s0: f64, l: f64) -> KernelSpec {
    KernelSpec::new(KernelKind::SquaredExponential, s0, vec![l]).unwrap()
}

fn matern(s0: f64, ls: Vec<f64>) -> KernelSpec {
    KernelSpec::new(KernelKind::Matern52, s0, ls).unwrap()
}

#[test]
fn kernel_values() {
    assert_eq!(kernel_eval(&se(2.0, 0.7), &[1.0, 2.0], &[1.0, 2.0]), 4.0);
    assert_eq!(kernel_eval(&matern(2.0, vec![0.7]), &[1.0, 2.0], &[1.0, 2.0]), 2.0);
    let mut sq = matern(2.0, vec![0.7]);
    sq.square_matern_amplitude = true;
    assert_eq!(kernel_eval(&sq, &[0.0], &[0.0]), 4.0);
    let v = kernel_eval(&se(1.0, 1.0), &[0.0, 0.0], &[1.0, 1.0]);
    assert!((v - (-1.0f64).exp()).abs() < 1e-15 && (v - 0.367879).abs() < 1e-6);

    // Matérn ARD against a hand evaluation at r² = (0.3/0.5)² + (0.4/2)².
    let k = matern(1.5, vec![0.5, 2.0]);
    let r = (0.36f64 + 0.04).sqrt();
    let expect = 1.5 * (1.0 + 5f64.sqrt() * r + 5.0 / 3.0 * r * r) * (-(5f64.sqrt()) * r).exp();
    assert!((kernel_eval(&k, &[0.3, 0.4], &[0.0, 0.0]) - expect).abs() < 1e-14);
    assert_eq!(kernel_eval(&k, &[0.3, 0.4], &[0.0, 0.0]), kernel_eval(&k, &[0.0, 0.0], &[0.3, 0.4]));
}

#[test]
fn rejects_bad_hyperparameters() {
    assert!(KernelSpec::new(KernelKind::SquaredExponential, 0.0, vec![1.0]).is_err());
    assert!(KernelSpec::new(KernelKind::Matern52, 1.0, vec![]).is_err());
    let k = matern(1.0, vec![1.0, 1.0]);
    assert!(GpModel::fit(&[vec![0.0, 0.0, 0.0]], &[1.0], &k, &cfg()).is_err());
}

#[test]
fn single_point_interpolates() {
    let m = GpModel::fit(&[vec![0.2, -0.1]], &[3.0], &se(1.0, 0.5), &cfg()).unwrap();
    let (mu, var) = m.predict(&[0.2, -0.1]);
    assert!((mu - 3.0).abs() < 1e-8 && var < 1e-8);
}

#[test]
fn two_points_match_cramer() {
    let spec = se(1.3, 0.8);
    let xs = vec![vec![0.0], vec![0.5]];
    let ys = [1.0, -2.0];
    let m = GpModel::fit(&xs, &ys, &spec, &cfg()).unwrap();
    let j = spec.jitter;
    let (a, b, d) = (1.69 + j, 1.69 * (-0.5f64 * (0.5 / 0.8f64).powi(2)).exp(), 1.69 + j);
    let det = a * d - b * b;
    let p = [0.2];
    let k1 = kernel_eval(&spec, &xs[0], &p);
    let k2 = kernel_eval(&spec, &xs[1], &p);
    let w1 = (d * k1 - b * k2) / det;
    let w2 = (a * k2 - b * k1) / det;
    let (mu, var) = m.predict(&p);
    assert!((mu - (w1 * ys[0] + w2 * ys[1])).abs() < 1e-10);
    assert!((var - (1.69 - w1 * k1 - w2 * k2)).abs() < 1e-10);
}

#[test]
fn duplicate_input_without_jitter_fails() {
    let mut spec = se(1.0, 1.0);
    spec.jitter = 0.0;
    let err = GpModel::fit(&[vec![1.0], vec![1.0]], &[0.0, 1.0], &spec, &cfg()).unwrap_err();
    assert!(matches!(err, Error::IllConditionedGram { .. }), "{err}");
    // With jitter the same data factorizes (after escalation if needed).
    let m = GpModel::fit(&[vec![1.0], vec![1.0]], &[0.0, 1.0], &se(1.0, 1.0), &cfg()).unwrap();
    assert!(m.jitter_used() <= cfg().gp_max_jitter);
}

#[test]
fn prior_recovered_far_from_data() {
    let m = GpModel::fit(&[vec![0.0], vec![0.3]], &[2.0, -1.0], &se(1.7, 0.2), &cfg()).unwrap();
    let (mu, var) = m.predict(&[50.0]);
    assert!(mu.abs() < 1e-12 && (var - 1.7 * 1.7).abs() < 1e-12);
}

#[test]
fn explicit_inverse_oracle_on_random_sets() {
    let worst = common::worst_predict_deviation(7);
    assert!(worst < 1e-9, "largest deviation {worst:e}");
}

#[test]
fn log_marginal_likelihood_values() {
    let m = GpModel::fit(&[vec![0.0]], &[0.0], &se(1.0, 1.0), &cfg()).unwrap();
    assert!((m.log_marginal_likelihood() + 0.918_938_533_204_672_7).abs() < 1e-9);

    // Three points against an explicit determinant and inverse.
    let spec = matern(1.2, vec![0.6]);
    let xs = vec![vec![0.0], vec![0.4], vec![1.1]];
    let ys = [0.5, -0.3, 1.0];
    let m = GpModel::fit(&xs, &ys, &spec, &cfg()).unwrap();
    let k: Vec<Vec<f64>> = (0..3)
        .map(|i| (0..3).map(|j| kernel_eval(&spec, &xs[i], &xs[j]) + if i == j { spec.jitter } else { 0.0 }).collect())
        .collect();
    let det = k[0][0] * (k[1][1] * k[2][2] - k[1][2] * k[2][1]) - k[0][1] * (k[1][0] * k[2][2] - k[1][2] * k[2][0])
        + k[0][2] * (k[1][0] * k[2][1] - k[1][1] * k[2][0]);
    let inv = explicit_inverse(&k);
    let quad: f64 = (0..3).map(|i| (0..3).map(|j| ys[i] * inv[i][j] * ys[j]).sum::<f64>()).sum();
    let expect = -0.5 * quad - 0.5 * det.ln() - 1.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((m.log_marginal_likelihood() - expect).abs() < 1e-9);

    // Zero targets: only the determinant term remains.
    let z = GpModel::fit(&xs, &[0.0; 3], &spec, &cfg()).unwrap();
    assert!((z.log_marginal_likelihood() - (-0.5 * det.ln() - 1.5 * (2.0 * std::f64::consts::PI).ln())).abs() < 1e-9);
}

#[test]
fn likelihood_gradient_matches_finite_differences() {
    let xs: Vec<Vec<f64>> = vec![vec![0.0, 0.1], vec![0.5, -0.3], vec![0.9, 0.7], vec![-0.4, 0.2], vec![0.2, 0.9]];
    let ys = [0.3, -1.0, 0.8, 0.1, -0.5];
    let mut sq = matern(0.8, vec![0.4, 0.9]);
    sq.square_matern_amplitude = true;
    for spec in [se(1.1, 0.5), matern(0.8, vec![0.4, 0.9]), sq, KernelSpec::new(KernelKind::SquaredExponential, 0.7, vec![0.3, 1.2]).unwrap()] {
        let m = GpModel::fit(&xs, &ys, &spec, &cfg()).unwrap();
        let g = m.log_marginal_likelihood_gradient();
        let theta = spec.log_params();
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fp = GpModel::fit(&xs, &ys, &spec.with_log_params(&tp), &cfg()).unwrap().log_marginal_likelihood();
            let fm = GpModel::fit(&xs, &ys, &spec.with_log_params(&tm), &cfg()).unwrap().log_marginal_likelihood();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "{:?} θ{i}: {fd} vs {}", spec.kind, g[i]);
        }
    }
}

#[test]
fn constant_zero_targets_drive_amplitude_to_floor() {
    let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.1]).collect();
    let fit = optimize_hyperparameters(
        &xs,
        &[0.0; 8],
        &se(1.0, 1.0),
        &HyperOptions::default(),
        &mut stream(1, "hyp"),
        &cfg(),
    )
    .unwrap();
    assert!(fit.kernel.sigma0 <= 1e-4 * 1.01, "σ₀ = {}", fit.kernel.sigma0);
}

#[test]
fn recovers_lengthscale_from_synthetic_draw() {
    let mut rng = stream(3, "draw");
    let truth = {
        let mut k = se(1.0, 0.5);
        k.jitter = 1e-8;
        k
    };
    let xs: Vec<Vec<f64>> = (0..200).map(|_| vec![rng.gen_range(-10.0..10.0)]).collect();
    let l = cholesky(&kernel_matrix(&truth, &xs), truth.jitter).unwrap();
    let z: Vec<f64> = (0..200).map(|_| standard_normal(&mut rng)).collect();
    let ys: Vec<f64> = (0..200).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect();
    let mut template = se(1.0, 1.0);
    template.jitter = 1e-8;
    let fit = optimize_hyperparameters(&xs, &ys, &template, &HyperOptions::default(), &mut stream(3, "hyp"), &cfg()).unwrap();
    let l = fit.kernel.lengthscales[0];
    assert!((0.3..=0.8).contains(&l), "recovered ℓ = {l}");
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[test]
fn more_restarts_never_hurt() {
    let mut rng = stream(11, "data");
    let xs: Vec<Vec<f64>> = (0..25).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] * x[2]).collect();
    let template = matern(1.0, vec![1.0; 3]);
    let one = HyperOptions { n_starts: 1, ..Default::default() };
    let five = HyperOptions { n_starts: 5, ..Default::default() };
    let a = optimize_hyperparameters(&xs, &ys, &template, &one, &mut stream(5, "h"), &cfg()).unwrap();
    let b = optimize_hyperparameters(&xs, &ys, &template, &five, &mut stream(5, "h"), &cfg()).unwrap();
    assert!(b.log_likelihood >= a.log_likelihood - 1e-12);
    // Reported likelihood is that of the returned kernel.
    let m = GpModel::fit(&xs, &ys, &b.kernel, &cfg()).unwrap();
    assert!((m.log_marginal_likelihood() - b.log_likelihood).abs() < 1e-9);
}

#[test]
fn snapshot_round_trip() {
    let xs = vec![vec![0.0, 1.0], vec![0.5, 0.2]];
    let m = GpModel::fit(&xs, &[1.0, 2.0], &matern(1.0, vec![0.5, 0.7]), &cfg()).unwrap();
    let text = serde_json::to_string(&m.snapshot()).unwrap();
    let back = GpModel::from_snapshot(&serde_json::from_str::<GpSnapshot>(&text).unwrap(), &cfg()).unwrap();
    assert_eq!(back.predict(&[0.3, 0.3]), m.predict(&[0.3, 0.3]));
    assert!(serde_json::from_str::<GpSnapshot>(r#"{"kernel":{"kind":"rbf","sigma0":1,"lengthscales":[1]},"inputs":[],"targets":[]}"#).is_err());
}

fn dataset(dim: usize, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = stream(seed, "prop");
    let xs = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let ys = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (xs, ys)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn posterior_variance_bounds(seed in 0u64..1000, dim in 1usize..5, n in 1usize..15, matern_kind in any::<bool>()) {
        let (xs, ys) = dataset(dim, n, seed);
        let spec = if matern_kind { matern(1.3, vec![0.4; dim]) } else { se(1.3, 0.4) };
        let m = GpModel::fit(&xs, &ys, &spec, &cfg()).unwrap();
        let mut rng = stream(seed, "queries");
        for _ in 0..10_000 / 32 {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let (_, var) = m.predict(&p);
            prop_assert!(var >= 0.0 && var <= kernel_eval(&spec, &p, &p) + 1e-9);
        }
    }

    #[test]
    fn more_data_never_increases_variance(seed in 0u64..1000, dim in 1usize..4, n in 1usize..12, matern_kind in any::<bool>()) {
        let (xs, ys) = dataset(dim, n + 1, seed);
        let spec = if matern_kind { matern(1.0, vec![0.5; dim]) } else { se(1.0, 0.5) };
        let small = GpModel::fit(&xs[..n], &ys[..n], &spec, &cfg()).unwrap();
        let big = GpModel::fit(&xs, &ys, &spec, &cfg()).unwrap();
        let mut rng = stream(seed, "q2");
        for _ in 0..50 {
            let p: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
            prop_assert!(big.predict(&p).1 <= small.predict(&p).1 + 1e-8);
        }
    }

    #[test]
    fn kernel_matrices_are_psd(seed in 0u64..1000, dim in 1usize..=10, n in 2usize..=50, l in 0.1f64..3.0, matern_kind in any::<bool>()) {
        let (xs, _) = dataset(dim, n, seed);
        let spec = if matern_kind { matern(1.0, vec![l; dim]) } else { se(1.0, l) };
        prop_assert!(min_eig(&kernel_matrix(&spec, &xs)).unwrap() >= -1e-8);
    }
}
