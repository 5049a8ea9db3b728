use lbo_core::linalg::Matrix;
use lbo_core::lipschitz::{
    analytic_lipschitz_bound, jacobian_lipschitz_bound, sampled_lipschitz_estimate, BoxDomain, GridOptions,
    JacobianNorm,
};
use lbo_core::rng::stream;
use lbo_core::system::{van_der_pol_model, BasisExpansion, BasisTerm, Monomial, VdpEncoding};
use lbo_core::Error;
use rand::Rng;

const PUBLISHED_P_INF: [f64; 5] = [-0.6077e-3, 8.4930e-3, -9.2877e-3, 1.8897e-3, 9.8417e-3];

fn scalar_expansion(terms: Vec<BasisTerm>, n_q: usize, p: &[f64]) -> BasisExpansion {
    BasisExpansion::new(terms, n_q, 1, vec![0], p.to_vec(), 1e6, 1.0).unwrap()
}

fn q1sq_q2() -> BasisExpansion {
    scalar_expansion(vec![BasisTerm::polynomial(vec![Monomial::new(1.0, &[2, 1])])], 2, &[1.0])
}

/// Largest gradient norm of `g` over a `k × k` node grid on `[−r, r]²`.
fn dense_grid_oracle(r: f64, k: usize, g: impl Fn(f64, f64) -> f64) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..k {
        for j in 0..k {
            let a = -r + 2.0 * r * i as f64 / (k - 1) as f64;
            let b = -r + 2.0 * r * j as f64 / (k - 1) as f64;
            m = m.max(g(a, b));
        }
    }
    m
}

#[test]
fn identity_basis_gives_coefficient_norm() {
    let e = scalar_expansion(vec![BasisTerm::coordinate(2, 0), BasisTerm::coordinate(2, 1)], 2, &[3.0, -4.0]);
    let d = BoxDomain::symmetric(1.0, 2).unwrap();
    let opts = GridOptions { cells: 4, safety_factor: 1.0, ..GridOptions::default() };
    let est = analytic_lipschitz_bound(&e, &d, &opts).unwrap();
    assert!((est.value - 5.0).abs() < 1e-12);
    assert!((jacobian_lipschitz_bound(&e, &d, &opts).unwrap().value - 5.0).abs() < 1e-12);
}

#[test]
fn cubic_monomial_matches_dense_grid() {
    let oracle = dense_grid_oracle(5.0, 400, |a, b| ((2.0 * a * b).powi(2) + (a * a).powi(2)).sqrt());
    assert!((oracle - 3125f64.sqrt()).abs() < 1e-9);
    let d = BoxDomain::symmetric(5.0, 2).unwrap();
    let est = analytic_lipschitz_bound(&q1sq_q2(), &d, &GridOptions::default()).unwrap();
    assert!((est.grid_max - oracle).abs() <= 1e-9 * oracle);
    assert!((est.value / oracle - 1.05).abs() < 1e-12);
    assert!((est.value - oracle).abs() <= 0.05 * oracle + 1e-12 * oracle);
    let fro = analytic_lipschitz_bound(&q1sq_q2(), &d, &GridOptions { norm: JacobianNorm::Frobenius, ..GridOptions::default() }).unwrap();
    // A single-row Jacobian has equal spectral and Frobenius norms.
    assert!((fro.value - est.value).abs() < 1e-9);
}

#[test]
fn vdp_published_coefficients_match_dense_grid() {
    let (_, basis) = van_der_pol_model(0.01, VdpEncoding::TruePhi, 1e-2, 1.0).unwrap();
    let e = basis.with_coefficients(&PUBLISHED_P_INF).unwrap();
    let d = BoxDomain::symmetric(5.0, 2).unwrap();
    let est = analytic_lipschitz_bound(&e, &d, &GridOptions { cells: 100, ..GridOptions::default() }).unwrap();
    // Oracle: spectral norm of the 5×2 basis Jacobian via the 2×2 Gram matrix.
    let grad = |a: f64, b: f64| {
        let rows = [
            [6.0 * a * (3.0 * b * b - 1.0), 6.0 * b * (3.0 * a * a - 1.0)],
            [6.0 * a * b, 3.0 * a * a - 1.0],
            [3.0 * b * b - 1.0, 6.0 * a * b],
            [15.0 * a * a - 3.0, 0.0],
            [0.0, 15.0 * b * b - 3.0],
        ];
        let (mut g11, mut g12, mut g22) = (0.0, 0.0, 0.0);
        for r in rows {
            g11 += 100.0 * r[0] * r[0];
            g12 += 100.0 * r[0] * r[1];
            g22 += 100.0 * r[1] * r[1];
        }
        let tr = g11 + g22;
        let det = g11 * g22 - g12 * g12;
        (0.5 * (tr + (tr * tr - 4.0 * det).max(0.0).sqrt())).sqrt()
    };
    let oracle = est.coefficient_norm * dense_grid_oracle(5.0, 400, grad);
    assert!((est.value - oracle).abs() <= 0.05 * oracle, "{} vs {oracle}", est.value);
    assert!(est.value >= oracle);
}

#[test]
fn constant_function_has_zero_slope() {
    let d = BoxDomain::symmetric(2.0, 3).unwrap();
    let v = sampled_lipschitz_estimate(|_| vec![4.0, -1.0], &d, 1000, 1.2, &mut stream(0, "s")).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn linear_map_brackets_largest_singular_value() {
    let mut rng = stream(3, "linear");
    for _ in 0..5 {
        let m = Matrix::from_fn(2, 3, |_, _| rng.gen_range(-2.0..2.0));
        let smax = lbo_core::linalg::spectral_norm(&m).unwrap();
        let d = BoxDomain::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let inflation = 1.1;
        let v = sampled_lipschitz_estimate(|q| m.matvec(q), &d, 100_000, inflation, &mut rng).unwrap();
        assert!(v <= inflation * smax * (1.0 + 1e-12), "{v} vs {smax}");
        assert!(v >= 0.9 * smax, "{v} vs {smax}");
    }
}

#[test]
fn grid_refinement_never_lowers_the_maximum() {
    let (_, basis) = van_der_pol_model(0.01, VdpEncoding::TruePhi, 1e-2, 1.0).unwrap();
    let e = basis.with_coefficients(&PUBLISHED_P_INF).unwrap();
    let d = BoxDomain::new(vec![-1.3, -0.7], vec![0.9, 2.1]).unwrap();
    for est in [analytic_lipschitz_bound, jacobian_lipschitz_bound] {
        let mut prev = 0.0;
        for cells in [2, 4, 8, 16, 32, 64] {
            let m = est(&e, &d, &GridOptions { cells, ..GridOptions::default() }).unwrap().grid_max;
            assert!(m >= prev - 1e-9, "{cells}: {m} < {prev}");
            prev = m;
        }
    }
}

fn random_expansion(rng: &mut lbo_core::rng::Rng) -> BasisExpansion {
    let terms: Vec<BasisTerm> = (0..rng.gen_range(1..5))
        .map(|_| {
            let monos = (0..rng.gen_range(1..4))
                .map(|_| {
                    let a = rng.gen_range(0..=3u32);
                    let b = rng.gen_range(0..=(3 - a));
                    Monomial::new(rng.gen_range(-1.0..1.0), &[a, b])
                })
                .collect();
            BasisTerm::polynomial(monos)
        })
        .collect();
    let p: Vec<f64> = (0..terms.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    scalar_expansion(terms, 2, &p)
}

#[test]
fn sampled_estimate_stays_below_grid_bounds() {
    let mut rng = stream(17, "expansions");
    let d = BoxDomain::symmetric(2.0, 2).unwrap();
    let opts = GridOptions { cells: 100, ..GridOptions::default() };
    for _ in 0..10 {
        let e = random_expansion(&mut rng);
        let inflation = 1.05;
        let s = sampled_lipschitz_estimate(|q| e.eval(q), &d, 20_000, inflation, &mut rng).unwrap();
        let direct = jacobian_lipschitz_bound(&e, &d, &opts).unwrap().value;
        let product = analytic_lipschitz_bound(&e, &d, &opts).unwrap().value;
        assert!(direct <= product * (1.0 + 1e-12));
        assert!(s <= direct * inflation, "{s} vs {direct}");
        assert!(s <= product * inflation);
    }
}

#[test]
fn learned_vdp_expansion_cross_method() {
    let (_, basis) = van_der_pol_model(0.01, VdpEncoding::TruePhi, 1e-2, 1.0).unwrap();
    let e = basis.with_coefficients(&PUBLISHED_P_INF).unwrap();
    let d = BoxDomain::symmetric(5.0, 2).unwrap();
    let s = sampled_lipschitz_estimate(|q| e.eval(q), &d, 100_000, 1.0, &mut stream(0, "vdp")).unwrap();
    let direct = jacobian_lipschitz_bound(&e, &d, &GridOptions::default()).unwrap().value;
    let product = analytic_lipschitz_bound(&e, &d, &GridOptions::default()).unwrap().value;
    assert!(s <= direct && direct <= 1.5 * s, "sampled {s}, direct {direct}");
    // The coefficient-norm product decouples ‖p‖ from the basis gradient and
    // is several times looser here.
    assert!(product > 1.5 * s, "sampled {s}, product {product}");
}

#[test]
fn estimators_are_deterministic() {
    let e = q1sq_q2();
    let d = BoxDomain::symmetric(1.0, 2).unwrap();
    let a = sampled_lipschitz_estimate(|q| e.eval(q), &d, 5000, 1.0, &mut stream(4, "s")).unwrap();
    let b = sampled_lipschitz_estimate(|q| e.eval(q), &d, 5000, 1.0, &mut stream(4, "s")).unwrap();
    assert_eq!(a, b);
    let g = GridOptions { cells: 30, ..GridOptions::default() };
    assert_eq!(analytic_lipschitz_bound(&e, &d, &g).unwrap(), analytic_lipschitz_bound(&e, &d, &g).unwrap());
}

#[test]
fn bad_inputs_are_rejected() {
    assert!(BoxDomain::new(vec![0.0], vec![0.0]).is_err());
    assert!(BoxDomain::new(vec![0.0, 1.0], vec![1.0]).is_err());
    assert!(BoxDomain::new(vec![f64::NEG_INFINITY], vec![1.0]).is_err());
    let d = BoxDomain::symmetric(1.0, 2).unwrap();
    let e = q1sq_q2();
    assert!(sampled_lipschitz_estimate(|q| e.eval(q), &d, 0, 1.0, &mut stream(0, "s")).is_err());
    assert!(sampled_lipschitz_estimate(|q| e.eval(q), &d, 10, 0.5, &mut stream(0, "s")).is_err());
    assert!(analytic_lipschitz_bound(&e, &d, &GridOptions { cells: 0, ..GridOptions::default() }).is_err());
    assert!(analytic_lipschitz_bound(&e, &BoxDomain::symmetric(1.0, 3).unwrap(), &GridOptions::default()).is_err());
    let relu = scalar_expansion(vec![BasisTerm::Relu { w: vec![1.0, 0.0], b: 0.0 }], 2, &[1.0]);
    assert!(matches!(analytic_lipschitz_bound(&relu, &d, &GridOptions::default()), Err(Error::Unsupported(_))));
}
