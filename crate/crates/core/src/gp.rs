//! Zero-mean Gaussian-process regression with squared-exponential and
//! Matérn-5/2 kernels, and log-marginal-likelihood hyperparameter fitting.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{cholesky, cholesky_inverse, cholesky_solve, forward_substitute, Matrix, SymMatrix};
use crate::optim::{minimize_bounded, BfgsOptions};
use crate::rng::Rng;
use crate::NumericsConfig;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SQRT5: f64 = 2.236_067_977_499_79;

pub const SIGMA0_BOUNDS: (f64, f64) = (1e-4, 1e4);
pub const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-3, 1e3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KernelKind {
    #[serde(rename = "squared-exponential")]
    SquaredExponential,
    #[serde(rename = "matern52")]
    Matern52,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: KernelKind,
    /// Output scale σ₀.
    pub sigma0: f64,
    /// One entry (isotropic) or one per input dimension (ARD).
    pub lengthscales: Vec<f64>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    /// Use σ₀² instead of σ₀ as the Matérn prefactor.
    #[serde(default)]
    pub square_matern_amplitude: bool,
}

fn default_jitter() -> f64 {
    1e-10
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma0: f64, lengthscales: Vec<f64>) -> Result<Self> {
        let s = Self { kind, sigma0, lengthscales, jitter: default_jitter(), square_matern_amplitude: false };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.sigma0) || self.lengthscales.is_empty() || !self.lengthscales.iter().all(|&l| pos(l)) {
            return invalid("kernel hyperparameters must be positive and finite");
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return invalid("jitter must be non-negative");
        }
        Ok(())
    }

    /// Checks the hyperparameters against an input dimension.
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.check()?;
        if self.lengthscales.len() != 1 && self.lengthscales.len() != dim {
            return invalid(format!(
                "{} length-scales for {dim}-dimensional inputs",
                self.lengthscales.len()
            ));
        }
        Ok(())
    }

    /// Prior variance `𝒦(p, p)`.
    pub fn amplitude(&self) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => self.sigma0 * self.sigma0,
            KernelKind::Matern52 if self.square_matern_amplitude => self.sigma0 * self.sigma0,
            KernelKind::Matern52 => self.sigma0,
        }
    }

    /// Power of σ₀ in the prefactor.
    fn amplitude_order(&self) -> f64 {
        match self.kind {
            KernelKind::Matern52 if !self.square_matern_amplitude => 1.0,
            _ => 2.0,
        }
    }

    fn lengthscale(&self, d: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[d]
        }
    }

    fn r2(&self, p: &[f64], q: &[f64]) -> f64 {
        p.iter()
            .zip(q)
            .enumerate()
            .map(|(d, (a, b))| {
                let z = (a - b) / self.lengthscale(d);
                z * z
            })
            .sum()
    }

    fn shape(&self, r2: f64) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                (1.0 + SQRT5 * r + 5.0 / 3.0 * r2) * (-SQRT5 * r).exp()
            }
        }
    }

    /// `∂𝒦/∂(r²)·(−2)`, i.e. the factor multiplying `Δ_d²/ℓ_d²` in `∂𝒦/∂log ℓ_d`.
    fn lengthscale_factor(&self, r2: f64) -> f64 {
        match self.kind {
            KernelKind::SquaredExponential => self.amplitude() * (-0.5 * r2).exp(),
            KernelKind::Matern52 => {
                let r = r2.sqrt();
                self.amplitude() * 5.0 / 3.0 * (1.0 + SQRT5 * r) * (-SQRT5 * r).exp()
            }
        }
    }

    pub fn eval(&self, p: &[f64], q: &[f64]) -> f64 {
        self.amplitude() * self.shape(self.r2(p, q))
    }

    /// Log-hyperparameters `(log σ₀, log ℓ…)`.
    pub fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.sigma0.ln()).chain(self.lengthscales.iter().map(|l| l.ln())).collect()
    }

    pub fn with_log_params(&self, theta: &[f64]) -> Self {
        let mut s = self.clone();
        s.sigma0 = theta[0].exp();
        s.lengthscales = theta[1..].iter().map(|t| t.exp()).collect();
        s
    }
}

pub fn kernel_eval(spec: &KernelSpec, p: &[f64], q: &[f64]) -> f64 {
    spec.eval(p, q)
}

/// Gram matrix without jitter.
pub fn kernel_matrix(spec: &KernelSpec, points: &[Vec<f64>]) -> SymMatrix {
    let n = points.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = spec.eval(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    SymMatrix::from_symmetric_part(&k)
}

/// Training data and hyperparameters: everything needed to refit a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpSnapshot {
    pub kernel: KernelSpec,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

/// Dot product with error-free transformations (Ogita-Rump-Oishi `Dot2`).
fn compensated_dot(a: &[f64], b: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let pe = x.mul_add(*y, -p);
        let t = s + p;
        let z = t - s;
        c += (s - (t - z)) + (p - z) + pe;
        s = t;
    }
    s + c
}

/// A fitted, immutable GP.
#[derive(Debug, Clone)]
pub struct GpModel {
    kernel: KernelSpec,
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    chol: Matrix,
    alpha: Vec<f64>,
    jitter_used: f64,
}

impl GpModel {
    /// Factorizes `K + jitter·I`, multiplying the jitter by 10 on failure
    /// up to `cfg.gp_max_jitter`. Zero jitter is never escalated.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], kernel: &KernelSpec, cfg: &NumericsConfig) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return invalid("GP fit needs j ≥ 1 inputs with one target each");
        }
        let dim = inputs[0].len();
        if dim == 0 || inputs.iter().any(|p| p.len() != dim) {
            return invalid("GP inputs must share a non-zero dimension");
        }
        if inputs.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
            return invalid("GP data must be finite");
        }
        kernel.validate(dim)?;
        let k = kernel_matrix(kernel, inputs);
        let mut jitter = kernel.jitter;
        let chol = loop {
            match cholesky(&k, jitter) {
                Ok(l) => break l,
                Err(_) if jitter > 0.0 && jitter * 10.0 <= cfg.gp_max_jitter * (1.0 + 1e-12) => {
                    jitter *= 10.0;
                    log::debug!("GP Gram factorization failed, jitter raised to {jitter:e}");
                }
                Err(_) => return Err(Error::IllConditionedGram { jitter }),
            }
        };
        let mut alpha = cholesky_solve(&chol, targets);
        // Refinement with residuals accumulated in extended precision brings
        // α close to full accuracy on ill-conditioned Gram matrices.
        for _ in 0..2 {
            let r: Vec<f64> = (0..alpha.len())
                .map(|i| targets[i] - compensated_dot(k.as_matrix().row_slice(i), &alpha) - jitter * alpha[i])
                .collect();
            let d = cholesky_solve(&chol, &r);
            alpha.iter_mut().zip(&d).for_each(|(a, d)| *a += d);
        }
        Ok(Self {
            kernel: kernel.clone(),
            inputs: inputs.to_vec(),
            targets: targets.to_vec(),
            chol,
            alpha,
            jitter_used: jitter,
        })
    }

    pub fn from_snapshot(s: &GpSnapshot, cfg: &NumericsConfig) -> Result<Self> {
        Self::fit(&s.inputs, &s.targets, &s.kernel, cfg)
    }

    pub fn snapshot(&self) -> GpSnapshot {
        GpSnapshot { kernel: self.kernel.clone(), inputs: self.inputs.clone(), targets: self.targets.clone() }
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Jitter actually added after escalation.
    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Posterior mean and variance (variance clamped at 0).
    pub fn predict(&self, p: &[f64]) -> (f64, f64) {
        let k: Vec<f64> = self.inputs.iter().map(|x| self.kernel.eval(x, p)).collect();
        let mu = compensated_dot(&k, &self.alpha);
        let v = forward_substitute(&self.chol, &k);
        let var = self.kernel.amplitude() - v.iter().map(|x| x * x).sum::<f64>();
        (mu, var.max(0.0))
    }

    /// `−½𝒥ᵀα − Σ log Lᵢᵢ − (j/2) log 2π`.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let quad: f64 = self.targets.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let logdet: f64 = (0..self.len()).map(|i| self.chol[(i, i)].ln()).sum();
        -0.5 * quad - logdet - 0.5 * self.len() as f64 * LN_2PI
    }

    /// Gradient of the log marginal likelihood with respect to
    /// [`KernelSpec::log_params`], `½ tr((ααᵀ − K⁻¹) ∂K/∂θ)`.
    pub fn log_marginal_likelihood_gradient(&self) -> Vec<f64> {
        let n = self.len();
        let kinv = cholesky_inverse(&self.chol);
        let ks = &self.kernel;
        let iso = ks.lengthscales.len() == 1;
        let mut grad = vec![0.0; 1 + ks.lengthscales.len()];
        for i in 0..n {
            for j in 0..=i {
                let w = self.alpha[i] * self.alpha[j] - kinv[(i, j)];
                let w = if i == j { 0.5 * w } else { w };
                let (pi, pj) = (&self.inputs[i], &self.inputs[j]);
                let r2 = ks.r2(pi, pj);
                grad[0] += w * ks.amplitude_order() * ks.amplitude() * ks.shape(r2);
                let f = ks.lengthscale_factor(r2);
                if iso {
                    grad[1] += w * f * r2;
                } else {
                    for d in 0..pi.len() {
                        let z = (pi[d] - pj[d]) / ks.lengthscales[d];
                        grad[1 + d] += w * f * z * z;
                    }
                }
            }
        }
        grad
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperOptions {
    pub n_starts: usize,
    /// One length-scale per input dimension.
    pub ard: bool,
    pub max_iterations: usize,
}

impl Default for HyperOptions {
    fn default() -> Self {
        Self { n_starts: 5, ard: true, max_iterations: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperFit {
    pub kernel: KernelSpec,
    pub log_likelihood: f64,
    /// No start converged; the best evaluated point is returned.
    pub warning: bool,
}

/// Multi-start BFGS on the log marginal likelihood in log-hyperparameter
/// space, within [`SIGMA0_BOUNDS`] and [`LENGTHSCALE_BOUNDS`]. The first
/// start is a data-driven heuristic, the rest are drawn from `rng`.
pub fn optimize_hyperparameters(
    inputs: &[Vec<f64>],
    targets: &[f64],
    template: &KernelSpec,
    opts: &HyperOptions,
    rng: &mut Rng,
    cfg: &NumericsConfig,
) -> Result<HyperFit> {
    optimize_hyperparameters_from(inputs, targets, template, opts, &[], rng, cfg)
}

/// As [`optimize_hyperparameters`], with extra starting kernels (for example
/// the previous optimum when the data grow by one point).
pub fn optimize_hyperparameters_from(
    inputs: &[Vec<f64>],
    targets: &[f64],
    template: &KernelSpec,
    opts: &HyperOptions,
    warm: &[KernelSpec],
    rng: &mut Rng,
    cfg: &NumericsConfig,
) -> Result<HyperFit> {
    if inputs.len() < 2 || inputs.len() != targets.len() {
        return invalid("hyperparameter optimization needs j ≥ 2 data points");
    }
    if opts.n_starts == 0 {
        return invalid("at least one optimizer start is required");
    }
    let dim = inputs[0].len();
    let n_ls = if opts.ard { dim } else { 1 };
    let (s_lo, s_hi) = (SIGMA0_BOUNDS.0.ln(), SIGMA0_BOUNDS.1.ln());
    let (l_lo, l_hi) = (LENGTHSCALE_BOUNDS.0.ln(), LENGTHSCALE_BOUNDS.1.ln());
    let lo: Vec<f64> = std::iter::once(s_lo).chain(std::iter::repeat(l_lo).take(n_ls)).collect();
    let hi: Vec<f64> = std::iter::once(s_hi).chain(std::iter::repeat(l_hi).take(n_ls)).collect();

    let second = targets.iter().map(|y| y * y).sum::<f64>() / targets.len() as f64;
    let spread = |d: usize| {
        let (mn, mx) = inputs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p[d]), b.max(p[d])));
        if mx > mn {
            mx - mn
        } else {
            1.0
        }
    };
    let ranges: Vec<f64> = if opts.ard {
        (0..dim).map(spread).collect()
    } else {
        vec![(0..dim).map(spread).fold(0.0, f64::max)]
    };
    let amp = second.max(1e-12);
    let sigma0 = if template.amplitude_order() == 2.0 { amp.sqrt() } else { amp };
    let mut starts = vec![std::iter::once(sigma0.ln()).chain(ranges.iter().map(|r| (0.5 * r).ln())).collect::<Vec<f64>>()];
    for _ in 1..opts.n_starts {
        let mut t = vec![sigma0.ln() + rng.gen_range(-2.0..2.0) * std::f64::consts::LN_10];
        t.extend(ranges.iter().map(|r| r.ln() + rng.gen_range(-2.0..1.0) * std::f64::consts::LN_10));
        starts.push(t);
    }
    starts.extend(warm.iter().filter(|k| k.lengthscales.len() == n_ls).map(|k| {
        k.log_params().iter().zip(lo.iter().zip(&hi)).map(|(v, (l, h))| v.clamp(*l, *h)).collect()
    }));

    let objective = |theta: &[f64]| -> Option<(f64, Vec<f64>)> {
        let spec = template.with_log_params(theta);
        let m = GpModel::fit(inputs, targets, &spec, cfg).ok()?;
        let g = m.log_marginal_likelihood_gradient();
        Some((-m.log_marginal_likelihood(), g.into_iter().map(|v| -v).collect()))
    };
    let bfgs = BfgsOptions { max_iterations: opts.max_iterations, gradient_tol: 1e-5, value_tol: 1e-10 };
    let runs: Vec<_> = starts
        .par_iter()
        .map(|s| minimize_bounded(objective, s, &lo, &hi, &bfgs))
        .collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut any_converged = false;
    for r in runs.into_iter().flatten() {
        any_converged |= r.converged;
        if r.value.is_finite() && best.as_ref().map_or(true, |b| r.value < b.0) {
            best = Some((r.value, r.x));
        }
    }
    let (value, theta) = best.ok_or(Error::IllConditionedGram { jitter: cfg.gp_max_jitter })?;
    if !any_converged {
        log::warn!("no hyperparameter start converged; using the best evaluated point");
    }
    Ok(HyperFit { kernel: template.with_log_params(&theta), log_likelihood: -value, warning: !any_converged })
}
