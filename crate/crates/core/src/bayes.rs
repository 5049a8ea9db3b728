//! Expected-improvement Bayesian optimization of the observer reward, and
//! regret diagnostics.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::{optimize_hyperparameters_from, GpModel, HyperOptions, KernelKind, KernelSpec};
use crate::rng::{substream, Rng};
use crate::system::{compute_reward, run_observer, simulate_plant, BasisExpansion, ObserverConfig, RewardSpec, SystemModel};
use crate::linalg::Matrix;
use crate::NumericsConfig;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `σγ(z) + (μ − 𝒥̂⋆)Γ(z)` with `z = (μ − 𝒥̂⋆)/σ`, and 0 when `σ = 0`.
/// `sigma` is the posterior standard deviation.
pub fn expected_improvement_from(mu: f64, sigma: f64, incumbent: f64) -> f64 {
    if !(sigma > 0.0) {
        return 0.0;
    }
    let d = mu - incumbent;
    let z = d / sigma;
    (sigma * normal_pdf(z) + d * normal_cdf(z)).max(0.0)
}

/// Anything that yields a posterior mean and variance.
pub trait Posterior: Sync {
    fn posterior(&self, p: &[f64]) -> (f64, f64);
}

impl Posterior for GpModel {
    fn posterior(&self, p: &[f64]) -> (f64, f64) {
        self.predict(p)
    }
}

pub fn expected_improvement<M: Posterior + ?Sized>(model: &M, p: &[f64], incumbent: f64) -> f64 {
    let (mu, var) = model.posterior(p);
    expected_improvement_from(mu, var.sqrt(), incumbent)
}

/// Axis-aligned candidate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl CandidateBox {
    /// `[−b, b]^n`.
    pub fn symmetric(bound: f64, n: usize) -> Self {
        Self { lower: vec![-bound; n], upper: vec![bound; n] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty()
            || self.lower.len() != self.upper.len()
            || self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u && l.is_finite() && u.is_finite()))
        {
            return invalid("candidate box needs finite bounds with lower ≤ upper");
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.gen_range(l..u) } else { l })
            .collect()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim() && p.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (l, u))| l <= v && v <= u)
    }

    fn to_unit(&self, p: &[f64]) -> Vec<f64> {
        p.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| if u > l { (v - l) / (u - l) } else { 0.0 })
            .collect()
    }
}

/// GP on unit-cube inputs and standardized targets, reported in the
/// original units.
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub model: GpModel,
    pub domain: CandidateBox,
    pub y_mean: f64,
    pub y_scale: f64,
}

impl Posterior for Surrogate {
    fn posterior(&self, p: &[f64]) -> (f64, f64) {
        let (mu, var) = self.model.predict(&self.domain.to_unit(p));
        (self.y_mean + self.y_scale * mu, self.y_scale * self.y_scale * var)
    }
}

#[derive(Debug, Clone)]
pub struct Proposal {
    pub p: Vec<f64>,
    pub ei: f64,
    pub index: usize,
    /// Every sampled EI was zero.
    pub all_zero: bool,
    pub samples: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

/// EI maximizer over `m` uniform samples; ties go to the lowest index.
pub fn propose_next<M: Posterior + ?Sized>(model: &M, domain: &CandidateBox, m: usize, incumbent: f64, rng: &mut Rng) -> Result<Proposal> {
    if m == 0 {
        return invalid("at least one candidate sample is required");
    }
    domain.validate()?;
    let samples: Vec<Vec<f64>> = (0..m).map(|_| domain.sample(rng)).collect();
    let values: Vec<f64> = samples.par_iter().map(|p| expected_improvement(model, p, incumbent)).collect();
    let mut index = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[index] {
            index = i;
        }
    }
    Ok(Proposal {
        p: samples[index].clone(),
        ei: values[index],
        index,
        all_zero: values.iter().all(|v| *v == 0.0),
        samples,
        values,
    })
}

/// `max EI < ε` over the given candidates (strict, as the rule is `EI < ε` for all `p`).
pub fn should_terminate<M: Posterior + ?Sized>(model: &M, candidates: &[Vec<f64>], incumbent: f64, eps_ei: f64) -> bool {
    let max = candidates
        .par_iter()
        .map(|p| expected_improvement(model, p, incumbent))
        .reduce(|| f64::NEG_INFINITY, f64::max);
    max < eps_ei
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IncumbentRule {
    /// Best observed reward.
    #[default]
    Observed,
    /// Largest surrogate mean over the iteration's candidate samples.
    Surrogate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergencePolicy {
    /// Abort learning on the first divergent observer run.
    #[default]
    Abort,
    /// Record the divergent candidate with a penalty reward below every
    /// non-divergent one; it never becomes the incumbent.
    Penalize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalChoice {
    /// Best evaluated coefficients.
    #[default]
    Incumbent,
    /// The last proposal.
    LastProposal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Candidate set; empty means `[−p̄⋆, p̄⋆]^{n_p}` from the basis bound.
    pub candidate_box: Option<CandidateBox>,
    pub samples_per_iteration: usize,
    pub max_iterations: usize,
    pub eps_ei: f64,
    pub seed: u64,
    pub kernel: KernelKind,
    pub square_matern_amplitude: bool,
    pub hyper: HyperOptions,
    pub incumbent: IncumbentRule,
    pub divergence: DivergencePolicy,
    pub final_choice: FinalChoice,
    /// Initial coefficients; zero when absent.
    pub p0: Option<Vec<f64>>,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            candidate_box: None,
            samples_per_iteration: 1000,
            max_iterations: 200,
            eps_ei: 0.01,
            seed: 0,
            kernel: KernelKind::Matern52,
            square_matern_amplitude: false,
            hyper: HyperOptions::default(),
            incumbent: IncumbentRule::Observed,
            divergence: DivergencePolicy::Abort,
            final_choice: FinalChoice::Incumbent,
            p0: None,
        }
    }
}

impl LearningConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_iteration == 0 || self.max_iterations == 0 {
            return invalid("learning needs M ≥ 1 samples and N ≥ 1 iterations");
        }
        if !(self.eps_ei >= 0.0) {
            return invalid("ε_EI must be non-negative");
        }
        if let Some(b) = &self.candidate_box {
            b.validate()?;
        }
        if self.hyper.n_starts == 0 {
            return invalid("at least one hyperparameter start is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    EiBelowThreshold,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub p: Vec<f64>,
    pub reward: f64,
    pub diverged: bool,
    pub incumbent: f64,
    /// Largest EI over this iteration's candidates.
    pub max_ei: f64,
    pub sigma0: f64,
    pub lengthscales: Vec<f64>,
    pub hyper_warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningState {
    pub seed: u64,
    /// `(p_j, 𝒥(p_j))` in evaluation order.
    pub dataset: Vec<(Vec<f64>, f64)>,
    pub incumbent: f64,
    pub incumbent_p: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub terminated: bool,
    pub reason: TerminationReason,
    /// Last proposal (not evaluated when learning stops).
    pub last_proposal: Vec<f64>,
    /// Selected coefficients `p_∞`.
    pub p_final: Vec<f64>,
}

impl LearningState {
    pub fn iterations(&self) -> usize {
        self.dataset.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.dataset.iter().map(|d| d.1).collect()
    }

    /// CSV with one row per iteration.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n_p = self.trace.first().map_or(0, |r| r.p.len());
        let n_l = self.trace.first().map_or(0, |r| r.lengthscales.len());
        let mut header: Vec<String> = ["iteration", "reward", "incumbent", "max_ei", "diverged", "sigma0"].iter().map(|s| s.to_string()).collect();
        header.extend((1..=n_l).map(|i| format!("ell{i}")));
        header.extend((1..=n_p).map(|i| format!("p{i}")));
        writeln!(w, "{}", header.join(","))?;
        for r in &self.trace {
            let mut row = vec![
                r.iteration.to_string(),
                r.reward.to_string(),
                r.incumbent.to_string(),
                r.max_ei.to_string(),
                u8::from(r.diverged).to_string(),
                r.sigma0.to_string(),
            ];
            row.extend(r.lengthscales.iter().map(f64::to_string));
            row.extend(r.p.iter().map(f64::to_string));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn fit_surrogate(
    data: &[(Vec<f64>, f64)],
    domain: &CandidateBox,
    template: &KernelSpec,
    warm: Option<&KernelSpec>,
    cfg: &LearningConfig,
    j: usize,
    numerics: &NumericsConfig,
) -> Result<(Surrogate, bool)> {
    let xs: Vec<Vec<f64>> = data.iter().map(|d| domain.to_unit(&d.0)).collect();
    let ys: Vec<f64> = data.iter().map(|d| d.1).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let var = ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / ys.len() as f64;
    let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
    let zs: Vec<f64> = ys.iter().map(|y| (y - mean) / scale).collect();
    let (kernel, warning) = if xs.len() >= 2 {
        let mut rng = substream(cfg.seed, "hyperparameters", j as u64);
        let warm: Vec<KernelSpec> = warm.into_iter().cloned().collect();
        let fit = optimize_hyperparameters_from(&xs, &zs, template, &cfg.hyper, &warm, &mut rng, numerics)?;
        (fit.kernel, fit.warning)
    } else {
        (template.clone(), false)
    };
    let model = GpModel::fit(&xs, &zs, &kernel, numerics)?;
    Ok((Surrogate { model, domain: domain.clone(), y_mean: mean, y_scale: scale }, warning))
}

/// Generic GP-EI loop maximizing `objective` over `domain`.
///
/// Iteration `j` evaluates `p_j`, refits the surrogate (hyperparameters
/// re-optimized each time), draws `M` candidates, proposes their EI
/// maximizer and stops when the largest EI is below `ε_EI` or after `N`
/// evaluations. Divergence errors from the objective follow `cfg.divergence`.
pub fn run_bo<F>(mut objective: F, domain: &CandidateBox, cfg: &LearningConfig, numerics: &NumericsConfig) -> Result<LearningState>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    cfg.validate()?;
    domain.validate()?;
    let n_p = domain.dim();
    let p0 = cfg.p0.clone().unwrap_or_else(|| vec![0.0; n_p]);
    if p0.len() != n_p {
        return invalid("p0 has the wrong dimension");
    }
    let mut template = KernelSpec::new(cfg.kernel, 1.0, vec![0.5; if cfg.hyper.ard { n_p } else { 1 }])?;
    template.square_matern_amplitude = cfg.square_matern_amplitude;
    template.jitter = numerics.gp_jitter;

    let mut data: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut trace = Vec::new();
    let mut p = p0;
    let mut warm: Option<KernelSpec> = None;
    let mut reason = TerminationReason::MaxIterations;
    let mut terminated = false;
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut finite: Vec<f64> = Vec::new();
    for j in 0..cfg.max_iterations {
        let (reward, diverged) = match objective(&p) {
            Ok(r) if r.is_finite() => (r, false),
            Ok(_) | Err(Error::Divergence { .. }) if cfg.divergence == DivergencePolicy::Penalize && !finite.is_empty() => {
                let pen = penalty(&finite);
                log::debug!("iteration {j}: candidate diverged, penalized with {pen}");
                (pen, true)
            }
            Ok(r) => {
                return Err(Error::LearningAbort(format!("iteration {j}: non-finite reward {r}")));
            }
            Err(Error::Divergence { step, norm }) => {
                return Err(Error::LearningAbort(format!(
                    "iteration {j}: observer diverged at step {step} (norm {norm:e}); the ISS premise does not hold for this candidate"
                )));
            }
            Err(e) => return Err(e),
        };
        if !diverged {
            finite.push(reward);
            if reward > best.0 {
                best = (reward, p.clone());
            }
        }
        data.push((p.clone(), reward));

        let (sur, hyper_warning) = fit_surrogate(&data, domain, &template, warm.as_ref(), cfg, j, numerics)
            .map_err(|e| Error::LearningAbort(format!("iteration {j}: surrogate fit failed: {e}")))?;
        warm = Some(sur.model.kernel().clone());
        let mut rng = substream(cfg.seed, "candidates", j as u64);
        let samples: Vec<Vec<f64>> = (0..cfg.samples_per_iteration).map(|_| domain.sample(&mut rng)).collect();
        let incumbent = match cfg.incumbent {
            IncumbentRule::Observed => best.0,
            IncumbentRule::Surrogate => samples
                .par_iter()
                .map(|s| sur.posterior(s).0)
                .reduce(|| f64::NEG_INFINITY, f64::max),
        };
        let values: Vec<f64> = samples.par_iter().map(|s| expected_improvement(&sur, s, incumbent)).collect();
        let mut idx = 0;
        for (i, v) in values.iter().enumerate() {
            if *v > values[idx] {
                idx = i;
            }
        }
        let max_ei = values[idx];
        let k = sur.model.kernel();
        trace.push(TraceRow {
            iteration: j,
            p: p.clone(),
            reward,
            diverged,
            incumbent: best.0,
            max_ei,
            sigma0: k.sigma0,
            lengthscales: k.lengthscales.clone(),
            hyper_warning,
        });
        p = samples[idx].clone();
        if max_ei < cfg.eps_ei {
            terminated = true;
            reason = TerminationReason::EiBelowThreshold;
            break;
        }
    }
    let p_final = match cfg.final_choice {
        FinalChoice::Incumbent => best.1.clone(),
        FinalChoice::LastProposal => p.clone(),
    };
    Ok(LearningState {
        seed: cfg.seed,
        dataset: data,
        incumbent: best.0,
        incumbent_p: best.1,
        trace,
        terminated,
        reason,
        last_proposal: p,
        p_final,
    })
}

/// Reward assigned to a divergent candidate: below the worst non-divergent
/// reward by the observed spread (at least `|worst|`), so penalties neither
/// coincide with real data nor compound.
fn penalty(finite: &[f64]) -> f64 {
    let worst = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let best = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    worst - (best - worst).max(worst.abs()).max(1e-12)
}

/// Batch setting for learning the observer model: every evaluation restarts
/// plant and observer from `x0`, `x0_hat`.
#[derive(Debug, Clone)]
pub struct ObserverLearning<'a> {
    pub sys: &'a SystemModel,
    pub gain: &'a Matrix,
    pub template: &'a BasisExpansion,
    pub x0: &'a [f64],
    pub x0_hat: &'a [f64],
    pub u: &'a [Vec<f64>],
    pub reward: &'a RewardSpec,
}

impl ObserverLearning<'_> {
    /// Reward of the observer run with coefficients `p` against a fixed
    /// plant output sequence.
    pub fn reward_fn<'b>(&'b self, y: &'b [Vec<f64>], u: &'b [Vec<f64>], guard: f64) -> impl FnMut(&[f64]) -> Result<f64> + 'b {
        move |p: &[f64]| {
            let obs = ObserverConfig {
                gain: self.gain.clone(),
                expansion: self.template.with_coefficients(p)?,
                x0_hat: self.x0_hat.to_vec(),
            };
            let xh = run_observer(self.sys, &obs, y, u, guard)?;
            let yh: Vec<Vec<f64>> = xh.iter().map(|x| self.sys.c.matvec(x)).collect();
            compute_reward(y, &yh, p, self.reward)
        }
    }

    /// Runs the loop and returns `(p_∞, state)`.
    pub fn run(&self, cfg: &LearningConfig, numerics: &NumericsConfig) -> Result<(Vec<f64>, LearningState)> {
        let n = self.template.num_coefficients();
        let domain = cfg.candidate_box.clone().unwrap_or_else(|| CandidateBox::symmetric(self.template.bound, n));
        if domain.dim() != n {
            return invalid(format!("candidate box has dimension {}, the basis has {n} coefficients", domain.dim()));
        }
        let plant = simulate_plant(self.sys, self.x0, self.u, self.reward.horizon, numerics.divergence_guard)?;
        let state = run_bo(self.reward_fn(&plant.y, &plant.u, numerics.divergence_guard), &domain, cfg, numerics)?;
        Ok((state.p_final.clone(), state))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLog {
    pub instantaneous: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// `𝒥(p⋆) − 𝒥(p_j)` and its running sum.
pub fn cumulative_regret(rewards: &[f64], optimum: f64) -> RegretLog {
    let instantaneous: Vec<f64> = rewards.iter().map(|r| optimum - r).collect();
    let cumulative = instantaneous
        .iter()
        .scan(0.0, |acc, r| {
            *acc += r;
            Some(*acc)
        })
        .collect();
    RegretLog { instantaneous, cumulative }
}

/// `√(N ζ_N χ_N)` with `ζ_N = 2B + 300 χ_N log³(N/δ)`.
pub fn regret_bound(n: usize, b: f64, chi: f64, delta: f64) -> Result<f64> {
    if n == 0 || !(delta > 0.0 && delta < 1.0) || !(b > 0.0) || !(chi > 0.0) || !b.is_finite() || !chi.is_finite() {
        return invalid("regret bound needs N ≥ 1, δ ∈ (0,1), B > 0, χ > 0");
    }
    let zeta = 2.0 * b + 300.0 * chi * (n as f64 / delta).ln().powi(3);
    Ok((n as f64 * zeta * chi).sqrt())
}
