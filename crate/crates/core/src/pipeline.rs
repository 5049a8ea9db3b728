//! End-to-end observer workflow: configuration, the three phases as
//! commands, run artifacts, and the Van der Pol scenario.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bayes::{DivergencePolicy, LearningConfig, LearningState, ObserverLearning};
use crate::error::{Error, Result};
use crate::linalg::{min_eig, Matrix, SymMatrix};
use crate::lipschitz::{
    analytic_lipschitz_bound, jacobian_lipschitz_bound, sampled_lipschitz_estimate, BoxDomain, GridOptions,
};
use crate::lmi::{
    build_redesign_problem, line_search_lipschitz, solve_design, verify_certificate, CertificateReport, LmiSolution,
    SearchMethod,
};
use crate::rng::stream;
use crate::system::{
    simulate_closed_loop, van_der_pol_model, BasisExpansion, Nonlinearity, ObserverConfig, RewardSpec, SystemModel,
    Trajectory, VdpEncoding,
};
use crate::NumericsConfig;

pub const CONFIG_VERSION: u32 = 1;

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

/// Where the learned model enters the observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverChannel {
    /// `φ̂ = pᵀψ` is added to the affected state directly.
    #[default]
    Direct,
    /// `φ̂ = B pᵀψ`: the expansion is scaled by the input column (`−τ`).
    Input,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemSpec {
    /// Euler-discretized Van der Pol benchmark with its Legendre basis.
    Vdp {
        tau: f64,
        #[serde(default)]
        encoding: VdpEncoding,
        #[serde(default)]
        observer_channel: ObserverChannel,
        #[serde(default = "one")]
        phi_bound: f64,
    },
    /// Explicit matrices; the basis must then be given in `basis`.
    Matrices {
        a: Matrix,
        b: Matrix,
        c: Matrix,
        cq: Matrix,
        #[serde(default)]
        true_phi: Option<Nonlinearity>,
        #[serde(default = "one")]
        phi_bound: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignSpec {
    pub lipschitz_range: [f64; 2],
    pub tol: f64,
    pub method: SearchMethod,
    pub lambda_kappa: f64,
}

impl Default for DesignSpec {
    fn default() -> Self {
        Self { lipschitz_range: [0.0, 10.0], tol: 1e-2, method: SearchMethod::Golden, lambda_kappa: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    pub w1: Matrix,
    /// Identity of size `n_p` when absent.
    #[serde(default)]
    pub w2: Option<Matrix>,
    /// `p̄⋆·1` when absent.
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
    #[serde(default)]
    pub t_star: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// `‖p_∞‖ · max ‖∇ψ‖` over the grid.
    #[default]
    Analytic,
    /// `max ‖∇φ̂‖` over the grid.
    Jacobian,
    /// Pairwise slopes of `φ̂`.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedesignSpec {
    pub estimator: Estimator,
    /// Use this Lipschitz value instead of estimating one.
    pub lipschitz: Option<f64>,
    /// `[−5, 5]^{n_q}` when absent.
    #[serde(rename = "box")]
    pub domain: Option<BoxDomain>,
    pub grid: GridOptions,
    pub n_pairs: usize,
    pub inflation: f64,
    /// Coefficient bound of the redesign conditions; `p̄⋆` when absent.
    pub p_bar: Option<f64>,
    pub lambda_kappa: f64,
}

impl Default for RedesignSpec {
    fn default() -> Self {
        Self {
            estimator: Estimator::Analytic,
            lipschitz: None,
            domain: None,
            grid: GridOptions::default(),
            n_pairs: 100_000,
            inflation: 1.1,
            p_bar: None,
            lambda_kappa: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub system: SystemSpec,
    #[serde(default)]
    pub basis: Option<BasisExpansion>,
    /// Coefficient bound `p̄⋆`.
    pub p_bar: f64,
    pub x0: Vec<f64>,
    pub x0_hat: Vec<f64>,
    /// Input sequence; missing entries are zero.
    #[serde(default)]
    pub inputs: Vec<Vec<f64>>,
    /// Batch length `T_ℓ` in steps, also used for the reported simulations.
    pub horizon: usize,
    #[serde(default)]
    pub design: DesignSpec,
    pub reward: RewardConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub redesign: RedesignSpec,
    /// Reported error energies are also given from this step on, to separate
    /// the initial transient.
    #[serde(default)]
    pub report_from: usize,
    #[serde(default)]
    pub numerics: NumericsConfig,
    /// Root seed; overrides `learning.seed`.
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// The Van der Pol scenario: τ = 0.01, T_ℓ = 4000 steps (40 s), p̄⋆ = 1e-2,
    /// W₁ = 200, W₂ = I, ε_EI = 0.01, N = 200, M = 1000, ℚ = [−5, 5]², golden
    /// section over 𝔏 ∈ [0, 10], x₀ = (1, 1), x̂₀ = 0.
    pub fn vdp_default(seed: u64) -> Self {
        Self {
            version: CONFIG_VERSION,
            system: SystemSpec::Vdp {
                tau: 0.01,
                encoding: VdpEncoding::TruePhi,
                observer_channel: ObserverChannel::Input,
                phi_bound: 1.0,
            },
            basis: None,
            p_bar: 1e-2,
            x0: vec![1.0, 1.0],
            x0_hat: vec![0.0, 0.0],
            inputs: Vec::new(),
            horizon: 4000,
            design: DesignSpec::default(),
            reward: RewardConfig { w1: Matrix::from_diag(&[200.0]), w2: None, anchor: None, t_star: 0 },
            learning: LearningConfig {
                samples_per_iteration: 1000,
                max_iterations: 200,
                eps_ei: 0.01,
                divergence: DivergencePolicy::Penalize,
                ..LearningConfig::default()
            },
            redesign: RedesignSpec::default(),
            report_from: 100,
            numerics: NumericsConfig::default(),
            seed,
        }
    }

    /// Validates everything and builds the system, basis and reward.
    pub fn build(&self) -> Result<Scenario> {
        if self.version != CONFIG_VERSION {
            return config_err(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        let cfg_err = |e: Error| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        };
        let (sys, basis) = match &self.system {
            SystemSpec::Vdp { tau, encoding, observer_channel, phi_bound } => {
                let (sys, mut basis) = van_der_pol_model(*tau, *encoding, self.p_bar, *phi_bound).map_err(cfg_err)?;
                if *observer_channel == ObserverChannel::Input {
                    basis.scale *= -tau;
                }
                if let Some(b) = &self.basis {
                    basis = b.clone();
                }
                (sys, basis)
            }
            SystemSpec::Matrices { a, b, c, cq, true_phi, phi_bound } => {
                let sys = SystemModel::new(a.clone(), b.clone(), c.clone(), cq.clone(), true_phi.clone(), *phi_bound)
                    .map_err(cfg_err)?;
                let Some(basis) = self.basis.clone() else {
                    return config_err("a matrices system needs an explicit basis");
                };
                (sys, basis)
            }
        };
        basis.validate().map_err(cfg_err)?;
        if basis.n_x != sys.n_x() || basis.n_q != sys.n_q() {
            return config_err("basis dimensions do not match the system");
        }
        if sys.true_phi.is_none() {
            return config_err("the plant needs a ground-truth nonlinearity to be simulated");
        }
        let n_x = sys.n_x();
        let n_p = basis.num_coefficients();
        if !(self.p_bar > 0.0 && self.p_bar.is_finite()) {
            return config_err("p_bar must be positive");
        }
        if self.x0.len() != n_x || self.x0_hat.len() != n_x || !self.x0.iter().chain(&self.x0_hat).all(|v| v.is_finite()) {
            return config_err(format!("x0 and x0_hat must be finite vectors of length {n_x}"));
        }
        if self.inputs.iter().any(|u| u.len() != sys.n_u()) {
            return config_err(format!("every input must have length {}", sys.n_u()));
        }
        if self.horizon == 0 {
            return config_err("horizon must be at least one step");
        }
        let [lo, hi] = self.design.lipschitz_range;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) || !(self.design.tol > 0.0) || !(self.design.lambda_kappa >= 0.0) {
            return config_err("design needs 0 ≤ lo ≤ hi, tol > 0 and lambda_kappa ≥ 0");
        }
        let r = &self.reward;
        if r.w1.shape() != (sys.n_y(), sys.n_y()) {
            return config_err(format!("w1 must be {0}×{0}", sys.n_y()));
        }
        let w1 = SymMatrix::new(r.w1.clone()).map_err(cfg_err)?;
        if !(min_eig(&w1).map_err(cfg_err)? > 0.0) {
            return config_err("w1 must be positive definite");
        }
        let w2 = r.w2.clone().unwrap_or_else(|| Matrix::identity(n_p));
        if w2.shape() != (n_p, n_p) {
            return config_err(format!("w2 must be {n_p}×{n_p}"));
        }
        let w2s = SymMatrix::new(w2.clone()).map_err(cfg_err)?;
        if min_eig(&w2s).map_err(cfg_err)? < -1e-12 {
            return config_err("w2 must be positive semidefinite");
        }
        let anchor = r.anchor.clone().unwrap_or_else(|| vec![self.p_bar; n_p]);
        if anchor.len() != n_p {
            return config_err(format!("anchor must have length {n_p}"));
        }
        if r.t_star >= self.horizon {
            return config_err("t_star must be below the horizon");
        }
        if self.report_from >= self.horizon {
            return config_err("report_from must be below the horizon");
        }
        let mut learning = self.learning.clone();
        learning.seed = self.seed;
        learning.validate().map_err(cfg_err)?;
        if let Some(b) = &learning.candidate_box {
            if b.dim() != n_p {
                return config_err(format!("candidate box must have dimension {n_p}"));
            }
        }
        if let Some(p0) = &learning.p0 {
            if p0.len() != n_p {
                return config_err(format!("p0 must have length {n_p}"));
            }
        }
        let rd = &self.redesign;
        let domain = match &rd.domain {
            Some(d) => d.clone(),
            None => BoxDomain::symmetric(5.0, sys.n_q()).map_err(cfg_err)?,
        };
        domain.validate().map_err(cfg_err)?;
        if domain.dim() != sys.n_q() {
            return config_err(format!("redesign box must have dimension {}", sys.n_q()));
        }
        if rd.grid.cells == 0 || !(rd.grid.safety_factor >= 1.0) || rd.n_pairs == 0 || !(rd.inflation >= 1.0) {
            return config_err("redesign estimator options out of range");
        }
        if rd.lipschitz.is_some_and(|l| !(l >= 0.0 && l.is_finite())) || rd.p_bar.is_some_and(|p| !(p > 0.0 && p.is_finite())) {
            return config_err("redesign lipschitz must be ≥ 0 and p_bar > 0");
        }
        if !(rd.lambda_kappa >= 0.0) {
            return config_err("redesign lambda_kappa must be ≥ 0");
        }
        let n = &self.numerics;
        if !(n.divergence_guard > 0.0 && n.kappa_zero_tol > 0.0 && n.lmi_residual_tol > 0.0 && n.gp_jitter >= 0.0 && n.gp_max_jitter >= n.gp_jitter) {
            return config_err("numerics tolerances out of range");
        }
        Ok(Scenario {
            config: self.clone(),
            sys,
            basis,
            reward: RewardSpec { w1: r.w1.clone(), w2, anchor, horizon: self.horizon, t_star: r.t_star },
            learning,
            redesign_box: domain,
        })
    }
}

/// A validated configuration with its derived objects.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: PipelineConfig,
    pub sys: SystemModel,
    pub basis: BasisExpansion,
    pub reward: RewardSpec,
    pub learning: LearningConfig,
    pub redesign_box: BoxDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Artifact {
    pub lipschitz: f64,
    pub p_bar: f64,
    pub solution: LmiSolution,
    pub report: CertificateReport,
    /// `(𝔏, κ₀, accepted)` for every line-search probe.
    pub probes: Vec<(f64, f64, bool)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase3Artifact {
    pub estimator: Estimator,
    /// Lipschitz estimate of the learned model used for the redesign.
    pub lipschitz: f64,
    pub p_bar: f64,
    pub p_final: Vec<f64>,
    /// The redesign conditions hold and the certificate verifies.
    pub feasible: bool,
    pub kappa0: f64,
    pub solution: Option<LmiSolution>,
    pub report: Option<CertificateReport>,
    /// Gain to use from now on: the redesigned one, or `L₀` when infeasible.
    pub gain: Matrix,
    pub note: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Initial,
    Learned,
    Redesigned,
}

impl Which {
    pub fn name(self) -> &'static str {
        match self {
            Which::Initial => "initial",
            Which::Learned => "learned",
            Which::Redesigned => "redesigned",
        }
    }

    fn file(self) -> String {
        format!("traj_{}.csv", self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub which: Which,
    /// `Σ_t ‖Cx̂_t − y_t‖²` over the whole horizon.
    pub energy: f64,
    /// Same sum from `report_from` on.
    pub energy_after_transient: f64,
    pub report_from: usize,
    pub final_error: f64,
    pub max_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config_sha256: String,
    pub seed: u64,
    /// Artifact file name to SHA-256.
    pub files: BTreeMap<String, String>,
}

pub const PHASE1_FILE: &str = "phase1.json";
pub const LEARNING_FILE: &str = "learning.json";
pub const TRACE_FILE: &str = "trace.csv";
pub const PHASE3_FILE: &str = "phase3.json";
pub const SUMMARY_FILE: &str = "summary.md";
pub const CONFIG_FILE: &str = "config.json";
pub const MANIFEST_FILE: &str = "manifest.json";

const ARTIFACTS: [&str; 9] = [
    CONFIG_FILE,
    PHASE1_FILE,
    TRACE_FILE,
    LEARNING_FILE,
    PHASE3_FILE,
    "traj_initial.csv",
    "traj_learned.csv",
    "traj_redesigned.csv",
    SUMMARY_FILE,
];

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(fs::read(path)?)))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Precondition(format!("missing artifact {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rewrites the manifest from the artifacts present in `dir`.
pub fn write_manifest(sc: &Scenario, dir: &Path) -> Result<Manifest> {
    let mut files = BTreeMap::new();
    for name in ARTIFACTS {
        let path = dir.join(name);
        if path.exists() {
            files.insert(name.to_string(), sha256_file(&path)?);
        }
    }
    let m = Manifest { version: CONFIG_VERSION, config_sha256: sc.config.hash(), seed: sc.config.seed, files };
    write_json(dir, MANIFEST_FILE, &m)?;
    Ok(m)
}

fn finish(sc: &Scenario, dir: &Path) -> Result<()> {
    write_json(dir, CONFIG_FILE, &sc.config)?;
    write_manifest(sc, dir)?;
    Ok(())
}

/// Phase 1: line search over `𝔏`, certificate check, `phase1.json`.
pub fn cmd_design_initial(sc: &Scenario, out: &Path) -> Result<Phase1Artifact> {
    let d = &sc.config.design;
    let [lo, hi] = d.lipschitz_range;
    let ls = line_search_lipschitz(&sc.sys, sc.config.p_bar, lo, hi, d.tol, d.lambda_kappa, d.method, &sc.config.numerics)?;
    if !ls.report.passed {
        return Err(Error::NoDesign(format!("certificate at 𝔏 = {} failed verification", ls.lipschitz)));
    }
    let art = Phase1Artifact {
        lipschitz: ls.lipschitz,
        p_bar: sc.config.p_bar,
        solution: ls.solution,
        report: ls.report,
        probes: ls.probes,
    };
    write_json(out, PHASE1_FILE, &art)?;
    finish(sc, out)?;
    log::info!("initial design: 𝔏 = {:.6}, L₀ = {:?}", art.lipschitz, art.solution.l.as_slice());
    Ok(art)
}

/// Loads `phase1.json` and re-verifies its certificate against the scenario.
pub fn load_phase1(sc: &Scenario, out: &Path) -> Result<Phase1Artifact> {
    let art: Phase1Artifact = read_json(out, PHASE1_FILE)?;
    let rep = verify_certificate(&art.solution, &sc.sys, art.lipschitz, art.p_bar, &sc.config.numerics);
    if !rep.passed {
        return Err(Error::Precondition("phase-1 certificate does not re-verify for this configuration".into()));
    }
    Ok(art)
}

/// Loads `phase3.json`; a redesigned certificate must re-verify.
pub fn load_phase3(sc: &Scenario, out: &Path) -> Result<Phase3Artifact> {
    let art: Phase3Artifact = read_json(out, PHASE3_FILE)?;
    if art.feasible {
        let sol = art.solution.as_ref().ok_or_else(|| Error::Precondition("feasible redesign without solution".into()))?;
        let rep = verify_certificate(sol, &sc.sys, art.lipschitz, art.p_bar, &sc.config.numerics);
        if !rep.passed || sol.l != art.gain {
            return Err(Error::Precondition("phase-3 certificate does not re-verify for this configuration".into()));
        }
    }
    Ok(art)
}

pub fn load_learning(out: &Path) -> Result<LearningState> {
    read_json(out, LEARNING_FILE)
}

/// Phase 2: Bayesian optimization of the coefficients with `L₀`.
pub fn cmd_learn(sc: &Scenario, out: &Path) -> Result<LearningState> {
    let p1 = load_phase1(sc, out)?;
    let ol = ObserverLearning {
        sys: &sc.sys,
        gain: &p1.solution.l,
        template: &sc.basis,
        x0: &sc.config.x0,
        x0_hat: &sc.config.x0_hat,
        u: &sc.config.inputs,
        reward: &sc.reward,
    };
    let (_, state) = ol.run(&sc.learning, &sc.config.numerics)?;
    let mut csv = Vec::new();
    state.write_trace_csv(&mut csv)?;
    fs::write(out.join(TRACE_FILE), csv)?;
    write_json(out, LEARNING_FILE, &state)?;
    finish(sc, out)?;
    log::info!("learning: {} iterations ({:?}), best reward {}", state.iterations(), state.reason, state.incumbent);
    Ok(state)
}

/// Lipschitz estimate of the learned model with the configured estimator.
pub fn estimate_lipschitz(sc: &Scenario, learned: &BasisExpansion) -> Result<f64> {
    let rd = &sc.config.redesign;
    if let Some(l) = rd.lipschitz {
        return Ok(l);
    }
    match rd.estimator {
        Estimator::Analytic => Ok(analytic_lipschitz_bound(learned, &sc.redesign_box, &rd.grid)?.value),
        Estimator::Jacobian => Ok(jacobian_lipschitz_bound(learned, &sc.redesign_box, &rd.grid)?.value),
        Estimator::Sampled => {
            let mut rng = stream(sc.config.seed, "lipschitz");
            sampled_lipschitz_estimate(|q| learned.eval(q), &sc.redesign_box, rd.n_pairs, rd.inflation, &mut rng)
        }
    }
}

/// Phase 3: redesign the gain for the learned model. An infeasible redesign
/// keeps `L₀` and says so in the artifact.
pub fn cmd_redesign(sc: &Scenario, out: &Path) -> Result<Phase3Artifact> {
    let p1 = load_phase1(sc, out)?;
    let state = load_learning(out)?;
    let learned = sc.basis.with_coefficients(&state.p_final).map_err(|e| Error::Precondition(format!("learned coefficients: {e}")))?;
    let rd = &sc.config.redesign;
    let lip = estimate_lipschitz(sc, &learned)?;
    let p_bar = rd.p_bar.unwrap_or(sc.config.p_bar);
    let b_phi = sc.basis.selection_matrix();
    let attempt = build_redesign_problem(&sc.sys, lip, p_bar, &b_phi, rd.lambda_kappa)
        .and_then(|dp| solve_design(&dp, &sc.sys, &sc.config.numerics));
    let art = match attempt {
        Ok(sol) => {
            let rep = verify_certificate(&sol, &sc.sys, lip, p_bar, &sc.config.numerics);
            let exact = sol.is_exact(&sc.config.numerics);
            let feasible = exact && rep.passed;
            let note = if feasible {
                "redesigned gain certified".to_string()
            } else if !exact {
                format!("redesign conditions infeasible at 𝔏 = {lip:.6} (κ₀ = {:.3e}); keeping L₀", sol.kappa[0])
            } else {
                "redesign certificate failed verification; keeping L₀".to_string()
            };
            Phase3Artifact {
                estimator: rd.estimator,
                lipschitz: lip,
                p_bar,
                p_final: state.p_final.clone(),
                feasible,
                kappa0: sol.kappa[0],
                gain: if feasible { sol.l.clone() } else { p1.solution.l.clone() },
                solution: Some(sol),
                report: Some(rep),
                note,
            }
        }
        Err(e @ (Error::NoDesign(_) | Error::NoConvergence { .. })) => Phase3Artifact {
            estimator: rd.estimator,
            lipschitz: lip,
            p_bar,
            p_final: state.p_final.clone(),
            feasible: false,
            kappa0: f64::INFINITY,
            solution: None,
            report: None,
            gain: p1.solution.l.clone(),
            note: format!("redesign failed ({e}); keeping L₀"),
        },
        Err(e) => return Err(e),
    };
    write_json(out, PHASE3_FILE, &art)?;
    finish(sc, out)?;
    log::info!("redesign: {}", art.note);
    Ok(art)
}

/// Plant and observer over the horizon for the requested stage.
pub fn run_stage(sc: &Scenario, out: &Path, which: Which) -> Result<Trajectory> {
    let p1 = load_phase1(sc, out)?;
    let (gain, coeffs) = match which {
        Which::Initial => {
            let p0 = sc.learning.p0.clone().unwrap_or_else(|| vec![0.0; sc.basis.num_coefficients()]);
            (p1.solution.l, p0)
        }
        Which::Learned => (p1.solution.l, load_learning(out)?.p_final),
        Which::Redesigned => {
            let p3 = load_phase3(sc, out)?;
            (p3.gain, p3.p_final)
        }
    };
    let obs = ObserverConfig { gain, expansion: sc.basis.with_coefficients(&coeffs)?, x0_hat: sc.config.x0_hat.clone() };
    let tau = match sc.config.system {
        SystemSpec::Vdp { tau, .. } => tau,
        SystemSpec::Matrices { .. } => 1.0,
    };
    simulate_closed_loop(&sc.sys, &obs, &sc.config.x0, &sc.config.inputs, sc.config.horizon, tau, sc.config.numerics.divergence_guard)
}

pub fn summarize(sc: &Scenario, which: Which, tr: &Trajectory) -> SimulationSummary {
    SimulationSummary {
        which,
        energy: tr.output_error_energy(&sc.sys, 0),
        energy_after_transient: tr.output_error_energy(&sc.sys, sc.config.report_from),
        report_from: sc.config.report_from,
        final_error: tr.err_norm.last().copied().unwrap_or(0.0),
        max_error: tr.err_norm.iter().cloned().fold(0.0, f64::max),
    }
}

/// Simulates a stage and writes `traj_<which>.csv`.
pub fn cmd_simulate(sc: &Scenario, out: &Path, which: Which) -> Result<SimulationSummary> {
    let tr = run_stage(sc, out, which)?;
    let mut csv = Vec::new();
    tr.write_csv(&mut csv)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(which.file()), csv)?;
    finish(sc, out)?;
    Ok(summarize(sc, which, &tr))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub phase1: Phase1Artifact,
    pub iterations: usize,
    pub terminated: bool,
    pub p_final: Vec<f64>,
    pub phase3: Phase3Artifact,
    pub initial: SimulationSummary,
    pub learned: SimulationSummary,
    pub redesigned: SimulationSummary,
}

/// All phases in order, then `summary.md`.
pub fn run_all(sc: &Scenario, out: &Path) -> Result<RunReport> {
    let phase1 = cmd_design_initial(sc, out)?;
    let state = cmd_learn(sc, out)?;
    let phase3 = cmd_redesign(sc, out)?;
    let initial = cmd_simulate(sc, out, Which::Initial)?;
    let learned = cmd_simulate(sc, out, Which::Learned)?;
    let redesigned = cmd_simulate(sc, out, Which::Redesigned)?;
    let report = RunReport {
        phase1,
        iterations: state.iterations(),
        terminated: state.terminated,
        p_final: state.p_final.clone(),
        phase3,
        initial,
        learned,
        redesigned,
    };
    fs::write(out.join(SUMMARY_FILE), summary_markdown(sc, &report, &state))?;
    finish(sc, out)?;
    Ok(report)
}

/// Van der Pol scenario end to end.
pub fn cmd_reproduce_vdp(out: &Path, seed: u64) -> Result<RunReport> {
    run_all(&PipelineConfig::vdp_default(seed).build()?, out)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6e}")).collect();
    format!("[{}]", parts.join(", "))
}

pub fn summary_markdown(sc: &Scenario, r: &RunReport, state: &LearningState) -> String {
    let mut s = String::new();
    s.push_str("# Observer run summary\n\n");
    s.push_str(&format!("- config sha256: `{}`\n- seed: {}\n", sc.config.hash(), sc.config.seed));
    s.push_str(&format!(
        "- initial design: 𝔏 = {:.6}, L₀ = {}, κ₀ = {:.3e}, certificate passed: {}\n",
        r.phase1.lipschitz,
        fmt_vec(r.phase1.solution.l.as_slice()),
        r.phase1.solution.kappa[0],
        r.phase1.report.passed
    ));
    s.push_str(&format!(
        "- learning: {} iterations, {}, best reward {:.6}, divergent candidates {}\n",
        r.iterations,
        if r.terminated { "stopped on the EI threshold" } else { "stopped at the iteration cap" },
        state.incumbent,
        state.trace.iter().filter(|t| t.diverged).count()
    ));
    s.push_str(&format!("- p_∞ = {}\n", fmt_vec(&r.p_final)));
    s.push_str(&format!(
        "- redesign ({:?} estimate 𝔏 = {:.6}, p̄ = {:.3e}): {}; gain {}\n\n",
        r.phase3.estimator,
        r.phase3.lipschitz,
        r.phase3.p_bar,
        r.phase3.note,
        fmt_vec(r.phase3.gain.as_slice())
    ));
    s.push_str(&format!(
        "| stage | energy Σ‖Cx̂−y‖² | energy from t = {} | final ‖e‖ | max ‖e‖ |\n|---|---|---|---|---|\n",
        sc.config.report_from
    ));
    for m in [&r.initial, &r.learned, &r.redesigned] {
        s.push_str(&format!(
            "| {} | {:.6e} | {:.6e} | {:.6e} | {:.6e} |\n",
            m.which.name(),
            m.energy,
            m.energy_after_transient,
            m.final_error,
            m.max_error
        ));
    }
    s
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => 2,
        Error::NoDesign(_) | Error::Precondition(_) => 3,
        Error::LearningAbort(_) => 4,
        Error::Divergence { .. } => 5,
        _ => 1,
    }
}
