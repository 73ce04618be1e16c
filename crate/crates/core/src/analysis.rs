//! Density-ratio diagnostics: step-wise user generative error, local label
//! sensitivity, exact variance of the cumulative user weight and its
//! decomposition, the look-ahead bias factor, martingale checks, and
//! seeded Monte-Carlo estimates past the exact budget.
//!
//! Orientation: `ρ_t` and `W` are true over simulated (`P^{π_e} / P_sim`);
//! the bias factor of [`BiasReport`] is reported both ways.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::env::{
    derive_seed, rng_from_seed, sample_index, trajectory_probability, AgentPolicy, EnvironmentSpec, History, Symbol,
    Trajectory, EXACT_BUDGET,
};
use crate::error::{Error, Result};
use crate::labeling::PostHocLabeler;
use crate::simulators::{
    compose, parameterized_dynamics_kernel, trajectory_conditioned_kernel_in, ComposedMeasure, Control, GroundTruth,
    KernelKind, ParameterizedDynamics, SimPath, SimulatorKernel,
};

/// Tolerance on `E[ρ_t] = 1` and on the martingale property.
pub const MARTINGALE_TOL: f64 = 1e-10;
/// Tolerance on the bias-factor identity.
pub const BIAS_TOL: f64 = 1e-9;
/// Tolerance on direct variance versus its decomposition.
pub const DECOMPOSITION_TOL: f64 = 1e-8;
/// Paths per Monte-Carlo replicate.
pub const REPLICATE_SIZE: usize = 4096;
/// Effective sample size below which a Monte-Carlo estimate is flagged.
pub const MIN_EFFECTIVE_SAMPLES: f64 = 100.0;

/// Per-state statistics of `ρ_t` over the simulator's emission row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Stored kernel row `P_sim(e | h_{t-1}, z)`.
    pub simulated: Vec<f64>,
    /// True conditional under the evaluation policy.
    pub truth: Vec<f64>,
    /// True conditional under the policy the kernel stands for.
    pub reference: Vec<f64>,
    /// `ρ_t(e)`, zero where the kernel emits nothing.
    pub rho: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
}

/// A simulator evaluated under a shift from `behavior` to `evaluation`, at one
/// fixed control value. Step statistics are memoized per history.
#[derive(Debug)]
pub struct ShiftSetup<'a> {
    kernel: &'a SimulatorKernel,
    behavior: &'a AgentPolicy,
    evaluation: &'a AgentPolicy,
    control: Symbol,
    stats: RwLock<HashMap<History, Arc<StepStats>>>,
}

impl<'a> ShiftSetup<'a> {
    pub fn new(
        kernel: &'a SimulatorKernel,
        behavior: &'a AgentPolicy,
        evaluation: &'a AgentPolicy,
        control: Control,
    ) -> Result<Self> {
        let control = kernel.fixed_control(control)?;
        Ok(Self { kernel, behavior, evaluation, control, stats: RwLock::new(HashMap::new()) })
    }

    pub fn kernel(&self) -> &'a SimulatorKernel {
        self.kernel
    }

    pub fn behavior(&self) -> &'a AgentPolicy {
        self.behavior
    }

    pub fn evaluation(&self) -> &'a AgentPolicy {
        self.evaluation
    }

    pub fn control(&self) -> Symbol {
        self.control
    }

    /// The policy whose measure the kernel reproduces: the one it was fitted
    /// under, or the behavior policy for policy-free kernels.
    pub fn reference(&self) -> &'a AgentPolicy {
        self.kernel.trained_under().unwrap_or(self.behavior)
    }

    /// The simulated measure the weights are taken under.
    pub fn measure(&self) -> Result<ComposedMeasure<'a>> {
        compose(self.kernel, self.evaluation, Control::Fixed(self.control))
            .or_else(|_| compose(self.kernel, self.evaluation, Control::FromPrior))
    }

    pub fn step(&self, h: &History) -> Result<Arc<StepStats>> {
        if let Some(s) = self.stats.read().expect("step cache poisoned").get(h) {
            return Ok(Arc::clone(s));
        }
        let stats = Arc::new(self.compute_step(h)?);
        let mut guard = self.stats.write().expect("step cache poisoned");
        Ok(Arc::clone(guard.entry(h.clone()).or_insert(stats)))
    }

    fn compute_step(&self, h: &History) -> Result<StepStats> {
        let key = || self.kernel.shape().key(h);
        let simulated = self.kernel.emission_row(self.control, h)?.to_vec();
        let truth = self.kernel.truth().conditional(self.evaluation, self.control, h)?;
        let reference = self.kernel.truth().conditional(self.reference(), self.control, h)?;
        let mut rho = vec![0.0; simulated.len()];
        for e in 0..simulated.len() {
            if simulated[e] > 0.0 {
                if reference[e] <= 0.0 {
                    return Err(Error::SupportViolation(format!("simulator emits {e} at [{}] outside the reference support", key())));
                }
                rho[e] = truth[e] / reference[e];
            } else if truth[e] > 0.0 {
                return Err(Error::SupportViolation(format!(
                    "emission {e} at [{}] has true mass {} but no simulated mass",
                    key(),
                    truth[e]
                )));
            }
        }
        let mean: f64 = simulated.iter().zip(&rho).map(|(p, r)| p * r).sum();
        let variance: f64 = simulated.iter().zip(&rho).map(|(p, r)| p * (r - mean).powi(2)).sum();
        Ok(StepStats { simulated, truth, reference, rho, mean, variance })
    }

    fn check_budget(&self, steps: usize) -> Result<()> {
        let branching = (self.kernel.emission_width() * self.kernel.shape().agent.len()) as f64;
        let paths = branching.powi(steps as i32);
        if paths > EXACT_BUDGET {
            return Err(Error::BudgetExceeded { paths, budget: EXACT_BUDGET });
        }
        Ok(())
    }

    /// Depth-first walk over the simulated measure to `steps` completed
    /// steps. `visit(h, mass, log W_{t-1}, stats)` sees every node; leaves at
    /// depth `steps` get `None`.
    fn walk<F>(&self, steps: usize, visit: &mut F) -> Result<()>
    where
        F: FnMut(&History, f64, f64, Option<&StepStats>) -> Result<()>,
    {
        if steps > self.kernel.shape().horizon {
            return Err(Error::Invalid(format!("horizon {steps} exceeds the environment's {}", self.kernel.shape().horizon)));
        }
        self.check_budget(steps)?;
        let mut h = History::root();
        self.walk_from(&mut h, 1.0, 0.0, steps, visit)
    }

    fn walk_from<F>(&self, h: &mut History, mass: f64, log_w: f64, steps: usize, visit: &mut F) -> Result<()>
    where
        F: FnMut(&History, f64, f64, Option<&StepStats>) -> Result<()>,
    {
        if h.completed_steps() == steps {
            return visit(h, mass, log_w, None);
        }
        let stats = self.step(h)?;
        visit(h, mass, log_w, Some(&stats))?;
        for (e, &pe) in stats.simulated.iter().enumerate() {
            if pe <= 0.0 {
                continue;
            }
            h.push(self.kernel.user_of(e as Symbol));
            let arow = self.evaluation.action_row(h)?.to_vec();
            let next_w = log_w + stats.rho[e].ln();
            for (a, pa) in arow.into_iter().enumerate() {
                if pa > 0.0 {
                    h.push(a as Symbol);
                    self.walk_from(h, mass * pe * pa, next_w, steps, visit)?;
                    h.pop();
                }
            }
            h.pop();
        }
        Ok(())
    }
}

/// `ρ_t = M_t^{π_e}(u_t) / M_t^{π_b}(u_t)` for a post-hoc kernel, via the
/// belief tables of its world.
pub fn user_generative_error(
    kernel: &SimulatorKernel,
    behavior: &AgentPolicy,
    evaluation: &AgentPolicy,
    h: &History,
    u: Symbol,
    z: Symbol,
) -> Result<f64> {
    if kernel.user_row(z, h)?[u as usize] <= 0.0 {
        return Err(Error::SupportViolation(format!("kernel gives u={u} no mass at [{}]", kernel.shape().key(h))));
    }
    let truth = kernel.truth();
    let me = truth.beliefs(evaluation)?.belief_update(h, u, z)?;
    let mb = truth.beliefs(behavior)?.belief_update(h, u, z)?;
    if mb <= 0.0 {
        return Err(Error::SupportViolation(format!("behavior belief update vanishes at [{}]", kernel.shape().key(h))));
    }
    Ok(me / mb)
}

/// `V_t` and `E[ρ_t]` at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalSensitivity {
    pub variance: f64,
    pub mean: f64,
}

pub fn local_label_sensitivity(setup: &ShiftSetup<'_>, h: &History) -> Result<LocalSensitivity> {
    let s = setup.step(h)?;
    Ok(LocalSensitivity { variance: s.variance, mean: s.mean })
}

/// `ρ_t`, cumulative user weights and agent-divergence factors along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityRatioProcess {
    pub rho: Vec<f64>,
    /// `W_t^{(u)}` for `t = 1..=T`.
    pub user_weights: Vec<f64>,
    pub agent_factors: Vec<f64>,
    /// `W_T = W_T^{(u)} · ∏ agent factors`.
    pub total: f64,
}

/// Factorizes `P^{π_e}(τ | z) / P_sim^{π_e}(τ | z)` along a simulated path,
/// dividing by the stored kernel rows.
pub fn trajectory_density_ratio(setup: &ShiftSetup<'_>, path: &SimPath) -> Result<DensityRatioProcess> {
    let kernel = setup.kernel;
    let truth = kernel.truth();
    let nu = kernel.shape().user.len();
    let control = setup.control;
    let mut h = History::root();
    let mut log_w = 0.0;
    let mut log_agent = 0.0;
    let mut out = DensityRatioProcess { rho: Vec::new(), user_weights: Vec::new(), agent_factors: Vec::new(), total: 0.0 };
    for (t, (u, a)) in path.trajectory.steps().enumerate() {
        let e = if kernel.kind().emits_step_control() {
            path.step_controls[t] as usize * nu + u as usize
        } else {
            u as usize
        };
        let sim = kernel.emission_row(control, &h)?[e];
        if sim <= 0.0 {
            return Err(Error::SupportViolation(format!("simulator gives step {} no mass", t + 1)));
        }
        let rho = truth.conditional(setup.evaluation, control, &h)?[e] / sim;
        h.push(u);
        let agent = truth.agent_factor(setup.evaluation, control, &h, a)?;
        h.push(a);
        log_w += rho.ln();
        log_agent += agent.ln();
        out.rho.push(rho);
        out.user_weights.push(log_w.exp());
        out.agent_factors.push(agent);
    }
    out.total = (log_w + log_agent).exp();
    Ok(out)
}

/// One control value's term in the bias-factor expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasTerm {
    pub control: Symbol,
    pub label_probability: f64,
    /// `P^{π_b}(ẑ | h_{t-1}, u_t) / P^{π_b}(ẑ | h_{t-1}, u_t, a_t)` per step.
    pub step_factors: Vec<f64>,
    /// The label posterior hits zero along τ and the term is taken as its limit.
    pub limit: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasReport {
    pub trajectory: Trajectory,
    /// `P_sim^π(τ) / P^π(τ)` by enumeration.
    pub sim_over_true: f64,
    /// `E_{ẑ∼P_L(·|τ)}[∏_t P^{π_b}(ẑ | h, u) / P^{π_b}(ẑ | h, u, a)]`.
    pub expected_factor: f64,
    /// The reciprocal orientation `P^π(τ) / P_sim^π(τ)`.
    pub true_over_sim: f64,
    pub difference: f64,
    pub terms: Vec<BiasTerm>,
}

impl BiasReport {
    pub fn passes(&self) -> bool {
        self.difference <= BIAS_TOL
    }
}

/// Reusable bias-factor checker: one behavior-trained kernel, any deployment policy.
#[derive(Debug)]
pub struct BiasCheck {
    kernel: SimulatorKernel,
}

impl BiasCheck {
    pub fn new(spec: &EnvironmentSpec, behavior: &AgentPolicy, labeler: &PostHocLabeler) -> Result<Self> {
        let truth = GroundTruth::post_hoc(spec.clone(), labeler.clone());
        Ok(Self { kernel: trajectory_conditioned_kernel_in(&truth, behavior)? })
    }

    pub fn kernel(&self) -> &SimulatorKernel {
        &self.kernel
    }

    pub fn check(&self, policy: &AgentPolicy, tau: &Trajectory) -> Result<BiasReport> {
        let GroundTruth::PostHoc { spec, labeler, .. } = &**self.kernel.truth() else {
            unreachable!("bias checks hold post-hoc worlds")
        };
        let behavior = self.kernel.trained_under().expect("post-hoc kernels record their behavior policy");
        let truth_p = trajectory_probability(spec, policy, tau);
        if truth_p <= 0.0 {
            return Err(Error::UndefinedConditional(format!("[{}] has zero probability under `{}`", spec.key(tau.history()), policy.tag())));
        }
        let sim_p = compose(&self.kernel, policy, Control::FromPrior)?.probability(tau)?;
        let beliefs = self.kernel.truth().beliefs(behavior)?;
        let root = History::root();
        let mut expected = 0.0;
        let mut terms = Vec::new();
        for (z, &pl) in labeler.row(tau.history())?.iter().enumerate() {
            let prior = beliefs.posterior(&root)?[z];
            if prior <= 0.0 {
                continue;
            }
            let mut h = History::root();
            let mut previous = prior;
            let (mut paper, mut telescoped) = (1.0, 1.0);
            let mut step_factors = Vec::new();
            let mut vanished = false;
            for (u, a) in tau.steps() {
                if previous <= 0.0 {
                    telescoped = 0.0;
                    break;
                }
                h.push(u);
                let before = beliefs.posterior(&h)?[z];
                telescoped *= before / previous;
                h.push(a);
                let after = beliefs.posterior(&h)?[z];
                if after > 0.0 {
                    step_factors.push(before / after);
                    paper *= before / after;
                } else {
                    vanished = true;
                }
                previous = after;
            }
            // When the label posterior vanishes along τ the product reads 0·(x/0);
            // its limit is the telescoped prior × ∏ M_t.
            let contribution = if vanished { prior * telescoped } else { pl * paper };
            if contribution == 0.0 && pl == 0.0 {
                continue;
            }
            expected += contribution;
            terms.push(BiasTerm { control: z as Symbol, label_probability: pl, step_factors, limit: vanished });
        }
        let sim_over_true = sim_p / truth_p;
        Ok(BiasReport {
            trajectory: tau.clone(),
            sim_over_true,
            expected_factor: expected,
            true_over_sim: truth_p / sim_p,
            difference: (sim_over_true - expected).abs(),
            terms,
        })
    }

    /// Reports for every trajectory reachable under `policy`.
    pub fn check_all(&self, policy: &AgentPolicy) -> Result<Vec<BiasReport>> {
        let GroundTruth::PostHoc { spec, .. } = &**self.kernel.truth() else {
            unreachable!("bias checks hold post-hoc worlds")
        };
        crate::env::enumerate_trajectories(spec, policy)?
            .iter()
            .map(|(tau, _)| self.check(policy, tau))
            .collect()
    }
}

pub fn verify_theorem1(
    spec: &EnvironmentSpec,
    policy: &AgentPolicy,
    behavior: &AgentPolicy,
    labeler: &PostHocLabeler,
    tau: &Trajectory,
) -> Result<BiasReport> {
    BiasCheck::new(spec, behavior, labeler)?.check(policy, tau)
}

/// `V_t` at one visited state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSensitivity {
    pub step: usize,
    pub history: History,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityProfile {
    pub states: Vec<StateSensitivity>,
    /// `E[W_{t-1}² V_t]` for `t = 1..=T`.
    pub contributions: Vec<f64>,
    /// Certified floor: the minimum `V_t` over visited states.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub horizon: usize,
    pub mean_weight: f64,
    pub exact_variance: f64,
    pub decomposition: f64,
    pub sensitivity: SensitivityProfile,
    /// Floor used for the bound: the override if given, else the certified one.
    pub eta: f64,
    pub bound: f64,
}

impl VarianceReport {
    pub fn decomposition_gap(&self) -> f64 {
        (self.exact_variance - self.decomposition).abs()
    }

    pub fn satisfies_bound(&self) -> bool {
        self.exact_variance >= self.bound - DECOMPOSITION_TOL
    }
}

/// Exact `Var(W_T^{(u)})` two ways: directly over leaves, and as
/// `Σ_t E[W_{t-1}² V_t]`.
pub fn variance_decomposition(setup: &ShiftSetup<'_>, horizon: usize, eta: Option<f64>) -> Result<VarianceReport> {
    let mut leaves = Vec::new();
    let mut contributions = vec![0.0; horizon];
    let mut states = Vec::new();
    setup.walk(horizon, &mut |h, mass, log_w, stats| {
        match stats {
            None => leaves.push((mass, log_w.exp())),
            Some(s) => {
                let t = h.completed_steps();
                contributions[t] += mass * (2.0 * log_w).exp() * s.variance;
                states.push(StateSensitivity { step: t + 1, history: h.clone(), variance: s.variance });
            }
        }
        Ok(())
    })?;
    let total: f64 = leaves.iter().map(|(m, _)| m).sum();
    let mean: f64 = leaves.iter().map(|(m, w)| m * w).sum::<f64>() / total;
    let exact_variance: f64 = leaves.iter().map(|(m, w)| m * (w - mean).powi(2)).sum::<f64>() / total;
    let certified = states.iter().map(|s| s.variance).fold(f64::INFINITY, f64::min);
    let certified = if certified.is_finite() { certified } else { 0.0 };
    let eta = eta.unwrap_or(certified);
    Ok(VarianceReport {
        horizon,
        mean_weight: mean,
        exact_variance,
        decomposition: contributions.iter().sum(),
        sensitivity: SensitivityProfile { states, contributions, eta: certified },
        eta,
        bound: geometric_lower_bound(eta, horizon),
    })
}

/// `max_{h_{t-1}} |E[W_t^{(u)} | h_{t-1}] − W_{t-1}^{(u)}|` under the simulated measure.
pub fn verify_martingale(setup: &ShiftSetup<'_>, t: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Invalid("martingale steps start at 1".into()));
    }
    let mut worst: f64 = 0.0;
    setup.walk(t, &mut |_, _, log_w, stats| {
        if let Some(s) = stats {
            if s.simulated.iter().any(|&p| p > 0.0) {
                let w = log_w.exp();
                worst = worst.max(w * (s.mean - 1.0).abs());
            }
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Martingale deviation at every step `1..=horizon`.
pub fn martingale_profile(setup: &ShiftSetup<'_>, horizon: usize) -> Result<Vec<f64>> {
    let mut per_step = vec![0.0f64; horizon];
    setup.walk(horizon, &mut |h, _, log_w, stats| {
        if let Some(s) = stats {
            let t = h.completed_steps();
            per_step[t] = per_step[t].max(log_w.exp() * (s.mean - 1.0).abs());
        }
        Ok(())
    })?;
    Ok(per_step)
}

/// `max |ρ_t − 1|` over every reachable state and emission up to `horizon`.
pub fn max_ratio_deviation(setup: &ShiftSetup<'_>, horizon: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    setup.walk(horizon, &mut |_, _, _, stats| {
        if let Some(s) = stats {
            for (p, r) in s.simulated.iter().zip(&s.rho) {
                if *p > 0.0 {
                    worst = worst.max((r - 1.0).abs());
                }
            }
        }
        Ok(())
    })?;
    Ok(worst)
}

/// Largest `|P_sim − P^{reference}|` entry over reachable states.
pub fn max_kernel_mismatch(setup: &ShiftSetup<'_>, horizon: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    setup.walk(horizon, &mut |_, _, _, stats| {
        if let Some(s) = stats {
            for (p, q) in s.simulated.iter().zip(&s.reference) {
                worst = worst.max((p - q).abs());
            }
        }
        Ok(())
    })?;
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairCheck {
    pub behavior: String,
    pub evaluation: String,
    pub max_deviation: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem3Report {
    pub max_deviation: f64,
    pub max_variance: f64,
    /// Largest gap between the filtered kernel and the latent path-sum conditional.
    pub kernel_mismatch: f64,
    pub pairs: Vec<PairCheck>,
}

/// `ρ_t` of the latent-marginalized kernel under each policy pair.
pub fn verify_theorem3(pd: &ParameterizedDynamics, pairs: &[(AgentPolicy, AgentPolicy)]) -> Result<Theorem3Report> {
    let kernel = parameterized_dynamics_kernel(pd)?;
    let horizon = pd.shape().horizon;
    let mut report = Theorem3Report { max_deviation: 0.0, max_variance: 0.0, kernel_mismatch: 0.0, pairs: Vec::new() };
    for (behavior, evaluation) in pairs {
        let setup = ShiftSetup::new(&kernel, behavior, evaluation, Control::FromPrior)?;
        let max_deviation = max_ratio_deviation(&setup, horizon)?;
        let variance = variance_decomposition(&setup, horizon, None)?.exact_variance;
        report.kernel_mismatch = report.kernel_mismatch.max(max_kernel_mismatch(&setup, horizon)?);
        report.max_deviation = report.max_deviation.max(max_deviation);
        report.max_variance = report.max_variance.max(variance);
        report.pairs.push(PairCheck {
            behavior: behavior.tag().to_string(),
            evaluation: evaluation.tag().to_string(),
            max_deviation,
            variance,
        });
    }
    Ok(report)
}

/// `(1 + η)^T − 1`.
pub fn geometric_lower_bound(eta: f64, horizon: usize) -> f64 {
    (horizon as f64 * eta.ln_1p()).exp_m1()
}

/// Least-squares slope `s` of `ln(1 + Var_T)` against `T`, returned as `e^s − 1`.
pub fn estimate_eta_hat(points: &[(usize, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(points.len()));
    }
    if let Some((t, v)) = points.iter().find(|(_, v)| v.is_nan() || *v <= -1.0) {
        return Err(Error::Invalid(format!("variance {v} at T={t} is not above -1")));
    }
    let n = points.len() as f64;
    let xbar = points.iter().map(|(t, _)| *t as f64).sum::<f64>() / n;
    let ybar = points.iter().map(|(_, v)| v.ln_1p()).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|(t, _)| (*t as f64 - xbar).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit(1));
    }
    let sxy: f64 = points.iter().map(|(t, v)| (*t as f64 - xbar) * (v.ln_1p() - ybar)).sum();
    Ok((sxy / sxx).exp_m1())
}

#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub samples: usize,
    pub mean: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub kurtosis: f64,
    pub effective_samples: f64,
    pub low_effective_samples: bool,
}

/// Unbiased sample variance of `W_T^{(u)}` over `samples` seeded paths.
///
/// Paths are drawn in replicates of [`REPLICATE_SIZE`], replicate `i` seeded
/// with `derive_seed(seed, i)`; replicates run in parallel and are reduced in
/// index order.
pub fn monte_carlo_weight_variance(setup: &ShiftSetup<'_>, horizon: usize, samples: usize, seed: u64) -> Result<McEstimate> {
    if samples < 2 {
        return Err(Error::Invalid(format!("need at least two samples, got {samples}")));
    }
    if horizon > setup.kernel.shape().horizon {
        return Err(Error::Invalid(format!("horizon {horizon} exceeds the environment's {}", setup.kernel.shape().horizon)));
    }
    let replicates = samples.div_ceil(REPLICATE_SIZE);
    let chunks: Vec<Vec<f64>> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let count = REPLICATE_SIZE.min(samples - i * REPLICATE_SIZE);
            let mut rng = rng_from_seed(derive_seed(seed, i as u64));
            (0..count).map(|_| sample_weight(setup, horizon, &mut rng)).collect()
        })
        .collect::<Result<_>>()?;
    let weights: Vec<f64> = chunks.into_iter().flatten().collect();
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let m2 = weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>();
    let m4 = weights.iter().map(|w| (w - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 / (n - 1.0);
    let se = ((m4 - variance * variance * (n - 3.0) / (n - 1.0)) / n).max(0.0).sqrt();
    let (kurtosis, effective_samples) = if variance > 0.0 {
        let k = m4 / (variance * variance);
        (k, if k > 1.0 { 2.0 * n / (k - 1.0) } else { n })
    } else {
        (f64::NAN, n)
    };
    Ok(McEstimate {
        samples,
        mean,
        variance,
        ci_low: variance - 1.96 * se,
        ci_high: variance + 1.96 * se,
        kurtosis,
        effective_samples,
        low_effective_samples: effective_samples < MIN_EFFECTIVE_SAMPLES,
    })
}

fn sample_weight(setup: &ShiftSetup<'_>, horizon: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Result<f64> {
    let mut h = History::root();
    let mut log_w = 0.0;
    for _ in 0..horizon {
        let s = setup.step(&h)?;
        let e = sample_index(&s.simulated, rng);
        log_w += s.rho[e as usize].ln();
        h.push(setup.kernel.user_of(e));
        let a = sample_index(setup.evaluation.action_row(&h)?, rng);
        h.push(a);
    }
    Ok(log_w.exp())
}

/// Mean and variance of `Σ_t f(t, u_t, a_t)` under a composed measure.
pub fn additive_feature_variance<F>(measure: &ComposedMeasure<'_>, feature: F) -> Result<(f64, f64)>
where
    F: Fn(usize, Symbol, Symbol) -> f64,
{
    let paths = measure.enumerate()?;
    let values: Vec<(f64, f64)> = paths
        .iter()
        .map(|(p, m)| (*m, p.trajectory.steps().enumerate().map(|(t, (u, a))| feature(t + 1, u, a)).sum()))
        .collect();
    let total: f64 = values.iter().map(|(m, _)| m).sum();
    let mean = values.iter().map(|(m, x)| m * x).sum::<f64>() / total;
    let var = values.iter().map(|(m, x)| m * (x - mean).powi(2)).sum::<f64>() / total;
    Ok((mean, var))
}

/// Whether a kernel kind conditions on information unavailable before the actions it precedes.
pub fn is_mitigation(kind: KernelKind) -> bool {
    kind != KernelKind::TrajectoryConditioned
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::enumerate_trajectories;
    use crate::fixtures;
    use crate::simulators::{apriori_kernel, dynamic_state_kernel, trajectory_conditioned_kernel};

    #[test]
    fn recommender_bias_factor() {
        let fx = fixtures::recommender();
        let tau = fx.spec.shape().parse_trajectory("q,1,y1,0").unwrap();
        let report = verify_theorem1(&fx.spec, &fx.evaluation, &fx.behavior, &fx.labeler, &tau).unwrap();
        assert!((report.sim_over_true - 0.625).abs() < 1e-12);
        assert!((report.expected_factor - 0.625).abs() < 1e-12);
        assert!((report.true_over_sim - 1.6).abs() < 1e-12);
    }

    #[test]
    fn vanishing_label_posterior_uses_the_limit_term() {
        // Success is certain after (A, a_b), so ẑ=0 dies with the action.
        let fx = fixtures::chain(1);
        let tau = fx.spec.shape().parse_trajectory("A,a_b").unwrap();
        let report = verify_theorem1(&fx.spec, &fx.evaluation, &fx.behavior, &fx.labeler, &tau).unwrap();
        assert!((report.sim_over_true - 1.0).abs() < 1e-12);
        assert!((report.expected_factor - 1.0).abs() < 1e-12);
        assert!(report.terms.iter().any(|t| t.limit && t.label_probability == 0.0));
        for t in 2..=3 {
            let fx = fixtures::chain(t);
            let check = BiasCheck::new(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            assert!(check.check_all(&fx.evaluation).unwrap().iter().all(BiasReport::passes));
        }
    }

    #[test]
    fn action_independent_labels_carry_no_bias() {
        let base = fixtures::random_environment(21, 3);
        // Label depends on u_1 only, which precedes every action.
        let labeler = PostHocLabeler::from_fn("first", base.labeler.controls().clone(), &base.spec, |tau| {
            if tau.user(1) == 0 {
                vec![0.3, 0.7]
            } else {
                vec![0.9, 0.1]
            }
        })
        .unwrap();
        let check = BiasCheck::new(&base.spec, &base.behavior, &labeler).unwrap();
        for report in check.check_all(&base.evaluation).unwrap() {
            assert!((report.sim_over_true - 1.0).abs() < 1e-12);
            assert!((report.expected_factor - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_step_ratio_and_sensitivity() {
        let fx = fixtures::two_step();
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let a = fx.spec.user_alphabet().index_of("A").unwrap();
        let b = fx.spec.user_alphabet().index_of("B").unwrap();
        let root = History::root();
        let ra = user_generative_error(&kernel, &fx.behavior, &fx.evaluation, &root, a, 1).unwrap();
        let rb = user_generative_error(&kernel, &fx.behavior, &fx.evaluation, &root, b, 1).unwrap();
        assert!((ra - 1.25).abs() < 1e-12);
        assert!((rb - 0.5).abs() < 1e-12);
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        let v = local_label_sensitivity(&setup, &root).unwrap();
        assert!((v.variance - 0.125).abs() < 1e-12);
        assert!((v.mean - 1.0).abs() < 1e-12);
        let report = variance_decomposition(&setup, 1, None).unwrap();
        assert!((report.exact_variance - 0.125).abs() < 1e-12);
        assert!((report.decomposition - 0.125).abs() < 1e-12);
        assert!((report.bound - 0.125).abs() < 1e-12);
        assert!((max_ratio_deviation(&setup, 1).unwrap() - 0.5).abs() < 1e-12);
        // Beyond the first step π_e leaves the behavior support.
        assert!(matches!(variance_decomposition(&setup, 2, None), Err(Error::UndefinedConditional(_))));
    }

    #[test]
    fn identical_policies_give_unit_ratios() {
        let fx = fixtures::random_environment(4, 3);
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.behavior, Control::Fixed(0)).unwrap();
        assert_eq!(max_ratio_deviation(&setup, 3).unwrap(), 0.0);
        let report = variance_decomposition(&setup, 3, None).unwrap();
        assert!(report.exact_variance < 1e-20);
        let mc = monte_carlo_weight_variance(&setup, 3, 5000, 1).unwrap();
        assert!(mc.variance <= 1e-20);
    }

    #[test]
    fn decomposition_matches_direct_variance() {
        for seed in 0..5 {
            let fx = fixtures::random_environment(seed, 4);
            let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            for z in 0..2 {
                let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(z)).unwrap();
                for t in 1..=4 {
                    let r = variance_decomposition(&setup, t, None).unwrap();
                    assert!(r.decomposition_gap() < 1e-8, "seed {seed} z {z} T {t}");
                    assert!(r.satisfies_bound());
                    assert!((r.mean_weight - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn martingale_holds_and_mutations_are_caught() {
        let fx = fixtures::random_environment(7, 3);
        let mut kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        {
            let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
            for d in martingale_profile(&setup, 3).unwrap() {
                assert!(d <= MARTINGALE_TOL);
            }
        }
        let key = (1, fx.spec.shape().parse_key("u0,a1").unwrap());
        let row = kernel.rows_mut().get_mut(&key).unwrap();
        row[0] *= 1.5;
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= total);
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        assert!(verify_martingale(&setup, 2).unwrap() > 1e-6);
    }

    #[test]
    fn density_ratio_factorizes() {
        let fx = fixtures::recommender();
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        let tau = fx.spec.shape().parse_trajectory("q,1,y1,0").unwrap();
        let path = SimPath { control: 1, step_controls: vec![], trajectory: tau };
        let w = trajectory_density_ratio(&setup, &path).unwrap();
        // Given ẑ=1 both measures put all mass on this trajectory.
        let product: f64 = w.rho.iter().chain(&w.agent_factors).product();
        assert!((w.total - product).abs() < 1e-12);
        assert!((w.total - 1.0).abs() < 1e-12);
        // Marginally the simulator keeps the behavior prior: 0.8 true versus 0.5 simulated.
        let sim = compose(&kernel, &fx.evaluation, Control::FromPrior).unwrap();
        let ratio = trajectory_probability(&fx.spec, &fx.evaluation, &path.trajectory) / sim.probability(&path.trajectory).unwrap();
        assert!((ratio - 1.6).abs() < 1e-12);
        let y1 = fx.spec.user_alphabet().index_of("y1").unwrap();
        let p_sim = sim.event_probability(|t| t.user(2) == y1).unwrap();
        let p_true = crate::env::event_probability(&fx.spec, &fx.evaluation, |t| t.user(2) == y1).unwrap();
        assert!((p_true / p_sim - 1.6).abs() < 1e-12);
        assert!((p_sim / p_true - 0.625).abs() < 1e-12);
    }

    #[test]
    fn apriori_density_ratio_is_the_user_product() {
        let control = fixtures::random_apriori(3, 3);
        let kernel = apriori_kernel(&control).unwrap();
        let env = control.mixture_environment().unwrap();
        let pb = fixtures::random_policy(1, &env, "pi_b");
        let pe = fixtures::random_policy(2, &env, "pi_e");
        let setup = ShiftSetup::new(&kernel, &pb, &pe, Control::Fixed(0)).unwrap();
        let measure = compose(&kernel, &pe, Control::Fixed(0)).unwrap();
        for (path, _) in measure.enumerate().unwrap() {
            let w = trajectory_density_ratio(&setup, &path).unwrap();
            assert!(w.agent_factors.iter().all(|f| (f - 1.0).abs() < 1e-12));
            assert!((w.total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posthoc_density_ratio_matches_the_direct_quotient() {
        let fx = fixtures::random_environment(12, 3);
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        let measure = compose(&kernel, &fx.evaluation, Control::Fixed(1)).unwrap();
        let prior_e: f64 = enumerate_trajectories(&fx.spec, &fx.evaluation)
            .unwrap()
            .iter()
            .map(|(t, p)| p * fx.labeler.row(t.history()).unwrap()[1])
            .sum();
        for (path, sim_p) in measure.enumerate().unwrap() {
            let tau = &path.trajectory;
            let true_p = trajectory_probability(&fx.spec, &fx.evaluation, tau) * fx.labeler.row(tau.history()).unwrap()[1] / prior_e;
            let w = trajectory_density_ratio(&setup, &path).unwrap();
            assert!((w.total - true_p / sim_p).abs() < 1e-10);
        }
    }

    #[test]
    fn mitigations_have_unit_ratios() {
        let fx = fixtures::two_step();
        let a = apriori_kernel(&fixtures::two_step_apriori()).unwrap();
        let p = parameterized_dynamics_kernel(&fixtures::two_step_parameterized()).unwrap();
        let env = fixtures::two_step_apriori().mixture_environment().unwrap();
        let deterministic = (
            AgentPolicy::stationary("pi_b", &env, &[1.0, 0.0]).unwrap(),
            AgentPolicy::stationary("pi_e", &env, &[0.0, 1.0]).unwrap(),
        );
        let mixed = (
            AgentPolicy::stationary("pi_b", &env, &[0.7, 0.3]).unwrap(),
            AgentPolicy::stationary("pi_e", &env, &[0.2, 0.8]).unwrap(),
        );
        // Deterministic policies share only the first step's support.
        for ((pb, pe), horizon) in [(&deterministic, 1), (&mixed, 2)] {
            let d = dynamic_state_kernel(&env, pb, &fixtures::two_step_stepwise(&fx.spec)).unwrap();
            for (kernel, control) in [(&a, Control::Fixed(0)), (&a, Control::Fixed(1)), (&d, Control::FromPrior), (&p, Control::FromPrior)] {
                let setup = ShiftSetup::new(kernel, pb, pe, control).unwrap();
                assert!(max_ratio_deviation(&setup, horizon).unwrap() <= 1e-12, "{}", kernel.kind());
                assert!(variance_decomposition(&setup, horizon, None).unwrap().exact_variance <= 1e-20);
            }
        }
    }

    #[test]
    fn theorem3_on_random_models() {
        for seed in 0..3 {
            let pd = fixtures::random_parameterized(seed, 3);
            let env = EnvironmentSpec::from_fn(pd.shape().clone(), |_| vec![0.5, 0.5]).unwrap();
            let pairs: Vec<_> = (0..3)
                .map(|i| {
                    (
                        fixtures::random_policy(derive_seed(seed, 2 * i), &env, "pi_b"),
                        fixtures::random_policy(derive_seed(seed, 2 * i + 1), &env, "pi_e"),
                    )
                })
                .collect();
            let r = verify_theorem3(&pd, &pairs).unwrap();
            assert!(r.max_deviation <= 1e-10);
            assert!(r.max_variance <= 1e-10);
            assert!(r.kernel_mismatch <= 1e-12);
        }
    }

    #[test]
    fn constant_response_is_exactly_one() {
        let pd = ParameterizedDynamics::from_fn(
            fixtures::binary_shape(3),
            crate::env::Alphabet::new(["s0", "s1"]).unwrap(),
            crate::env::Alphabet::new(["c"]).unwrap(),
            0,
            0,
            |_, prev, _| if prev == 0 { vec![0.4, 0.6] } else { vec![0.7, 0.3] },
            |_, _| vec![0.35, 0.65],
        )
        .unwrap();
        let env = EnvironmentSpec::from_fn(pd.shape().clone(), |_| vec![0.5, 0.5]).unwrap();
        let pairs = vec![(fixtures::random_policy(1, &env, "b"), fixtures::random_policy(2, &env, "e"))];
        assert_eq!(verify_theorem3(&pd, &pairs).unwrap().max_deviation, 0.0);
    }

    #[test]
    fn geometric_bound_values() {
        assert!((geometric_lower_bound(0.125, 1) - 0.125).abs() < 1e-15);
        assert!((geometric_lower_bound(0.125, 2) - 0.265625).abs() < 1e-15);
        assert_eq!(geometric_lower_bound(0.0, 7), 0.0);
    }

    #[test]
    fn eta_fit() {
        let seq: Vec<(usize, f64)> = (1..=6).map(|t| (t, 1.42f64.powi(t as i32) - 1.0)).collect();
        assert!((estimate_eta_hat(&seq).unwrap() - 0.42).abs() < 1e-9);
        assert_eq!(estimate_eta_hat(&[(1, 0.0), (2, 0.0), (3, 0.0)]).unwrap(), 0.0);
        assert_eq!(estimate_eta_hat(&[(1, 0.3)]), Err(Error::DegenerateFit(1)));
        assert!(estimate_eta_hat(&[(1, -1.0), (2, 0.0)]).is_err());
    }

    #[test]
    fn chain_has_a_constant_sensitivity_floor() {
        let fx = fixtures::chain(4);
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        let points: Vec<(usize, f64)> =
            (1..=4).map(|t| (t, variance_decomposition(&setup, t, None).unwrap().exact_variance)).collect();
        let designed = variance_decomposition(&setup, 4, None).unwrap().sensitivity.eta;
        let eta_hat = estimate_eta_hat(&points).unwrap();
        assert!(designed > 0.1);
        assert!((eta_hat - designed).abs() <= 0.1 * designed, "{eta_hat} vs {designed}");
    }

    #[test]
    fn monte_carlo_is_seeded() {
        let fx = fixtures::two_step();
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1)).unwrap();
        let a = monte_carlo_weight_variance(&setup, 1, 10_000, 5).unwrap();
        let b = monte_carlo_weight_variance(&setup, 1, 10_000, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= 0.125 && 0.125 <= a.ci_high);
    }

    #[test]
    fn additive_feature_hook() {
        let fx = fixtures::recommender();
        let kernel = trajectory_conditioned_kernel(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let m = compose(&kernel, &fx.evaluation, Control::FromPrior).unwrap();
        let (mean, var) = additive_feature_variance(&m, |_, u, _| if u == 2 { 1.0 } else { 0.0 }).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        assert!((var - 0.25).abs() < 1e-12);
    }
}
