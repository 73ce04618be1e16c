//! Controllable simulator kernels for every conditioning paradigm, and their
//! composition with an agent policy into an exact trajectory measure.
//!
//! A kernel is a materialized table of emission rows keyed on
//! `(control, h_{t-1})`. Most kinds emit a user symbol; the dynamic-state
//! kind emits a `(z_t, u_t)` pair encoded as `z_t * |U| + u_t`.
//!
//! Every kernel also carries the [`GroundTruth`] it claims to reproduce so
//! diagnostics can recompute the true conditional under any policy.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use serde_json::{json, Map, Value};

use crate::beliefs::BeliefCache;
use crate::env::{
    check_distribution, rng_from_seed, sample_index, AgentPolicy, Alphabet, EnvironmentSpec, History, Shape, Symbol,
    Trajectory, EXACT_BUDGET,
};
use crate::error::{Error, Result};
use crate::labeling::{AprioriControl, PostHocLabeler, StepwiseLabeler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum KernelKind {
    TrajectoryConditioned,
    Apriori,
    DynamicState,
    PolicyConditioned,
    ParameterizedDynamics,
}

impl KernelKind {
    pub const ALL: [KernelKind; 5] = [
        KernelKind::TrajectoryConditioned,
        KernelKind::Apriori,
        KernelKind::DynamicState,
        KernelKind::PolicyConditioned,
        KernelKind::ParameterizedDynamics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::TrajectoryConditioned => "trajectory_conditioned",
            KernelKind::Apriori => "a_priori",
            KernelKind::DynamicState => "dynamic_state",
            KernelKind::PolicyConditioned => "policy_conditioned",
            KernelKind::ParameterizedDynamics => "parameterized_dynamics",
        }
    }

    /// Whether the kernel draws a fresh step control with every user symbol.
    pub fn emits_step_control(self) -> bool {
        self == KernelKind::DynamicState
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Bipartite latent-state user model: `z_t ~ P_dyn(· | h_{t-1}, z_{t-1}, c)`
/// then `u_t ~ P_resp(· | h_{t-1}, z_t)`, with `z_0` and `c` fixed up front.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterizedDynamics {
    shape: Shape,
    latent: Alphabet,
    profiles: Alphabet,
    initial_state: Symbol,
    profile: Symbol,
    transition: HashMap<(History, Symbol, Symbol), Vec<f64>>,
    response: HashMap<(History, Symbol), Vec<f64>>,
}

impl ParameterizedDynamics {
    /// Tabulates both kernels on every completed history shorter than the horizon.
    #[allow(clippy::too_many_arguments)]
    pub fn from_fn<D, R>(
        shape: Shape,
        latent: Alphabet,
        profiles: Alphabet,
        initial_state: Symbol,
        profile: Symbol,
        mut transition: D,
        mut response: R,
    ) -> Result<Self>
    where
        D: FnMut(&History, Symbol, Symbol) -> Vec<f64>,
        R: FnMut(&History, Symbol) -> Vec<f64>,
    {
        shape.check_budget()?;
        if initial_state as usize >= latent.len() || profile as usize >= profiles.len() {
            return Err(Error::Invalid("initial state or profile outside its alphabet".into()));
        }
        let mut trans = HashMap::new();
        let mut resp = HashMap::new();
        let mut stack = vec![History::root()];
        while let Some(h) = stack.pop() {
            for z in latent.symbols() {
                for c in profiles.symbols() {
                    trans.insert((h.clone(), z, c), transition(&h, z, c));
                }
                resp.insert((h.clone(), z), response(&h, z));
            }
            if h.completed_steps() + 1 < shape.horizon {
                for u in shape.user.symbols() {
                    for a in shape.agent.symbols() {
                        stack.push(h.child(u).child(a));
                    }
                }
            }
        }
        Ok(Self { shape, latent, profiles, initial_state, profile, transition: trans, response: resp })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn latent(&self) -> &Alphabet {
        &self.latent
    }

    pub fn profiles(&self) -> &Alphabet {
        &self.profiles
    }

    pub fn initial_state(&self) -> Symbol {
        self.initial_state
    }

    pub fn profile(&self) -> Symbol {
        self.profile
    }

    pub fn with_profile(&self, profile: Symbol) -> Self {
        Self { profile, ..self.clone() }
    }

    pub fn with_initial_state(&self, initial_state: Symbol) -> Self {
        Self { initial_state, ..self.clone() }
    }

    pub fn transition_row(&self, h: &History, previous: Symbol) -> Result<&[f64]> {
        self.transition
            .get(&(h.clone(), previous, self.profile))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("state dynamics at [{}] from z={previous}", self.shape.key(h))))
    }

    pub fn response_row(&self, h: &History, state: Symbol) -> Result<&[f64]> {
        self.response
            .get(&(h.clone(), state))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("response model at [{}] in z={state}", self.shape.key(h))))
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        for ((h, z, c), row) in &self.transition {
            let ctx = format!("state dynamics [{}] z={z} c={c}", self.shape.key(h));
            if let Err(e) = check_distribution(row, self.latent.len(), &ctx) {
                errors.push(e);
            }
        }
        for ((h, z), row) in &self.response {
            let ctx = format!("response [{}] z={z}", self.shape.key(h));
            if let Err(e) = check_distribution(row, self.shape.user.len(), &ctx) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// The joint control/trajectory world a kernel is meant to reproduce.
#[derive(Debug)]
pub enum GroundTruth {
    /// True dynamics plus a post-hoc labeler; controls are trajectory labels.
    PostHoc { spec: EnvironmentSpec, labeler: PostHocLabeler, beliefs: BeliefCache },
    /// Controls drawn before the interaction.
    Apriori(AprioriControl),
    /// True dynamics plus a step-wise labeler generating `z_t` each turn.
    StepWise { spec: EnvironmentSpec, labeler: StepwiseLabeler },
    /// Latent-state dynamics under its fixed `(z_0, c)`.
    Parameterized(ParameterizedDynamics),
}

impl GroundTruth {
    pub fn post_hoc(spec: EnvironmentSpec, labeler: PostHocLabeler) -> Arc<Self> {
        Arc::new(GroundTruth::PostHoc { spec, labeler, beliefs: BeliefCache::new() })
    }

    pub fn shape(&self) -> &Shape {
        match self {
            GroundTruth::PostHoc { spec, .. } | GroundTruth::StepWise { spec, .. } => spec.shape(),
            GroundTruth::Apriori(c) => c.shape(),
            GroundTruth::Parameterized(pd) => pd.shape(),
        }
    }

    pub fn emission_width(&self) -> usize {
        match self {
            GroundTruth::StepWise { spec, labeler } => spec.user_alphabet().len() * labeler.controls().len(),
            other => other.shape().user.len(),
        }
    }

    /// Posterior table of a post-hoc world under `policy`.
    pub fn beliefs(&self, policy: &AgentPolicy) -> Result<Arc<crate::beliefs::BeliefTable>> {
        match self {
            GroundTruth::PostHoc { spec, labeler, beliefs } => beliefs.table(spec, policy, labeler),
            _ => Err(Error::Invalid("belief tables exist only for post-hoc labels".into())),
        }
    }

    /// True emission distribution `P^π(e | h_{t-1}, control)` with agent
    /// actions drawn from `policy`.
    pub fn conditional(&self, policy: &AgentPolicy, control: Symbol, h: &History) -> Result<Vec<f64>> {
        match self {
            GroundTruth::PostHoc { spec, .. } => {
                let table = self.beliefs(policy)?;
                let before = table.posterior(h)?[control as usize];
                if before <= 0.0 {
                    return Err(Error::UndefinedConditional(format!(
                        "ẑ={control} has zero posterior at [{}] under `{}`",
                        spec.key(h),
                        policy.tag()
                    )));
                }
                let urow = spec.user_row(h)?;
                let mut out = vec![0.0; urow.len()];
                for (u, &p) in urow.iter().enumerate() {
                    if p > 0.0 {
                        out[u] = p * table.posterior(&h.child(u as Symbol))?[control as usize] / before;
                    }
                }
                Ok(out)
            }
            GroundTruth::Apriori(c) => {
                let spec = c.dynamics(control);
                if path_reach(spec, policy, h) <= 0.0 || c.prior()[control as usize] <= 0.0 {
                    return Err(Error::UndefinedConditional(format!(
                        "[{}] under control {control} and `{}`",
                        spec.key(h),
                        policy.tag()
                    )));
                }
                Ok(spec.user_row(h)?.to_vec())
            }
            GroundTruth::StepWise { spec, labeler } => {
                if path_reach(spec, policy, h) <= 0.0 {
                    return Err(Error::UndefinedConditional(format!("[{}] under `{}`", spec.key(h), policy.tag())));
                }
                let nu = spec.user_alphabet().len();
                let mut out = vec![0.0; nu * labeler.controls().len()];
                for (u, &p) in spec.user_row(h)?.iter().enumerate() {
                    if p > 0.0 {
                        for (z, &pz) in labeler.row(&h.child(u as Symbol))?.iter().enumerate() {
                            out[z * nu + u] = p * pz;
                        }
                    }
                }
                Ok(out)
            }
            GroundTruth::Parameterized(pd) => {
                let weights = latent_path_sum(pd, policy, h)?;
                latent_user_conditional(pd, h, &weights)?.ok_or_else(|| {
                    Error::UndefinedConditional(format!(
                        "[{}] under `{}` and the fixed (z0, c)",
                        pd.shape().key(h),
                        policy.tag()
                    ))
                })
            }
        }
    }

    /// `P^π(a | h, u, control) / π(a | h, u)`; non-unit only when the control
    /// is informative about the action.
    pub fn agent_factor(&self, policy: &AgentPolicy, control: Symbol, pre_action: &History, a: Symbol) -> Result<f64> {
        match self {
            GroundTruth::PostHoc { .. } => {
                let table = self.beliefs(policy)?;
                let before = table.posterior(pre_action)?[control as usize];
                let after = table.posterior(&pre_action.child(a))?[control as usize];
                if before <= 0.0 {
                    return Err(Error::ZeroDenominator(format!("agent factor at {:?}", pre_action.symbols())));
                }
                Ok(after / before)
            }
            GroundTruth::Apriori(c) => {
                let before = c.posterior(pre_action)?[control as usize];
                let after = c.posterior(&pre_action.child(a))?[control as usize];
                if before <= 0.0 {
                    return Err(Error::ZeroDenominator(format!("agent factor at {:?}", pre_action.symbols())));
                }
                Ok(after / before)
            }
            // Step controls and latent states are never observed by the agent.
            GroundTruth::StepWise { .. } | GroundTruth::Parameterized(_) => Ok(1.0),
        }
    }
}

fn policy_prob(policy: &AgentPolicy, state: &History, a: Symbol) -> f64 {
    policy.action_row(state).ok().and_then(|r| r.get(a as usize).copied()).unwrap_or(0.0)
}

/// `P^π(h)` under `spec` (0 when any factor is missing or zero).
fn path_reach(spec: &EnvironmentSpec, policy: &AgentPolicy, h: &History) -> f64 {
    let mut p = 1.0;
    let mut prefix = History::root();
    for (i, &s) in h.symbols().iter().enumerate() {
        p *= if i % 2 == 0 {
            spec.user_row(&prefix).ok().and_then(|r| r.get(s as usize).copied()).unwrap_or(0.0)
        } else {
            policy_prob(policy, &prefix, s)
        };
        if p == 0.0 {
            return 0.0;
        }
        prefix.push(s);
    }
    p
}

/// Brute-force sum over latent paths `z_{1:t-1}`, keeping the policy factors
/// inside the sum: returns `P^π(z_t, h_{t-1} | z0, c)` for each `z_t`.
fn latent_path_sum(pd: &ParameterizedDynamics, policy: &AgentPolicy, h: &History) -> Result<Vec<f64>> {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        pd: &ParameterizedDynamics,
        policy: &AgentPolicy,
        h: &History,
        k: usize,
        t: usize,
        previous: Symbol,
        weight: f64,
        out: &mut [f64],
    ) -> Result<()> {
        if k == t {
            for (z, &pz) in pd.transition_row(h, previous)?.iter().enumerate() {
                out[z] += weight * pz;
            }
            return Ok(());
        }
        let before = h.steps_prefix(k - 1);
        let (u, a) = (h.user(k), h.agent(k));
        let pa = policy_prob(policy, &before.child(u), a);
        let trans = pd.transition_row(&before, previous)?;
        for (z, &pz) in trans.iter().enumerate() {
            let w = weight * pz * pd.response_row(&before, z as Symbol)?[u as usize] * pa;
            if w > 0.0 {
                rec(pd, policy, h, k + 1, t, z as Symbol, w, out)?;
            }
        }
        Ok(())
    }
    let mut out = vec![0.0; pd.latent().len()];
    rec(pd, policy, h, 1, h.completed_steps() + 1, pd.initial_state(), 1.0, &mut out)?;
    Ok(out)
}

/// `P^π(u_t | h_{t-1}, z0, c)` from path-sum latent weights. Latent states
/// sharing a response row are pooled first, so a response that ignores the
/// latent state is returned bit-exactly.
fn latent_user_conditional(pd: &ParameterizedDynamics, h: &History, weights: &[f64]) -> Result<Option<Vec<f64>>> {
    let mut pooled: Vec<(f64, &[f64])> = Vec::new();
    for (z, &w) in weights.iter().enumerate() {
        let row = pd.response_row(h, z as Symbol)?;
        match pooled.iter_mut().find(|(_, r)| *r == row) {
            Some(entry) => entry.0 += w,
            None => pooled.push((w, row)),
        }
    }
    let total: f64 = pooled.iter().map(|(w, _)| w).sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let mut out = vec![0.0; pd.shape().user.len()];
    for (w, row) in pooled {
        let share = w / total;
        for (o, p) in out.iter_mut().zip(row) {
            *o += share * p;
        }
    }
    Ok(Some(out))
}

/// Materialized simulator transition table.
#[derive(Debug, Clone)]
pub struct SimulatorKernel {
    kind: KernelKind,
    truth: Arc<GroundTruth>,
    trained_under: Option<AgentPolicy>,
    controls: Alphabet,
    prior: Vec<f64>,
    rows: HashMap<(Symbol, History), Vec<f64>>,
    latent_joint: HashMap<History, Vec<f64>>,
}

impl SimulatorKernel {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn truth(&self) -> &Arc<GroundTruth> {
        &self.truth
    }

    pub fn shape(&self) -> &Shape {
        self.truth.shape()
    }

    /// Policy whose behavior measure the kernel was fitted to, if any.
    pub fn trained_under(&self) -> Option<&AgentPolicy> {
        self.trained_under.as_ref()
    }

    /// Global control values, or the step-control alphabet for dynamic kernels.
    pub fn controls(&self) -> &Alphabet {
        &self.controls
    }

    /// Distribution over global controls (the learned prior for post-hoc kernels).
    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn emission_width(&self) -> usize {
        self.truth.emission_width()
    }

    pub fn user_of(&self, emission: Symbol) -> Symbol {
        (emission as usize % self.shape().user.len()) as Symbol
    }

    pub fn step_control_of(&self, emission: Symbol) -> Symbol {
        (emission as usize / self.shape().user.len()) as Symbol
    }

    pub fn rows(&self) -> &HashMap<(Symbol, History), Vec<f64>> {
        &self.rows
    }

    /// Mutable rows, for fault-injection harnesses.
    pub fn rows_mut(&mut self) -> &mut HashMap<(Symbol, History), Vec<f64>> {
        &mut self.rows
    }

    pub fn emission_row(&self, control: Symbol, h: &History) -> Result<&[f64]> {
        let control = if self.kind.emits_step_control() { 0 } else { control };
        self.rows
            .get(&(control, h.clone()))
            .map(Vec::as_slice)
            .ok_or_else(|| self.missing_row(control, h))
    }

    fn missing_row(&self, control: Symbol, h: &History) -> Error {
        if let (GroundTruth::PostHoc { .. }, Some(pi)) = (&*self.truth, &self.trained_under) {
            match self.truth.beliefs(pi).and_then(|t| t.posterior(h).map(|r| r[control as usize])) {
                Err(e) => return e,
                Ok(p) if p <= 0.0 => {
                    return Error::ZeroDenominator(format!(
                        "ẑ={control} has zero posterior at [{}] under `{}`",
                        self.shape().key(h),
                        pi.tag()
                    ))
                }
                Ok(_) => {}
            }
        }
        Error::MissingContext(format!("{} kernel row at [{}] for control {control}", self.kind, self.shape().key(h)))
    }

    /// `P_sim(u | h, control)`, marginalizing the step control when present.
    pub fn user_row(&self, control: Symbol, h: &History) -> Result<Vec<f64>> {
        let row = self.emission_row(control, h)?;
        let nu = self.shape().user.len();
        let mut out = vec![0.0; nu];
        for (e, &p) in row.iter().enumerate() {
            out[e % nu] += p;
        }
        Ok(out)
    }

    /// Dynamic kernels: `P(z_t | h_{t-1})`.
    pub fn step_control_row(&self, h: &History) -> Result<Vec<f64>> {
        self.require_kind(KernelKind::DynamicState)?;
        let nu = self.shape().user.len();
        let row = self.emission_row(0, h)?;
        Ok(row.chunks(nu).map(|c| c.iter().sum()).collect())
    }

    /// Dynamic kernels: `P(u_t | h_{t-1}, z_t)`.
    pub fn conditional_user_row(&self, h: &History, z: Symbol) -> Result<Vec<f64>> {
        self.require_kind(KernelKind::DynamicState)?;
        let nu = self.shape().user.len();
        let row = self.emission_row(0, h)?;
        let block = &row[z as usize * nu..(z as usize + 1) * nu];
        let mass: f64 = block.iter().sum();
        if mass <= 0.0 {
            return Err(Error::ZeroDenominator(format!("z_t={z} has zero probability at [{}]", self.shape().key(h))));
        }
        Ok(block.iter().map(|p| p / mass).collect())
    }

    /// Parameterized kernels: joint `P(z_t, u_t | h_{t-1}, z0, c)` flattened as `z * |U| + u`.
    pub fn latent_joint(&self, h: &History) -> Result<&[f64]> {
        self.require_kind(KernelKind::ParameterizedDynamics)?;
        self.latent_joint
            .get(h)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("latent joint at [{}]", self.shape().key(h))))
    }

    fn require_kind(&self, kind: KernelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Invalid(format!("{} kernel has no {kind} view", self.kind)));
        }
        Ok(())
    }

    /// Resolves a [`Control`] to the global control index used for row lookups.
    pub fn fixed_control(&self, control: Control) -> Result<Symbol> {
        match (control, self.kind) {
            (Control::Fixed(_), KernelKind::DynamicState) => {
                Err(Error::Invalid("dynamic-state kernels generate their own step controls".into()))
            }
            (Control::Fixed(z), _) if (z as usize) < self.controls.len() => Ok(z),
            (Control::Fixed(z), _) => Err(Error::Invalid(format!("control {z} outside the kernel's control set"))),
            (Control::FromPrior, KernelKind::DynamicState | KernelKind::ParameterizedDynamics) => Ok(0),
            (Control::FromPrior, _) => Err(Error::Invalid("this diagnostic needs a fixed control value".into())),
        }
    }

    /// JSON dump `{kind, controls, prior, rows: {"<control>|<history>": {symbol: p}}}`.
    pub fn to_json(&self) -> Value {
        let shape = self.shape();
        let nu = shape.user.len();
        let emission_name = |e: usize| {
            if self.kind.emits_step_control() {
                format!("{}:{}", self.controls.name((e / nu) as Symbol), shape.user.name((e % nu) as Symbol))
            } else {
                shape.user.name(e as Symbol).to_string()
            }
        };
        let mut keys: Vec<&(Symbol, History)> = self.rows.keys().collect();
        keys.sort();
        let mut rows = Map::new();
        for key in keys {
            let control = if self.kind.emits_step_control() { "*".to_string() } else { self.controls.name(key.0).to_string() };
            let mut row = Map::new();
            for (e, &p) in self.rows[key].iter().enumerate() {
                if p != 0.0 {
                    row.insert(emission_name(e), json!(p));
                }
            }
            rows.insert(format!("{control}|{}", shape.key(&key.1)), Value::Object(row));
        }
        json!({
            "kind": self.kind.as_str(),
            "trained_under": self.trained_under.as_ref().map(|p| p.tag().to_string()),
            "controls": self.controls.names(),
            "prior": self.prior,
            "rows": rows,
        })
    }
}

fn posthoc_kernel(truth: &Arc<GroundTruth>, behavior: &AgentPolicy, kind: KernelKind) -> Result<SimulatorKernel> {
    let GroundTruth::PostHoc { spec, labeler, .. } = &**truth else {
        return Err(Error::Invalid("post-hoc kernel over a non-post-hoc world".into()));
    };
    let table = truth.beliefs(behavior)?;
    let prior = table.posterior(&History::root())?.to_vec();
    let mut rows = HashMap::new();
    for (h, post) in table.states() {
        if h.is_pre_action() || h.completed_steps() >= spec.horizon() {
            continue;
        }
        let urow = spec.user_row(h)?;
        for z in labeler.controls().symbols() {
            let before = post[z as usize];
            if before <= 0.0 {
                continue;
            }
            let mut row = vec![0.0; urow.len()];
            for (u, &p) in urow.iter().enumerate() {
                if p > 0.0 {
                    row[u] = p * table.posterior(&h.child(u as Symbol))?[z as usize] / before;
                }
            }
            rows.insert((z, h.clone()), row);
        }
    }
    Ok(SimulatorKernel {
        kind,
        truth: Arc::clone(truth),
        trained_under: Some(behavior.clone()),
        controls: labeler.controls().clone(),
        prior,
        rows,
        latent_joint: HashMap::new(),
    })
}

/// Simulator trained on post-hoc labels: `P_sim(u | h, ẑ) = P(u | h) · M_t^{π_b}(u)`.
pub fn trajectory_conditioned_kernel(
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    labeler: &PostHocLabeler,
) -> Result<SimulatorKernel> {
    trajectory_conditioned_kernel_in(&GroundTruth::post_hoc(spec.clone(), labeler.clone()), behavior)
}

/// As [`trajectory_conditioned_kernel`], sharing an existing world and its belief cache.
pub fn trajectory_conditioned_kernel_in(truth: &Arc<GroundTruth>, behavior: &AgentPolicy) -> Result<SimulatorKernel> {
    posthoc_kernel(truth, behavior, KernelKind::TrajectoryConditioned)
}

/// Simulator conditioned on an `𝓕_0`-measurable control; no policy enters.
pub fn apriori_kernel(control: &AprioriControl) -> Result<SimulatorKernel> {
    control.validate()?;
    let mut rows = HashMap::new();
    for z in control.controls().symbols() {
        for (h, row) in control.dynamics(z).dynamics() {
            rows.insert((z, h.clone()), row.clone());
        }
    }
    Ok(SimulatorKernel {
        kind: KernelKind::Apriori,
        truth: Arc::new(GroundTruth::Apriori(control.clone())),
        trained_under: None,
        controls: control.controls().clone(),
        prior: control.prior().to_vec(),
        rows,
        latent_joint: HashMap::new(),
    })
}

/// Simulator generating `(z_t, u_t)` jointly: `P(u_t | h_{t-1}) P_L(z_t | h_{t-1}, u_t)`.
///
/// Both factors condition only on the observable past, so the table learned
/// from the behavior measure extends unchanged to every history.
pub fn dynamic_state_kernel(
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    stepwise: &StepwiseLabeler,
) -> Result<SimulatorKernel> {
    spec.shape().check_budget()?;
    let nu = spec.user_alphabet().len();
    let nz = stepwise.controls().len();
    let mut rows = HashMap::new();
    for (h, urow) in spec.dynamics() {
        if h.completed_steps() >= spec.horizon() {
            continue;
        }
        let mut joint = vec![0.0; nz * nu];
        for (u, &pu) in urow.iter().enumerate() {
            if pu > 0.0 {
                for (z, &pz) in stepwise.row(&h.child(u as Symbol))?.iter().enumerate() {
                    joint[z * nu + u] = pu * pz;
                }
            }
        }
        rows.insert((0, h.clone()), joint);
    }
    Ok(SimulatorKernel {
        kind: KernelKind::DynamicState,
        truth: Arc::new(GroundTruth::StepWise { spec: spec.clone(), labeler: stepwise.clone() }),
        trained_under: Some(behavior.clone()),
        controls: stepwise.controls().clone(),
        prior: Vec::new(),
        rows,
        latent_joint: HashMap::new(),
    })
}

/// Post-hoc simulator with one exact Bayes table per named agent policy.
#[derive(Debug, Clone)]
pub struct PolicyConditionedKernel {
    kernels: BTreeMap<String, SimulatorKernel>,
}

impl PolicyConditionedKernel {
    pub fn select(&self, tag: &str) -> Result<&SimulatorKernel> {
        self.kernels.get(tag).ok_or_else(|| Error::UnknownPolicy(tag.to_string()))
    }

    pub fn tags(&self) -> impl Iterator<Item = &str> {
        self.kernels.keys().map(String::as_str)
    }
}

pub fn policy_conditioned_kernel(
    spec: &EnvironmentSpec,
    labeler: &PostHocLabeler,
    policies: &[&AgentPolicy],
) -> Result<PolicyConditionedKernel> {
    policy_conditioned_kernel_in(&GroundTruth::post_hoc(spec.clone(), labeler.clone()), policies)
}

pub fn policy_conditioned_kernel_in(truth: &Arc<GroundTruth>, policies: &[&AgentPolicy]) -> Result<PolicyConditionedKernel> {
    let mut kernels = BTreeMap::new();
    for pi in policies {
        if kernels.contains_key(pi.tag()) {
            return Err(Error::Invalid(format!("duplicate policy tag `{}`", pi.tag())));
        }
        kernels.insert(pi.tag().to_string(), posthoc_kernel(truth, pi, KernelKind::PolicyConditioned)?);
    }
    Ok(PolicyConditionedKernel { kernels })
}

/// Latent-marginalized user kernel of a parameterized model, by forward filtering.
pub fn parameterized_dynamics_kernel(pd: &ParameterizedDynamics) -> Result<SimulatorKernel> {
    pd.validate()?;
    let shape = pd.shape();
    let nu = shape.user.len();
    let nl = pd.latent().len();
    let mut rows = HashMap::new();
    let mut joints = HashMap::new();
    let mut start = vec![0.0; nl];
    start[pd.initial_state() as usize] = 1.0;
    // (history, P(z_{t-1} | h_{t-1}, z0, c))
    let mut stack = vec![(History::root(), start)];
    while let Some((h, filtered)) = stack.pop() {
        let mut predicted = vec![0.0; nl];
        for (prev, &w) in filtered.iter().enumerate() {
            if w > 0.0 {
                for (z, &p) in pd.transition_row(&h, prev as Symbol)?.iter().enumerate() {
                    predicted[z] += w * p;
                }
            }
        }
        let mut joint = vec![0.0; nl * nu];
        for (z, &pz) in predicted.iter().enumerate() {
            if pz > 0.0 {
                for (u, &pu) in pd.response_row(&h, z as Symbol)?.iter().enumerate() {
                    joint[z * nu + u] = pz * pu;
                }
            }
        }
        let mut user = vec![0.0; nu];
        for (e, &p) in joint.iter().enumerate() {
            user[e % nu] += p;
        }
        if h.completed_steps() + 1 < shape.horizon {
            for (u, &pu) in user.iter().enumerate() {
                if pu <= 0.0 {
                    continue;
                }
                let posterior: Vec<f64> = (0..nl).map(|z| joint[z * nu + u] / pu).collect();
                for a in shape.agent.symbols() {
                    stack.push((h.child(u as Symbol).child(a), posterior.clone()));
                }
            }
        }
        rows.insert((0, h.clone()), user);
        joints.insert(h, joint);
    }
    let label = format!("{}/{}", pd.latent().name(pd.initial_state()), pd.profiles().name(pd.profile()));
    Ok(SimulatorKernel {
        kind: KernelKind::ParameterizedDynamics,
        truth: Arc::new(GroundTruth::Parameterized(pd.clone())),
        trained_under: None,
        controls: Alphabet::new([label])?,
        prior: vec![1.0],
        rows,
        latent_joint: joints,
    })
}

/// How the global control of a composed measure is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    /// Condition on one control value.
    Fixed(Symbol),
    /// Draw it from the kernel's prior (or generate step controls).
    FromPrior,
}

/// One path of a composed measure.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SimPath {
    pub control: Symbol,
    pub step_controls: Vec<Symbol>,
    pub trajectory: Trajectory,
}

/// A reachable prefix of a composed measure with its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub control: Symbol,
    pub step_controls: Vec<Symbol>,
    pub history: History,
    pub mass: f64,
}

/// `P_sim^{π}(τ | z) = ∏_t P_sim(u_t | h_{t-1}, z) π(a_t | h_{t-1}, u_t)`.
#[derive(Debug, Clone, Copy)]
pub struct ComposedMeasure<'a> {
    kernel: &'a SimulatorKernel,
    policy: &'a AgentPolicy,
    control: Control,
}

pub fn compose<'a>(kernel: &'a SimulatorKernel, policy: &'a AgentPolicy, control: Control) -> Result<ComposedMeasure<'a>> {
    if let Control::Fixed(_) = control {
        kernel.fixed_control(control)?;
    }
    Ok(ComposedMeasure { kernel, policy, control })
}

impl<'a> ComposedMeasure<'a> {
    pub fn kernel(&self) -> &'a SimulatorKernel {
        self.kernel
    }

    pub fn policy(&self) -> &'a AgentPolicy {
        self.policy
    }

    pub fn control(&self) -> Control {
        self.control
    }

    fn weighted_controls(&self) -> Vec<(Symbol, f64)> {
        match (self.control, self.kernel.kind) {
            (_, KernelKind::DynamicState) => vec![(0, 1.0)],
            (Control::Fixed(z), _) => vec![(z, 1.0)],
            (Control::FromPrior, _) => self
                .kernel
                .prior
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > 0.0)
                .map(|(z, &p)| (z as Symbol, p))
                .collect(),
        }
    }

    fn check_budget(&self) -> Result<()> {
        let shape = self.kernel.shape();
        let branching = (self.kernel.emission_width() * shape.agent.len()) as f64;
        let paths = branching.powi(shape.horizon as i32) * self.weighted_controls().len() as f64;
        if paths > EXACT_BUDGET {
            return Err(Error::BudgetExceeded { paths, budget: EXACT_BUDGET });
        }
        Ok(())
    }

    /// Every positive-probability path up to the horizon.
    pub fn enumerate(&self) -> Result<Vec<(SimPath, f64)>> {
        let steps = self.kernel.shape().horizon;
        let mut out = Vec::new();
        for state in self.states_to(steps)? {
            if state.history.completed_steps() == steps {
                out.push((
                    SimPath {
                        control: state.control,
                        step_controls: state.step_controls,
                        trajectory: Trajectory::from_history_unchecked(state.history),
                    },
                    state.mass,
                ));
            }
        }
        Ok(out)
    }

    /// All reachable prefixes (completed and pre-action) through the horizon.
    pub fn states(&self) -> Result<Vec<SimState>> {
        self.states_to(self.kernel.shape().horizon)
    }

    /// Reachable prefixes through `steps` completed steps.
    pub fn states_to(&self, steps: usize) -> Result<Vec<SimState>> {
        self.check_budget()?;
        let mut out = Vec::new();
        for (z, w) in self.weighted_controls() {
            let mut state = SimState { control: z, step_controls: Vec::new(), history: History::root(), mass: w };
            self.expand(&mut state, steps, &mut out)?;
        }
        Ok(out)
    }

    fn expand(&self, state: &mut SimState, steps: usize, out: &mut Vec<SimState>) -> Result<()> {
        out.push(state.clone());
        if state.history.completed_steps() == steps {
            return Ok(());
        }
        let row = self.kernel.emission_row(state.control, &state.history)?.to_vec();
        let mass = state.mass;
        for (e, pe) in row.into_iter().enumerate() {
            if pe <= 0.0 {
                continue;
            }
            let u = self.kernel.user_of(e as Symbol);
            if self.kernel.kind.emits_step_control() {
                state.step_controls.push(self.kernel.step_control_of(e as Symbol));
            }
            state.history.push(u);
            state.mass = mass * pe;
            out.push(state.clone());
            let arow = self.policy.action_row(&state.history)?.to_vec();
            for (a, pa) in arow.into_iter().enumerate() {
                if pa > 0.0 {
                    state.history.push(a as Symbol);
                    state.mass = mass * pe * pa;
                    self.expand(state, steps, out)?;
                    state.history.pop();
                }
            }
            state.history.pop();
            if self.kernel.kind.emits_step_control() {
                state.step_controls.pop();
            }
        }
        state.mass = mass;
        Ok(())
    }

    /// Trajectory marginal, summing over global and step controls.
    pub fn trajectory_distribution(&self) -> Result<BTreeMap<Trajectory, f64>> {
        let mut out = BTreeMap::new();
        for (path, p) in self.enumerate()? {
            *out.entry(path.trajectory).or_insert(0.0) += p;
        }
        Ok(out)
    }

    /// Marginal probability of one trajectory.
    pub fn probability(&self, tau: &Trajectory) -> Result<f64> {
        let mut total = 0.0;
        for (z, w) in self.weighted_controls() {
            let mut p = w;
            let mut h = History::root();
            for (u, a) in tau.steps() {
                if p == 0.0 {
                    break;
                }
                p *= self.kernel.user_row(z, &h)?[u as usize];
                h.push(u);
                if p == 0.0 {
                    break;
                }
                p *= policy_prob(self.policy, &h, a);
                h.push(a);
            }
            total += p;
        }
        Ok(total)
    }

    pub fn event_probability<F: Fn(&Trajectory) -> bool>(&self, event: F) -> Result<f64> {
        Ok(self.enumerate()?.iter().filter(|(p, _)| event(&p.trajectory)).map(|(_, m)| m).sum())
    }

    pub fn sample(&self, seed: u64) -> Result<SimPath> {
        self.sample_with(&mut rng_from_seed(seed))
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SimPath> {
        let control = match (self.control, self.kernel.kind) {
            (_, KernelKind::DynamicState) => 0,
            (Control::Fixed(z), _) => z,
            (Control::FromPrior, _) => sample_index(&self.kernel.prior, rng),
        };
        let mut h = History::root();
        let mut step_controls = Vec::new();
        for _ in 0..self.kernel.shape().horizon {
            let e = sample_index(self.kernel.emission_row(control, &h)?, rng);
            if self.kernel.kind.emits_step_control() {
                step_controls.push(self.kernel.step_control_of(e));
            }
            h.push(self.kernel.user_of(e));
            let a = sample_index(self.policy.action_row(&h)?, rng);
            h.push(a);
        }
        Ok(SimPath { control, step_controls, trajectory: Trajectory::from_history_unchecked(h) })
    }
}
