//! Control variables and the labelers that attach them to trajectories,
//! pre-action prefixes, or the interaction's starting point.

use std::collections::HashMap;

use crate::beliefs::BeliefTable;
use crate::env::{
    check_distribution, AgentPolicy, Alphabet, EnvironmentSpec, History, Shape, Symbol, Trajectory,
};
use crate::error::{Error, Result};

/// Tolerance below which a belief difference is treated as enumeration noise.
pub const ACTION_DEPENDENCE_TOL: f64 = 1e-9;

/// Post-hoc labeler `P_L(ẑ | τ)` over complete trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct PostHocLabeler {
    name: String,
    controls: Alphabet,
    table: HashMap<History, Vec<f64>>,
}

impl PostHocLabeler {
    pub fn new(name: impl Into<String>, controls: Alphabet, table: HashMap<History, Vec<f64>>) -> Self {
        Self { name: name.into(), controls, table }
    }

    /// Tabulates `rule` on every trajectory reachable under `spec` with any agent action.
    pub fn from_fn<F>(name: impl Into<String>, controls: Alphabet, spec: &EnvironmentSpec, mut rule: F) -> Result<Self>
    where
        F: FnMut(&Trajectory) -> Vec<f64>,
    {
        let mut table = HashMap::new();
        for tau in reachable_trajectories(spec)? {
            let row = rule(&tau);
            table.insert(tau.history().clone(), row);
        }
        Ok(Self::new(name, controls, table))
    }

    pub fn constant(name: impl Into<String>, controls: Alphabet, spec: &EnvironmentSpec, row: &[f64]) -> Result<Self> {
        Self::from_fn(name, controls, spec, |_| row.to_vec())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn controls(&self) -> &Alphabet {
        &self.controls
    }

    pub fn table(&self) -> &HashMap<History, Vec<f64>> {
        &self.table
    }

    pub fn row(&self, tau: &History) -> Result<&[f64]> {
        self.table
            .get(tau)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("labeler `{}` at trajectory {:?}", self.name, tau.symbols())))
    }

    pub fn validate(&self, shape: &Shape) -> Result<()> {
        let mut errors = Vec::new();
        for (h, row) in &self.table {
            if h.len() != 2 * shape.horizon {
                errors.push(Error::Invalid(format!("labeler `{}` keyed on partial history [{}]", self.name, shape.key(h))));
            } else if let Err(e) = check_distribution(row, self.controls.len(), &format!("labeler `{}` [{}]", self.name, shape.key(h))) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// `λ·self + (1-λ)·other`, defined where both rows exist.
    pub fn mix(&self, other: &PostHocLabeler, weight: f64) -> Result<Self> {
        if self.controls != other.controls {
            return Err(Error::Invalid("mixing labelers over different control sets".into()));
        }
        let table = self
            .table
            .iter()
            .filter_map(|(h, r)| {
                other.table.get(h).map(|o| {
                    let row = r.iter().zip(o).map(|(a, b)| weight * a + (1.0 - weight) * b).collect();
                    (h.clone(), row)
                })
            })
            .collect();
        Ok(Self::new(format!("{}+{}", self.name, other.name), self.controls.clone(), table))
    }
}

/// `P_L(ẑ | τ)` for a single trajectory.
pub fn label_distribution(labeler: &PostHocLabeler, tau: &Trajectory) -> Result<Vec<f64>> {
    labeler.row(tau.history()).map(<[f64]>::to_vec)
}

/// Step-wise labeler `P_L(z_t | h_{t-1}, u_t)`, keyed only on pre-action states.
#[derive(Debug, Clone, PartialEq)]
pub struct StepwiseLabeler {
    name: String,
    controls: Alphabet,
    table: HashMap<History, Vec<f64>>,
}

impl StepwiseLabeler {
    pub fn new(name: impl Into<String>, controls: Alphabet, table: HashMap<History, Vec<f64>>) -> Result<Self> {
        if let Some(h) = table.keys().find(|h| !h.is_pre_action()) {
            return Err(Error::Invalid(format!("step-wise labeler keyed on completed history {:?}", h.symbols())));
        }
        Ok(Self { name: name.into(), controls, table })
    }

    /// Tabulates `rule` at every pre-action state reachable under any agent action.
    pub fn from_fn<F>(name: impl Into<String>, controls: Alphabet, spec: &EnvironmentSpec, mut rule: F) -> Result<Self>
    where
        F: FnMut(&History) -> Vec<f64>,
    {
        let mut table = HashMap::new();
        for hu in reachable_pre_action_states(spec)? {
            let row = rule(&hu);
            table.insert(hu, row);
        }
        Self::new(name, controls, table)
    }

    /// The filtered posterior `P^{π_b}(ẑ | h_{t-1}, u_t)` of a post-hoc labeler,
    /// which is a valid step-wise control by construction.
    pub fn from_posthoc(spec: &EnvironmentSpec, behavior: &AgentPolicy, labeler: &PostHocLabeler) -> Result<Self> {
        let beliefs = BeliefTable::build(spec, behavior, labeler)?;
        let table = beliefs
            .states()
            .filter(|(h, _)| h.is_pre_action())
            .map(|(h, row)| (h.clone(), row.to_vec()))
            .collect();
        Self::new(format!("{}@{}", labeler.name(), behavior.tag()), labeler.controls().clone(), table)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn controls(&self) -> &Alphabet {
        &self.controls
    }

    pub fn table(&self) -> &HashMap<History, Vec<f64>> {
        &self.table
    }

    pub fn row(&self, pre_action: &History) -> Result<&[f64]> {
        self.table
            .get(pre_action)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("step-wise labeler `{}` at {:?}", self.name, pre_action.symbols())))
    }

    pub fn validate(&self, shape: &Shape) -> Result<()> {
        let mut errors = Vec::new();
        for (h, row) in &self.table {
            if let Err(e) = check_distribution(row, self.controls.len(), &format!("step-wise labeler `{}` [{}]", self.name, shape.key(h))) {
                errors.push(e);
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Post-hoc view of the step-`t` control: `P(z | τ) = P_L(z_t | h_{t-1}, u_t)`.
    pub fn lift_at(&self, spec: &EnvironmentSpec, step: usize) -> Result<PostHocLabeler> {
        if step == 0 || step > spec.horizon() {
            return Err(Error::Invalid(format!("step {step} outside 1..={}", spec.horizon())));
        }
        let mut table = HashMap::new();
        for tau in reachable_trajectories(spec)? {
            let pre = tau.history().prefix(2 * step - 1);
            table.insert(tau.history().clone(), self.row(&pre)?.to_vec());
        }
        Ok(PostHocLabeler::new(format!("{}[t={step}]", self.name), self.controls.clone(), table))
    }
}

/// `P_L(z_t | h_{t-1}, u_t)`.
pub fn stepwise_label_distribution(labeler: &StepwiseLabeler, pre_action: &History) -> Result<Vec<f64>> {
    if !pre_action.is_pre_action() {
        return Err(Error::Invalid("step-wise labels are keyed on pre-action states".into()));
    }
    labeler.row(pre_action).map(<[f64]>::to_vec)
}

/// Control fixed before the interaction: a prior over `𝒵` and the user
/// dynamics `P(u_t | h_{t-1}, z)` for every control value.
#[derive(Debug, Clone, PartialEq)]
pub struct AprioriControl {
    name: String,
    controls: Alphabet,
    prior: Vec<f64>,
    dynamics: Vec<EnvironmentSpec>,
}

impl AprioriControl {
    pub fn new(name: impl Into<String>, controls: Alphabet, prior: Vec<f64>, dynamics: Vec<EnvironmentSpec>) -> Result<Self> {
        if dynamics.len() != controls.len() {
            return Err(Error::Invalid(format!(
                "{} dynamics tables for {} controls",
                dynamics.len(),
                controls.len()
            )));
        }
        if dynamics.windows(2).any(|w| w[0].shape() != w[1].shape()) {
            return Err(Error::Invalid("a-priori dynamics tables disagree on alphabets or horizon".into()));
        }
        Ok(Self { name: name.into(), controls, prior, dynamics })
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if let Err(e) = check_distribution(&self.prior, self.controls.len(), &format!("a-priori prior `{}`", self.name)) {
            errors.push(e);
        }
        for d in &self.dynamics {
            if let Err(e) = crate::env::validate_environment(d.clone()) {
                errors.extend(e.violations().into_iter().cloned());
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn controls(&self) -> &Alphabet {
        &self.controls
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn shape(&self) -> &Shape {
        self.dynamics[0].shape()
    }

    pub fn dynamics(&self, z: Symbol) -> &EnvironmentSpec {
        &self.dynamics[z as usize]
    }

    /// `prior(z) ∏_s P(u_s | h_{s-1}, z)` along the user symbols of `h`.
    pub(crate) fn user_likelihood(&self, z: Symbol, h: &History) -> f64 {
        let spec = &self.dynamics[z as usize];
        let mut w = self.prior[z as usize];
        let mut prefix = History::root();
        for (i, &s) in h.symbols().iter().enumerate() {
            if w == 0.0 {
                break;
            }
            if i % 2 == 0 {
                w *= spec.user_row(&prefix).map(|r| r[s as usize]).unwrap_or(0.0);
            }
            prefix.push(s);
        }
        w
    }

    /// Posterior `P(z | h)`; agent factors cancel because `z` precedes every action.
    pub fn posterior(&self, h: &History) -> Result<Vec<f64>> {
        let w: Vec<f64> = self.controls.symbols().map(|z| self.user_likelihood(z, h)).collect();
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            return Err(Error::UndefinedConditional(format!("history {:?} under a-priori control `{}`", h.symbols(), self.name)));
        }
        Ok(w.into_iter().map(|x| x / total).collect())
    }

    /// The observable population dynamics `P(u | h) = Σ_z P(z | h) P(u | h, z)`.
    pub fn mixture_environment(&self) -> Result<EnvironmentSpec> {
        let shape = self.shape().clone();
        let width = shape.user.len();
        let mut failure = None;
        let spec = EnvironmentSpec::from_fn(shape, |h| {
            let mut row = vec![0.0; width];
            match self.posterior(h) {
                Ok(post) => {
                    for (z, pz) in post.iter().enumerate() {
                        if *pz > 0.0 {
                            match self.dynamics[z].user_row(h) {
                                Ok(r) => row.iter_mut().zip(r).for_each(|(acc, p)| *acc += pz * p),
                                Err(e) => failure = Some(e),
                            }
                        }
                    }
                }
                Err(e) => failure = Some(e),
            }
            row
        })?;
        match failure {
            Some(e) => Err(e),
            None => Ok(spec),
        }
    }

    /// Post-hoc view labelling each trajectory with `P(z | τ)`.
    pub fn posterior_labeler(&self) -> Result<PostHocLabeler> {
        let env = self.mixture_environment()?;
        let mut table = HashMap::new();
        for tau in reachable_trajectories(&env)? {
            let post = self.posterior(tau.history())?;
            table.insert(tau.history().clone(), post);
        }
        Ok(PostHocLabeler::new(format!("{}|posterior", self.name), self.controls.clone(), table))
    }

    /// Post-hoc view that ignores the trajectory and returns the prior.
    pub fn constant_labeler(&self) -> Result<PostHocLabeler> {
        let env = self.mixture_environment()?;
        PostHocLabeler::constant(format!("{}|prior", self.name), self.controls.clone(), &env, &self.prior)
    }
}

/// Learned prior `∫ P_L(ẑ | τ) dP^π(τ)`.
pub fn learned_prior(labeler: &PostHocLabeler, spec: &EnvironmentSpec, policy: &AgentPolicy) -> Result<Vec<f64>> {
    let table = BeliefTable::build(spec, policy, labeler)?;
    table.posterior(&History::root()).map(<[f64]>::to_vec)
}

/// One `(h_{t-1}, u_t, a_t)` state where the label carries information about `a_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DependenceWitness {
    pub step: usize,
    pub state: History,
    pub control: Symbol,
    pub with_action: f64,
    pub without_action: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDependence {
    pub dependent: bool,
    pub witnesses: Vec<DependenceWitness>,
}

/// Action-dependence test: does `P^{π_b}(ẑ | h, u, a)` differ from `P^{π_b}(ẑ | h, u)`?
pub fn is_action_dependent(labeler: &PostHocLabeler, spec: &EnvironmentSpec, behavior: &AgentPolicy) -> Result<ActionDependence> {
    is_action_dependent_from(labeler, spec, behavior, 1)
}

/// As [`is_action_dependent`], restricted to steps `t >= first_step`.
pub fn is_action_dependent_from(
    labeler: &PostHocLabeler,
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    first_step: usize,
) -> Result<ActionDependence> {
    let table = BeliefTable::build(spec, behavior, labeler)?;
    let mut witnesses = Vec::new();
    let mut states: Vec<(&History, &[f64])> = table
        .states()
        .filter(|(h, _)| !h.is_empty() && !h.is_pre_action() && h.completed_steps() >= first_step)
        .collect();
    states.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
    for (hua, post_a) in states {
        let hu = hua.prefix(hua.len() - 1);
        let post_u = table.posterior(&hu)?;
        for z in labeler.controls().symbols() {
            let (with_action, without_action) = (post_a[z as usize], post_u[z as usize]);
            if (with_action - without_action).abs() > ACTION_DEPENDENCE_TOL {
                witnesses.push(DependenceWitness {
                    step: hua.completed_steps(),
                    state: hua.clone(),
                    control: z,
                    with_action,
                    without_action,
                });
            }
        }
    }
    Ok(ActionDependence { dependent: !witnesses.is_empty(), witnesses })
}

/// Any labeler kind, as stored in an environment file.
#[derive(Debug, Clone, PartialEq)]
pub enum Labeler {
    PostHoc(PostHocLabeler),
    StepWise(StepwiseLabeler),
    Apriori(AprioriControl),
}

impl Labeler {
    pub fn kind(&self) -> &'static str {
        match self {
            Labeler::PostHoc(_) => "post_hoc",
            Labeler::StepWise(_) => "step_wise",
            Labeler::Apriori(_) => "a_priori",
        }
    }
}

/// Trajectories reachable under `spec` with every agent action allowed.
pub(crate) fn reachable_trajectories(spec: &EnvironmentSpec) -> Result<Vec<Trajectory>> {
    spec.shape().check_budget()?;
    let mut out = Vec::new();
    let mut stack = vec![History::root()];
    while let Some(h) = stack.pop() {
        if h.completed_steps() == spec.horizon() {
            out.push(Trajectory::new(h, spec.horizon())?);
            continue;
        }
        for (u, &p) in spec.user_row(&h)?.iter().enumerate() {
            if p > 0.0 {
                let hu = h.child(u as Symbol);
                for a in spec.agent_alphabet().symbols() {
                    stack.push(hu.child(a));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

pub(crate) fn reachable_pre_action_states(spec: &EnvironmentSpec) -> Result<Vec<History>> {
    spec.shape().check_budget()?;
    let mut out = Vec::new();
    let mut stack = vec![History::root()];
    while let Some(h) = stack.pop() {
        if h.completed_steps() == spec.horizon() {
            continue;
        }
        for (u, &p) in spec.user_row(&h)?.iter().enumerate() {
            if p > 0.0 {
                let hu = h.child(u as Symbol);
                for a in spec.agent_alphabet().symbols() {
                    stack.push(hu.child(a));
                }
                out.push(hu);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn recommender_labels_follow_the_purchase() {
        let fx = fixtures::recommender();
        let shape = fx.spec.shape();
        let bought = shape.parse_trajectory("q,1,y1,0").unwrap();
        let left = shape.parse_trajectory("q,0,y0,0").unwrap();
        assert_eq!(label_distribution(&fx.labeler, &bought).unwrap(), vec![0.0, 1.0]);
        assert_eq!(label_distribution(&fx.labeler, &left).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn constant_labeler_is_constant() {
        let fx = fixtures::recommender();
        let c = PostHocLabeler::constant("c", fx.labeler.controls().clone(), &fx.spec, &[0.3, 0.7]).unwrap();
        for tau in reachable_trajectories(&fx.spec).unwrap() {
            assert_eq!(label_distribution(&c, &tau).unwrap(), vec![0.3, 0.7]);
        }
    }

    #[test]
    fn missing_label_row_is_an_error() {
        let fx = fixtures::recommender();
        let tau = fx.spec.shape().parse_trajectory("q,1,y1,0").unwrap();
        let mut table = fx.labeler.table().clone();
        table.remove(tau.history());
        let partial = PostHocLabeler::new("partial", fx.labeler.controls().clone(), table);
        assert!(matches!(label_distribution(&partial, &tau), Err(Error::MissingContext(_))));
    }

    #[test]
    fn learned_prior_on_fixtures() {
        let fx = fixtures::recommender();
        let prior = learned_prior(&fx.labeler, &fx.spec, &fx.behavior).unwrap();
        assert!((prior[1] - 0.5).abs() < 1e-12);
        let two = fixtures::two_step();
        let pb = learned_prior(&two.labeler, &two.spec, &two.behavior).unwrap();
        let pe = learned_prior(&two.labeler, &two.spec, &two.evaluation).unwrap();
        assert!((pb[1] - 0.75).abs() < 1e-12);
        assert!((pe[1] - 0.30).abs() < 1e-12);
    }

    #[test]
    fn recommender_labeler_is_action_dependent() {
        let fx = fixtures::recommender();
        let verdict = is_action_dependent(&fx.labeler, &fx.spec, &fx.behavior).unwrap();
        assert!(verdict.dependent);
        let w = verdict
            .witnesses
            .iter()
            .find(|w| w.step == 1 && w.control == 1 && w.state == fx.spec.shape().parse_key("q,1").unwrap())
            .expect("witness at t=1 with a=1");
        assert!((w.with_action - 0.8).abs() < 1e-12);
        assert!((w.without_action - 0.5).abs() < 1e-12);
        assert_eq!(verdict.witnesses[0].step, 1);
    }

    #[test]
    fn first_symbol_labeler_is_action_independent() {
        let two = fixtures::two_step();
        let controls = Alphabet::new(["A", "B"]).unwrap();
        let by_intent = PostHocLabeler::from_fn("intent", controls, &two.spec, |tau| {
            if tau.user(1) == 0 {
                vec![0.9, 0.1]
            } else {
                vec![0.2, 0.8]
            }
        })
        .unwrap();
        let behavior = crate::env::AgentPolicy::stationary("mixed", &two.spec, &[0.5, 0.5]).unwrap();
        assert!(!is_action_dependent(&by_intent, &two.spec, &behavior).unwrap().dependent);
    }

    #[test]
    fn apriori_lifts_are_action_independent() {
        let two = fixtures::two_step();
        let control = fixtures::two_step_apriori();
        let env = control.mixture_environment().unwrap();
        let behavior = crate::env::AgentPolicy::stationary("mixed", &env, &[0.3, 0.7]).unwrap();
        let constant = control.constant_labeler().unwrap();
        let posterior = control.posterior_labeler().unwrap();
        assert!(!is_action_dependent(&constant, &env, &behavior).unwrap().dependent);
        assert!(!is_action_dependent(&posterior, &env, &behavior).unwrap().dependent);
        // The intent mixture reproduces the fixture's observable dynamics.
        for (h, row) in env.dynamics() {
            let truth = two.spec.user_row(h).unwrap();
            for (a, b) in row.iter().zip(truth) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stepwise_rows_are_stable_and_keyed_on_pre_action_states() {
        let fx = fixtures::recommender();
        let step = StepwiseLabeler::from_posthoc(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        let q = fx.spec.shape().parse_key("q").unwrap();
        let first = stepwise_label_distribution(&step, &q).unwrap();
        assert_eq!(first, stepwise_label_distribution(&step, &q).unwrap());
        assert!((first[1] - 0.5).abs() < 1e-12);
        assert!(stepwise_label_distribution(&step, &History::root()).is_err());

        let uniform = StepwiseLabeler::from_fn("u", Alphabet::new(["x", "y", "z"]).unwrap(), &fx.spec, |_| vec![1.0 / 3.0; 3]).unwrap();
        for row in uniform.table().values() {
            assert_eq!(row, &vec![1.0 / 3.0; 3]);
        }
    }

    #[test]
    fn lifted_stepwise_labels_pass_the_independence_test_from_their_step() {
        let fx = fixtures::recommender();
        let step = StepwiseLabeler::from_posthoc(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
        for t in 1..=fx.spec.horizon() {
            let lifted = step.lift_at(&fx.spec, t).unwrap();
            let verdict = is_action_dependent_from(&lifted, &fx.spec, &fx.behavior, t).unwrap();
            assert!(!verdict.dependent, "step {t}: {:?}", verdict.witnesses);
        }
    }

    #[test]
    fn learned_prior_is_linear_in_the_labeler() {
        let fx = fixtures::recommender();
        let other = PostHocLabeler::constant("c", fx.labeler.controls().clone(), &fx.spec, &[0.9, 0.1]).unwrap();
        let p1 = learned_prior(&fx.labeler, &fx.spec, &fx.behavior).unwrap();
        let p2 = learned_prior(&other, &fx.spec, &fx.behavior).unwrap();
        for lambda in [0.0, 0.5, 1.0] {
            let mixed = fx.labeler.mix(&other, lambda).unwrap();
            let pm = learned_prior(&mixed, &fx.spec, &fx.behavior).unwrap();
            for z in 0..2 {
                assert!((pm[z] - (lambda * p1[z] + (1.0 - lambda) * p2[z])).abs() < 1e-12);
            }
        }
    }
}
