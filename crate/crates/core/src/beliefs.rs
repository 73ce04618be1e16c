//! Exact posteriors `P^π(ẑ | state)` over post-hoc controls and the
//! multiplicative belief updates `M_t^π`.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::env::{AgentPolicy, EnvironmentSpec, History, Symbol};
use crate::error::{Error, Result};
use crate::labeling::PostHocLabeler;

/// Posterior over controls at every prefix reachable under one policy.
///
/// Each entry is `E[P_L(ẑ | τ) | state]`, the label row averaged over all
/// completions of the state weighted by their conditional probability.
#[derive(Debug, Clone)]
pub struct BeliefTable {
    policy_tag: String,
    labeler: String,
    posterior: HashMap<History, Vec<f64>>,
    reach: HashMap<History, f64>,
}

impl BeliefTable {
    pub fn build(spec: &EnvironmentSpec, policy: &AgentPolicy, labeler: &PostHocLabeler) -> Result<Self> {
        spec.shape().check_budget()?;
        let mut table = Self {
            policy_tag: policy.tag().to_string(),
            labeler: labeler.name().to_string(),
            posterior: HashMap::new(),
            reach: HashMap::new(),
        };
        let mut h = History::root();
        table.fill(spec, policy, labeler, &mut h, 1.0)?;
        Ok(table)
    }

    fn fill(
        &mut self,
        spec: &EnvironmentSpec,
        policy: &AgentPolicy,
        labeler: &PostHocLabeler,
        h: &mut History,
        reach: f64,
    ) -> Result<Vec<f64>> {
        let row = if h.completed_steps() == spec.horizon() {
            labeler.row(h)?.to_vec()
        } else {
            let branch = if h.is_pre_action() {
                policy.action_row(h)?.to_vec()
            } else {
                spec.user_row(h)?.to_vec()
            };
            let mut acc = vec![0.0; labeler.controls().len()];
            for (s, p) in branch.into_iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                h.push(s as Symbol);
                let child = self.fill(spec, policy, labeler, h, reach * p)?;
                h.pop();
                acc.iter_mut().zip(&child).for_each(|(a, c)| *a += p * c);
            }
            acc
        };
        self.posterior.insert(h.clone(), row.clone());
        self.reach.insert(h.clone(), reach);
        Ok(row)
    }

    pub fn policy_tag(&self) -> &str {
        &self.policy_tag
    }

    pub fn labeler(&self) -> &str {
        &self.labeler
    }

    /// `P^π(ẑ | state)`; unreachable states have no posterior.
    pub fn posterior(&self, state: &History) -> Result<&[f64]> {
        self.posterior.get(state).map(Vec::as_slice).ok_or_else(|| {
            Error::UndefinedConditional(format!("{:?} under policy `{}`", state.symbols(), self.policy_tag))
        })
    }

    /// Probability of reaching `state` under the policy (0 if unreachable).
    pub fn reach(&self, state: &History) -> f64 {
        self.reach.get(state).copied().unwrap_or(0.0)
    }

    pub fn states(&self) -> impl Iterator<Item = (&History, &[f64])> {
        self.posterior.iter().map(|(h, r)| (h, r.as_slice()))
    }

    /// `M_t^π(u) = P^π(ẑ | h, u) / P^π(ẑ | h)`.
    pub fn belief_update(&self, h: &History, u: Symbol, z: Symbol) -> Result<f64> {
        if h.is_pre_action() {
            return Err(Error::Invalid("belief updates start from a completed history".into()));
        }
        let before = self.posterior(h)?[z as usize];
        let after = self.posterior(&h.child(u))?[z as usize];
        if before <= 0.0 {
            return Err(Error::ZeroDenominator(format!(
                "P(ẑ={z} | {:?}) = 0 under `{}`",
                h.symbols(),
                self.policy_tag
            )));
        }
        Ok(after / before)
    }
}

/// Memoized belief tables keyed on `(policy tag, policy fingerprint)` for one
/// fixed environment and labeler.
#[derive(Debug, Default)]
pub struct BeliefCache {
    tables: RwLock<HashMap<(String, u64), Arc<BeliefTable>>>,
}

impl BeliefCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&self, spec: &EnvironmentSpec, policy: &AgentPolicy, labeler: &PostHocLabeler) -> Result<Arc<BeliefTable>> {
        let key = (policy.tag().to_string(), policy.fingerprint());
        if let Some(t) = self.tables.read().expect("belief cache poisoned").get(&key) {
            return Ok(Arc::clone(t));
        }
        let built = Arc::new(BeliefTable::build(spec, policy, labeler)?);
        let mut guard = self.tables.write().expect("belief cache poisoned");
        Ok(Arc::clone(guard.entry(key).or_insert(built)))
    }

    pub fn len(&self) -> usize {
        self.tables.read().expect("belief cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `P^π(ẑ | state)` for one state; builds a fresh table.
pub fn posterior_belief(
    spec: &EnvironmentSpec,
    policy: &AgentPolicy,
    labeler: &PostHocLabeler,
    state: &History,
) -> Result<Vec<f64>> {
    let table = BeliefTable::build(spec, policy, labeler)?;
    if table.reach(state) <= 0.0 {
        return Err(Error::UndefinedConditional(format!("{:?} under policy `{}`", state.symbols(), policy.tag())));
    }
    table.posterior(state).map(<[f64]>::to_vec)
}

/// `M_t^π(u_t)` for one `(h_{t-1}, u_t, ẑ)`.
pub fn belief_update(
    spec: &EnvironmentSpec,
    policy: &AgentPolicy,
    labeler: &PostHocLabeler,
    h: &History,
    u: Symbol,
    z: Symbol,
) -> Result<f64> {
    BeliefTable::build(spec, policy, labeler)?.belief_update(h, u, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::enumerate_trajectories;
    use crate::fixtures;

    /// Brute-force posterior: filter enumerated trajectories by prefix.
    fn oracle_posterior(spec: &EnvironmentSpec, policy: &AgentPolicy, labeler: &PostHocLabeler, state: &History) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; labeler.controls().len()];
        let mut mass = 0.0;
        for (tau, p) in enumerate_trajectories(spec, policy).unwrap() {
            if tau.history().symbols().starts_with(state.symbols()) {
                mass += p;
                for (a, l) in acc.iter_mut().zip(labeler.row(tau.history()).unwrap()) {
                    *a += p * l;
                }
            }
        }
        (mass > 0.0).then(|| acc.into_iter().map(|a| a / mass).collect())
    }

    #[test]
    fn recommender_posteriors() {
        let fx = fixtures::recommender();
        let shape = fx.spec.shape();
        let at = |k: &str| posterior_belief(&fx.spec, &fx.behavior, &fx.labeler, &shape.parse_key(k).unwrap()).unwrap()[1];
        assert!((at("q") - 0.5).abs() < 1e-12);
        assert!((at("q,1") - 0.8).abs() < 1e-12);
        assert!((at("q,0") - 0.2).abs() < 1e-12);
    }

    #[test]
    fn two_step_belief_updates() {
        let fx = fixtures::two_step();
        let a = fx.spec.user_alphabet().index_of("A").unwrap();
        let b = fx.spec.user_alphabet().index_of("B").unwrap();
        let root = History::root();
        let mb = belief_update(&fx.spec, &fx.behavior, &fx.labeler, &root, a, 1).unwrap();
        let me = belief_update(&fx.spec, &fx.evaluation, &fx.labeler, &root, b, 1).unwrap();
        assert!((mb - 4.0 / 3.0).abs() < 1e-12);
        assert!((me - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_state_is_undefined() {
        let fx = fixtures::two_step();
        let h = fx.spec.shape().parse_key("A,a_e").unwrap();
        assert!(matches!(
            posterior_belief(&fx.spec, &fx.behavior, &fx.labeler, &h),
            Err(Error::UndefinedConditional(_))
        ));
    }

    #[test]
    fn zero_prior_control_is_a_zero_denominator() {
        let fx = fixtures::two_step();
        let h = fx.spec.shape().parse_key("A,a_b").unwrap();
        let y1 = fx.spec.user_alphabet().index_of("y1").unwrap();
        assert!(matches!(
            belief_update(&fx.spec, &fx.behavior, &fx.labeler, &h, y1, 0),
            Err(Error::ZeroDenominator(_))
        ));
    }

    #[test]
    fn constant_labeler_never_updates() {
        let fx = fixtures::recommender();
        let c = PostHocLabeler::constant("c", fx.labeler.controls().clone(), &fx.spec, &[0.4, 0.6]).unwrap();
        let table = BeliefTable::build(&fx.spec, &fx.behavior, &c).unwrap();
        for (h, _) in table.states() {
            if !h.is_pre_action() && h.completed_steps() < fx.spec.horizon() {
                for u in fx.spec.user_alphabet().symbols() {
                    if let Ok(m) = table.belief_update(h, u, 1) {
                        assert!((m - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn table_matches_brute_force_and_cache() {
        for seed in 0..5 {
            let fx = fixtures::random_environment(seed, 3);
            let cache = BeliefCache::new();
            let cached = cache.table(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            let again = cache.table(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            assert!(Arc::ptr_eq(&cached, &again));
            let fresh = BeliefTable::build(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            for (h, row) in fresh.states() {
                assert_eq!(cached.posterior(h).unwrap(), row);
                let oracle = oracle_posterior(&fx.spec, &fx.behavior, &fx.labeler, h).unwrap();
                for (x, y) in row.iter().zip(&oracle) {
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn tower_and_action_averaging() {
        for seed in 10..15 {
            let fx = fixtures::random_environment(seed, 3);
            let table = BeliefTable::build(&fx.spec, &fx.behavior, &fx.labeler).unwrap();
            for (h, post) in table.states() {
                if h.completed_steps() == fx.spec.horizon() {
                    continue;
                }
                if h.is_pre_action() {
                    let pi = fx.behavior.action_row(h).unwrap();
                    for (z, expected) in post.iter().enumerate() {
                        let avg: f64 = pi.iter().enumerate().map(|(a, p)| p * table.posterior(&h.child(a as Symbol)).unwrap()[z]).sum();
                        assert!((avg - expected).abs() < 1e-10);
                    }
                } else {
                    let pu = fx.spec.user_row(h).unwrap();
                    for z in 0..post.len() {
                        let m: f64 = pu.iter().enumerate().map(|(u, p)| p * table.belief_update(h, u as Symbol, z as Symbol).unwrap()).sum();
                        assert!((m - 1.0).abs() < 1e-10);
                    }
                }
            }
        }
    }
}
