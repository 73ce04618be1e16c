//! Finite-horizon interaction environments.
//!
//! A history is stored as one flat symbol sequence `u1, a1, u2, a2, ...`:
//! even positions are user symbols, odd positions agent symbols. An
//! even-length history is a completed prefix `h_{t-1}`; an odd-length one is
//! the pre-action state `(h_{t-1}, u_t)` with the pending user symbol last.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Symbol index into an [`Alphabet`].
pub type Symbol = u16;

/// Row-sum tolerance for every stored distribution.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Maximum number of `(|U|·|A|)^T` paths the exact engine will enumerate.
pub const EXACT_BUDGET: f64 = 2.0e6;

/// Horizons above this accumulate path probabilities in log space.
pub const LOG_SPACE_HORIZON: usize = 12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    names: Vec<String>,
}

impl Alphabet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Invalid("alphabet must be non-empty".into()));
        }
        if names.len() > Symbol::MAX as usize {
            return Err(Error::Invalid("alphabet too large".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(',') || n.contains('\t') || n.contains('\n') {
                return Err(Error::Invalid(format!("bad symbol name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate symbol {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, s: Symbol) -> &str {
        &self.names[s as usize]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<Symbol> {
        self.names.iter().position(|n| n == name).map(|i| i as Symbol)
    }

    pub fn symbols(&self) -> impl Iterator<Item = Symbol> {
        0..self.names.len() as Symbol
    }
}

/// Observable interaction prefix; see the module docs for the encoding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct History(Vec<Symbol>);

impl History {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    pub fn from_symbols(symbols: Vec<Symbol>) -> Self {
        Self(symbols)
    }

    pub fn symbols(&self) -> &[Symbol] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of completed (user, agent) steps.
    pub fn completed_steps(&self) -> usize {
        self.0.len() / 2
    }

    /// True for `(h_{t-1}, u_t)` states awaiting the agent's action.
    pub fn is_pre_action(&self) -> bool {
        self.0.len() % 2 == 1
    }

    /// The pending user symbol of a pre-action state.
    pub fn pending_user(&self) -> Option<Symbol> {
        self.is_pre_action().then(|| *self.0.last().unwrap())
    }

    pub fn child(&self, s: Symbol) -> Self {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.extend_from_slice(&self.0);
        v.push(s);
        Self(v)
    }

    pub fn push(&mut self, s: Symbol) {
        self.0.push(s);
    }

    pub fn pop(&mut self) -> Option<Symbol> {
        self.0.pop()
    }

    pub fn prefix(&self, len: usize) -> Self {
        Self(self.0[..len].to_vec())
    }

    /// Completed history `h_{t}` for `t` steps.
    pub fn steps_prefix(&self, t: usize) -> Self {
        self.prefix(2 * t)
    }

    pub fn user(&self, t: usize) -> Symbol {
        self.0[2 * (t - 1)]
    }

    pub fn agent(&self, t: usize) -> Symbol {
        self.0[2 * (t - 1) + 1]
    }
}

/// A complete length-`T` trajectory `(u1, a1, ..., uT, aT)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Trajectory(History);

impl Trajectory {
    pub fn new(history: History, horizon: usize) -> Result<Self> {
        if history.len() != 2 * horizon {
            return Err(Error::Invalid(format!(
                "trajectory has {} symbols, horizon {horizon} needs {}",
                history.len(),
                2 * horizon
            )));
        }
        Ok(Self(history))
    }

    pub(crate) fn from_history_unchecked(history: History) -> Self {
        Self(history)
    }

    pub fn history(&self) -> &History {
        &self.0
    }

    pub fn horizon(&self) -> usize {
        self.0.completed_steps()
    }

    pub fn user(&self, t: usize) -> Symbol {
        self.0.user(t)
    }

    pub fn agent(&self, t: usize) -> Symbol {
        self.0.agent(t)
    }

    pub fn steps(&self) -> impl Iterator<Item = (Symbol, Symbol)> + '_ {
        self.0 .0.chunks(2).map(|c| (c[0], c[1]))
    }
}

/// Alphabets and horizon shared by every table over one environment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    pub user: Alphabet,
    pub agent: Alphabet,
    pub horizon: usize,
}

impl Shape {
    pub fn new(user: Alphabet, agent: Alphabet, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        Ok(Self { user, agent, horizon })
    }

    /// `(|U|·|A|)^T`, the number of paths exact enumeration may touch.
    pub fn path_count(&self) -> f64 {
        ((self.user.len() * self.agent.len()) as f64).powi(self.horizon as i32)
    }

    pub fn check_budget(&self) -> Result<()> {
        let paths = self.path_count();
        if paths > EXACT_BUDGET {
            return Err(Error::BudgetExceeded { paths, budget: EXACT_BUDGET });
        }
        Ok(())
    }

    /// Comma-joined symbol names, e.g. `q,1,y1`.
    pub fn key(&self, h: &History) -> String {
        h.symbols()
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                if i % 2 == 0 {
                    self.user.name(s)
                } else {
                    self.agent.name(s)
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_key(&self, key: &str) -> Result<History> {
        let key = key.trim();
        if key.is_empty() {
            return Ok(History::root());
        }
        let mut out = Vec::new();
        for (i, tok) in key.split(',').enumerate() {
            let tok = tok.trim();
            let alphabet = if i % 2 == 0 { &self.user } else { &self.agent };
            let s = alphabet
                .index_of(tok)
                .ok_or_else(|| Error::Parse(format!("unknown symbol {tok:?} in history {key:?}")))?;
            out.push(s);
        }
        if out.len() > 2 * self.horizon {
            return Err(Error::Parse(format!("history {key:?} longer than horizon")));
        }
        Ok(History(out))
    }

    pub fn parse_trajectory(&self, key: &str) -> Result<Trajectory> {
        Trajectory::new(self.parse_key(key)?, self.horizon)
    }
}

pub(crate) fn check_distribution(row: &[f64], width: usize, context: &str) -> Result<()> {
    if row.len() != width {
        return Err(Error::Invalid(format!(
            "row at {context} has {} entries, expected {width}",
            row.len()
        )));
    }
    let sum: f64 = row.iter().sum();
    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    if !sum.is_finite() || (sum - 1.0).abs() > NORMALIZATION_TOL || min < 0.0 || min.is_nan() {
        return Err(Error::Normalization { context: context.to_string(), sum, min });
    }
    Ok(())
}

/// Draws an index from a normalized row by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> Symbol {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if x < acc {
                return i as Symbol;
            }
        }
    }
    last as Symbol
}

/// Seeded generator used by every stochastic operation.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from `(root, index)` (splitmix64).
pub fn derive_seed(root: u64, index: u64) -> u64 {
    let mut z = root ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// True user dynamics `P(u_t | h_{t-1})` over a finite environment.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentSpec {
    shape: Shape,
    dynamics: HashMap<History, Vec<f64>>,
}

impl EnvironmentSpec {
    /// Builds a spec without validating it; see [`validate_environment`].
    pub fn new(shape: Shape, dynamics: HashMap<History, Vec<f64>>) -> Self {
        Self { shape, dynamics }
    }

    /// Tabulates `dynamics(h)` at every history reachable under any agent action.
    pub fn from_fn<F>(shape: Shape, mut dynamics: F) -> Result<Self>
    where
        F: FnMut(&History) -> Vec<f64>,
    {
        shape.check_budget()?;
        let mut table = HashMap::new();
        let mut stack = vec![History::root()];
        while let Some(h) = stack.pop() {
            let row = dynamics(&h);
            if h.completed_steps() + 1 < shape.horizon {
                for u in shape.user.symbols() {
                    if row.get(u as usize).copied().unwrap_or(0.0) > 0.0 {
                        let hu = h.child(u);
                        for a in shape.agent.symbols() {
                            stack.push(hu.child(a));
                        }
                    }
                }
            }
            table.insert(h, row);
        }
        Ok(Self { shape, dynamics: table })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn horizon(&self) -> usize {
        self.shape.horizon
    }

    pub fn user_alphabet(&self) -> &Alphabet {
        &self.shape.user
    }

    pub fn agent_alphabet(&self) -> &Alphabet {
        &self.shape.agent
    }

    pub fn dynamics(&self) -> &HashMap<History, Vec<f64>> {
        &self.dynamics
    }

    pub fn dynamics_mut(&mut self) -> &mut HashMap<History, Vec<f64>> {
        &mut self.dynamics
    }

    /// `P(· | h_{t-1})`.
    pub fn user_row(&self, h: &History) -> Result<&[f64]> {
        self.dynamics
            .get(h)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("user dynamics at [{}]", self.shape.key(h))))
    }

    pub fn key(&self, h: &History) -> String {
        self.shape.key(h)
    }
}

/// Checks normalization, completeness over reachable histories and the
/// exact-mode budget, collecting every violation.
pub fn validate_environment(spec: EnvironmentSpec) -> Result<EnvironmentSpec> {
    let mut errors = Vec::new();
    if let Err(e) = spec.shape.check_budget() {
        return Err(Error::Validation(vec![e]));
    }
    let width = spec.shape.user.len();
    let mut keys: Vec<&History> = spec.dynamics.keys().collect();
    keys.sort();
    for h in keys {
        if h.is_pre_action() || h.completed_steps() >= spec.shape.horizon {
            errors.push(Error::Invalid(format!(
                "user dynamics keyed on non-completed history [{}]",
                spec.key(h)
            )));
            continue;
        }
        if let Err(e) = check_distribution(&spec.dynamics[h], width, &format!("user dynamics [{}]", spec.key(h))) {
            errors.push(e);
        }
    }
    let mut stack = vec![History::root()];
    while let Some(h) = stack.pop() {
        match spec.dynamics.get(&h) {
            None => errors.push(Error::MissingContext(format!("user dynamics at [{}]", spec.key(&h)))),
            Some(row) => {
                if h.completed_steps() + 1 < spec.shape.horizon {
                    for u in spec.shape.user.symbols() {
                        if row.get(u as usize).copied().unwrap_or(0.0) > 0.0 {
                            let hu = h.child(u);
                            for a in spec.shape.agent.symbols() {
                                stack.push(hu.child(a));
                            }
                        }
                    }
                }
            }
        }
    }
    if errors.is_empty() {
        Ok(spec)
    } else {
        Err(Error::Validation(errors))
    }
}

/// Conditional action table `π(a_t | h_{t-1}, u_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPolicy {
    tag: String,
    table: HashMap<History, Vec<f64>>,
    fingerprint: u64,
}

impl AgentPolicy {
    pub fn new(tag: impl Into<String>, table: HashMap<History, Vec<f64>>) -> Self {
        let fingerprint = fingerprint_table(&table);
        Self { tag: tag.into(), table, fingerprint }
    }

    /// Tabulates `rule(h, u)` at every pre-action state reachable under
    /// `spec` composed with the rule itself.
    pub fn from_fn<F>(tag: impl Into<String>, spec: &EnvironmentSpec, mut rule: F) -> Result<Self>
    where
        F: FnMut(&History) -> Vec<f64>,
    {
        spec.shape.check_budget()?;
        let mut table = HashMap::new();
        let mut stack = vec![History::root()];
        while let Some(h) = stack.pop() {
            if h.completed_steps() >= spec.horizon() {
                continue;
            }
            let urow = spec.user_row(&h)?;
            for (u, &pu) in urow.iter().enumerate() {
                if pu <= 0.0 {
                    continue;
                }
                let hu = h.child(u as Symbol);
                let arow = rule(&hu);
                for (a, &pa) in arow.iter().enumerate() {
                    if pa > 0.0 {
                        stack.push(hu.child(a as Symbol));
                    }
                }
                table.insert(hu, arow);
            }
        }
        Ok(Self::new(tag, table))
    }

    /// A policy that ignores the history and plays `row` at every step.
    pub fn stationary(tag: impl Into<String>, spec: &EnvironmentSpec, row: &[f64]) -> Result<Self> {
        Self::from_fn(tag, spec, |_| row.to_vec())
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Content hash of the action table; cache keys combine it with the tag.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn table(&self) -> &HashMap<History, Vec<f64>> {
        &self.table
    }

    pub fn action_row(&self, h: &History) -> Result<&[f64]> {
        self.table
            .get(h)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingContext(format!("policy `{}` at pre-action state {:?}", self.tag, h.symbols())))
    }

    pub fn validate(&self, spec: &EnvironmentSpec) -> Result<()> {
        let mut errors = Vec::new();
        let width = spec.agent_alphabet().len();
        let mut keys: Vec<&History> = self.table.keys().collect();
        keys.sort();
        for h in keys {
            if !h.is_pre_action() || h.completed_steps() >= spec.horizon() {
                errors.push(Error::Invalid(format!(
                    "policy `{}` keyed on non-pre-action state [{}]",
                    self.tag,
                    spec.key(h)
                )));
                continue;
            }
            if let Err(e) = check_distribution(&self.table[h], width, &format!("policy `{}` [{}]", self.tag, spec.key(h))) {
                errors.push(e);
            }
        }
        let mut stack = vec![History::root()];
        while let Some(h) = stack.pop() {
            if h.completed_steps() >= spec.horizon() {
                continue;
            }
            let Ok(urow) = spec.user_row(&h) else {
                errors.push(Error::MissingContext(format!("user dynamics at [{}]", spec.key(&h))));
                continue;
            };
            for (u, &pu) in urow.iter().enumerate() {
                if pu <= 0.0 {
                    continue;
                }
                let hu = h.child(u as Symbol);
                match self.table.get(&hu) {
                    None => errors.push(Error::MissingContext(format!(
                        "policy `{}` at [{}]",
                        self.tag,
                        spec.key(&hu)
                    ))),
                    Some(arow) => {
                        for (a, &pa) in arow.iter().enumerate() {
                            if pa > 0.0 {
                                stack.push(hu.child(a as Symbol));
                            }
                        }
                    }
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    /// Same table under a different tag.
    pub fn retagged(&self, tag: impl Into<String>) -> Self {
        Self { tag: tag.into(), ..self.clone() }
    }
}

impl fmt::Display for AgentPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag)
    }
}

pub(crate) fn fingerprint_table(table: &HashMap<History, Vec<f64>>) -> u64 {
    let mut entries: Vec<(&History, &Vec<f64>)> = table.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let mut hasher = DefaultHasher::new();
    for (h, row) in entries {
        h.hash(&mut hasher);
        for p in row {
            p.to_bits().hash(&mut hasher);
        }
    }
    hasher.finish()
}

/// `P^π(τ) = ∏_t P(u_t | h_{t-1}) π(a_t | h_{t-1}, u_t)`; zero off-support.
pub fn trajectory_probability(spec: &EnvironmentSpec, policy: &AgentPolicy, tau: &Trajectory) -> f64 {
    let log_space = spec.horizon() > LOG_SPACE_HORIZON;
    let mut prob = 1.0;
    let mut log_prob = 0.0;
    let mut h = History::root();
    for (u, a) in tau.steps() {
        let pu = spec.user_row(&h).ok().and_then(|r| r.get(u as usize).copied()).unwrap_or(0.0);
        h.push(u);
        let pa = policy.action_row(&h).ok().and_then(|r| r.get(a as usize).copied()).unwrap_or(0.0);
        h.push(a);
        if pu <= 0.0 || pa <= 0.0 {
            return 0.0;
        }
        if log_space {
            log_prob += pu.ln() + pa.ln();
        } else {
            prob *= pu * pa;
        }
    }
    if log_space {
        log_prob.exp()
    } else {
        prob
    }
}

/// Every trajectory with positive probability under `P^π`, in lexicographic order.
pub fn enumerate_trajectories(spec: &EnvironmentSpec, policy: &AgentPolicy) -> Result<Vec<(Trajectory, f64)>> {
    enumerate_prefixes(spec, policy, spec.horizon())
}

/// Positive-probability completed prefixes of `steps` steps with their mass.
pub fn enumerate_prefixes(spec: &EnvironmentSpec, policy: &AgentPolicy, steps: usize) -> Result<Vec<(Trajectory, f64)>> {
    spec.shape().check_budget()?;
    let steps = steps.min(spec.horizon());
    let mut out = Vec::new();
    let mut h = History::root();
    walk(spec, policy, &mut h, 1.0, steps, &mut out)?;
    Ok(out)
}

fn walk(
    spec: &EnvironmentSpec,
    policy: &AgentPolicy,
    h: &mut History,
    mass: f64,
    steps: usize,
    out: &mut Vec<(Trajectory, f64)>,
) -> Result<()> {
    if h.completed_steps() == steps {
        out.push((Trajectory::from_history_unchecked(h.clone()), mass));
        return Ok(());
    }
    let urow = spec.user_row(h)?.to_vec();
    for (u, pu) in urow.into_iter().enumerate() {
        if pu <= 0.0 {
            continue;
        }
        h.push(u as Symbol);
        let arow = policy.action_row(h)?.to_vec();
        for (a, pa) in arow.into_iter().enumerate() {
            if pa > 0.0 {
                h.push(a as Symbol);
                walk(spec, policy, h, mass * pu * pa, steps, out)?;
                h.pop();
            }
        }
        h.pop();
    }
    Ok(())
}

/// Draws one trajectory from `P^π`; deterministic in `seed`.
pub fn sample_trajectory(spec: &EnvironmentSpec, policy: &AgentPolicy, seed: u64) -> Result<Trajectory> {
    let mut rng = rng_from_seed(seed);
    sample_trajectory_with(spec, policy, &mut rng)
}

pub fn sample_trajectory_with<R: Rng + ?Sized>(
    spec: &EnvironmentSpec,
    policy: &AgentPolicy,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut h = History::root();
    for _ in 0..spec.horizon() {
        let u = sample_index(spec.user_row(&h)?, rng);
        h.push(u);
        let a = sample_index(policy.action_row(&h)?, rng);
        h.push(a);
    }
    Ok(Trajectory::from_history_unchecked(h))
}

/// Probability of an event under `P^π` by enumeration.
pub fn event_probability<F>(spec: &EnvironmentSpec, policy: &AgentPolicy, event: F) -> Result<f64>
where
    F: Fn(&Trajectory) -> bool,
{
    Ok(enumerate_trajectories(spec, policy)?
        .iter()
        .filter(|(t, _)| event(t))
        .map(|(_, p)| p)
        .sum())
}
