//! Built-in environments: the recommender and two-step worked examples, a
//! chained environment for variance sweeps, and seeded random families.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::env::{rng_from_seed, AgentPolicy, Alphabet, EnvironmentSpec, Shape, Symbol};
use crate::labeling::{AprioriControl, PostHocLabeler, StepwiseLabeler};
use crate::simulators::ParameterizedDynamics;

/// An environment with a behavior/evaluation policy pair and a post-hoc labeler.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub name: String,
    pub spec: EnvironmentSpec,
    pub behavior: AgentPolicy,
    pub evaluation: AgentPolicy,
    pub labeler: PostHocLabeler,
}

fn alphabet(names: &[&str]) -> Alphabet {
    Alphabet::new(names.iter().copied()).expect("static alphabet")
}

fn success_controls() -> Alphabet {
    alphabet(&["0", "1"])
}

/// Names of the built-in environments.
pub const BUILTINS: [&str; 3] = ["recommender", "two-step", "chain"];

pub fn builtin(name: &str) -> Option<Fixture> {
    match name {
        "recommender" => Some(recommender()),
        "two-step" => Some(two_step()),
        "chain" => Some(chain(6)),
        _ => None,
    }
}

/// Query `q`, recommendation `a ∈ {0, 1}`, outcome `y1` with probability 0.8
/// for item 1 and 0.2 for item 0.
pub fn recommender() -> Fixture {
    recommender_with_rates(0.8, 0.2)
}

pub fn recommender_with_rates(item1: f64, item0: f64) -> Fixture {
    let shape = Shape::new(alphabet(&["q", "y0", "y1"]), alphabet(&["0", "1"]), 2).expect("static shape");
    let spec = EnvironmentSpec::from_fn(shape, |h| {
        if h.is_empty() {
            vec![1.0, 0.0, 0.0]
        } else {
            let s = if h.agent(1) == 1 { item1 } else { item0 };
            vec![0.0, 1.0 - s, s]
        }
    })
    .expect("recommender dynamics");
    let behavior = AgentPolicy::from_fn("pi_b", &spec, |hu| if hu.len() == 1 { vec![0.5, 0.5] } else { vec![1.0, 0.0] })
        .expect("behavior policy");
    let evaluation = AgentPolicy::from_fn("pi_e", &spec, |hu| if hu.len() == 1 { vec![0.0, 1.0] } else { vec![1.0, 0.0] })
        .expect("evaluation policy");
    let labeler = PostHocLabeler::from_fn("success", success_controls(), &spec, |tau| {
        if tau.user(2) == 2 {
            vec![0.0, 1.0]
        } else {
            vec![1.0, 0.0]
        }
    })
    .expect("success labeler");
    Fixture { name: "recommender".into(), spec, behavior, evaluation, labeler }
}

/// Recommender policy that always shows `item` first.
pub fn recommender_always(spec: &EnvironmentSpec, item: Symbol) -> AgentPolicy {
    AgentPolicy::from_fn(format!("always_{item}"), spec, |hu| {
        let mut row = vec![0.0, 0.0];
        row[if hu.len() == 1 { item as usize } else { 0 }] = 1.0;
        row
    })
    .expect("static policy")
}

/// Success rate `s(type, action)` of the two-step example.
pub fn two_step_rate(user_type: Symbol, action: Symbol) -> f64 {
    match (user_type, action) {
        (0, 0) => 1.0,
        (1, 0) => 0.5,
        (0, _) => 0.5,
        _ => 0.1,
    }
}

fn two_step_shape() -> Shape {
    Shape::new(alphabet(&["A", "B", "y0", "y1"]), alphabet(&["a_b", "a_e"]), 2).expect("static shape")
}

/// Two user types drawn uniformly, one agent action, then an outcome.
pub fn two_step() -> Fixture {
    let spec = EnvironmentSpec::from_fn(two_step_shape(), |h| {
        if h.is_empty() {
            vec![0.5, 0.5, 0.0, 0.0]
        } else {
            let s = two_step_rate(h.user(1), h.agent(1));
            vec![0.0, 0.0, 1.0 - s, s]
        }
    })
    .expect("two-step dynamics");
    let behavior = AgentPolicy::stationary("pi_b", &spec, &[1.0, 0.0]).expect("behavior policy");
    let evaluation = AgentPolicy::stationary("pi_e", &spec, &[0.0, 1.0]).expect("evaluation policy");
    let labeler = PostHocLabeler::from_fn("success", success_controls(), &spec, |tau| {
        if tau.user(2) == 3 {
            vec![0.0, 1.0]
        } else {
            vec![1.0, 0.0]
        }
    })
    .expect("success labeler");
    Fixture { name: "two-step".into(), spec, behavior, evaluation, labeler }
}

/// The two-step population with the user type as an up-front control.
pub fn two_step_apriori() -> AprioriControl {
    let dynamics = (0..2u16)
        .map(|z| {
            EnvironmentSpec::from_fn(two_step_shape(), |h| {
                if h.is_empty() {
                    let mut row = vec![0.0; 4];
                    row[z as usize] = 1.0;
                    row
                } else {
                    let s = two_step_rate(h.user(1), h.agent(1));
                    vec![0.0, 0.0, 1.0 - s, s]
                }
            })
            .expect("two-step control dynamics")
        })
        .collect();
    AprioriControl::new("type", alphabet(&["A", "B"]), vec![0.5, 0.5], dynamics).expect("two-step control")
}

/// Step-wise control on the two-step example: the observed user type, then the outcome.
pub fn two_step_stepwise(spec: &EnvironmentSpec) -> StepwiseLabeler {
    StepwiseLabeler::from_fn("observed", alphabet(&["low", "high"]), spec, |hu| {
        match hu.pending_user() {
            Some(0) | Some(3) => vec![0.0, 1.0],
            _ => vec![1.0, 0.0],
        }
    })
    .expect("two-step step labeler")
}

/// The two-step example as latent-state dynamics: type drawn at step one and
/// held, responses read off the type.
pub fn two_step_parameterized() -> ParameterizedDynamics {
    ParameterizedDynamics::from_fn(
        two_step_shape(),
        alphabet(&["A", "B"]),
        alphabet(&["default"]),
        0,
        0,
        |h, prev, _| {
            if h.is_empty() {
                vec![0.5, 0.5]
            } else {
                let mut row = vec![0.0, 0.0];
                row[prev as usize] = 1.0;
                row
            }
        },
        |h, z| {
            if h.is_empty() {
                let mut row = vec![0.0; 4];
                row[z as usize] = 1.0;
                row
            } else {
                let s = two_step_rate(z, h.agent(1));
                vec![0.0, 0.0, 1.0 - s, s]
            }
        },
    )
    .expect("two-step latent model")
}

/// Per-step success probability in the chain environment.
pub fn chain_rate(user: Symbol, action: Symbol) -> f64 {
    two_step_rate(user, action)
}

fn chain_shape(horizon: usize) -> Shape {
    Shape::new(alphabet(&["A", "B"]), alphabet(&["a_b", "a_e"]), horizon).expect("chain shape")
}

/// The two-step type/action interaction repeated `horizon` times with a
/// label that requires success at every step, so each step leaks the
/// behavior policy into the label.
pub fn chain(horizon: usize) -> Fixture {
    let spec = EnvironmentSpec::from_fn(chain_shape(horizon), |_| vec![0.5, 0.5]).expect("chain dynamics");
    let behavior = AgentPolicy::stationary("pi_b", &spec, &[0.99, 0.01]).expect("behavior policy");
    let evaluation = AgentPolicy::stationary("pi_e", &spec, &[0.01, 0.99]).expect("evaluation policy");
    let labeler = PostHocLabeler::from_fn("success", success_controls(), &spec, |tau| {
        let p: f64 = tau.steps().map(|(u, a)| chain_rate(u, a)).product();
        vec![1.0 - p, p]
    })
    .expect("chain labeler");
    Fixture { name: "chain".into(), spec, behavior, evaluation, labeler }
}

/// Up-front user temperament for the chain environment.
pub fn chain_apriori(horizon: usize) -> AprioriControl {
    let shape = chain_shape(horizon);
    let dynamics = [(0.7, 0.5), (0.3, 0.6)]
        .iter()
        .map(|&(after_b, otherwise)| {
            EnvironmentSpec::from_fn(shape.clone(), |h| {
                let p = if h.symbols().last() == Some(&0) { after_b } else { otherwise };
                vec![p, 1.0 - p]
            })
            .expect("chain control dynamics")
        })
        .collect();
    AprioriControl::new("temperament", alphabet(&["patient", "hurried"]), vec![0.6, 0.4], dynamics)
        .expect("chain control")
}

/// Per-turn mood read off the pre-action state.
pub fn chain_stepwise(spec: &EnvironmentSpec) -> StepwiseLabeler {
    StepwiseLabeler::from_fn("mood", alphabet(&["calm", "upset"]), spec, |hu| {
        if hu.pending_user() == Some(0) {
            vec![0.8, 0.2]
        } else {
            vec![0.3, 0.7]
        }
    })
    .expect("chain step labeler")
}

/// Latent frustration driven by the agent's last action.
pub fn chain_parameterized(horizon: usize) -> ParameterizedDynamics {
    ParameterizedDynamics::from_fn(
        chain_shape(horizon),
        alphabet(&["calm", "frustrated"]),
        alphabet(&["tolerant", "fragile"]),
        0,
        1,
        |h, prev, profile| match (prev, h.symbols().last() == Some(&1), profile) {
            (0, true, 1) => vec![0.6, 0.4],
            (0, _, 1) => vec![0.85, 0.15],
            (0, _, _) => vec![0.9, 0.1],
            _ => vec![0.3, 0.7],
        },
        |_, z| if z == 0 { vec![0.75, 0.25] } else { vec![0.2, 0.8] },
    )
    .expect("chain latent model")
}

/// Binary user and agent alphabets.
pub fn binary_shape(horizon: usize) -> Shape {
    Shape::new(alphabet(&["u0", "u1"]), alphabet(&["a0", "a1"]), horizon).expect("binary shape")
}

fn random_row(rng: &mut ChaCha8Rng, width: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..width).map(|_| rng.gen_range(0.1..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

/// Full-support random dynamics, policies and labeler on binary alphabets.
pub fn random_environment(seed: u64, horizon: usize) -> Fixture {
    let mut rng = rng_from_seed(seed);
    let spec = EnvironmentSpec::from_fn(binary_shape(horizon), |_| random_row(&mut rng, 2)).expect("random dynamics");
    let behavior = AgentPolicy::from_fn("pi_b", &spec, |_| random_row(&mut rng, 2)).expect("random behavior");
    let evaluation = AgentPolicy::from_fn("pi_e", &spec, |_| random_row(&mut rng, 2)).expect("random evaluation");
    let labeler = PostHocLabeler::from_fn("random", alphabet(&["z0", "z1"]), &spec, |_| random_row(&mut rng, 2))
        .expect("random labeler");
    Fixture { name: format!("random-{seed}"), spec, behavior, evaluation, labeler }
}

/// Random full-support policy on `spec`.
pub fn random_policy(seed: u64, spec: &EnvironmentSpec, tag: &str) -> AgentPolicy {
    let mut rng = rng_from_seed(seed);
    let width = spec.agent_alphabet().len();
    AgentPolicy::from_fn(tag, spec, |_| random_row(&mut rng, width)).expect("random policy")
}

/// Two up-front controls with independent random dynamics.
pub fn random_apriori(seed: u64, horizon: usize) -> AprioriControl {
    let mut rng = rng_from_seed(seed);
    let prior = random_row(&mut rng, 2);
    let dynamics = (0..2)
        .map(|_| EnvironmentSpec::from_fn(binary_shape(horizon), |_| random_row(&mut rng, 2)).expect("random dynamics"))
        .collect();
    AprioriControl::new("random", alphabet(&["z0", "z1"]), prior, dynamics).expect("random control")
}

pub fn random_stepwise(seed: u64, spec: &EnvironmentSpec) -> StepwiseLabeler {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    StepwiseLabeler::from_fn("random", alphabet(&["z0", "z1"]), spec, |_| random_row(&mut rng, 2))
        .expect("random step labeler")
}

/// Random latent model with history-dependent transitions and responses.
pub fn random_parameterized(seed: u64, horizon: usize) -> ParameterizedDynamics {
    let mut rng = rng_from_seed(seed);
    let mut trans_rng = rng_from_seed(rng.gen());
    ParameterizedDynamics::from_fn(
        binary_shape(horizon),
        alphabet(&["s0", "s1"]),
        alphabet(&["c0", "c1"]),
        0,
        1,
        |_, _, _| random_row(&mut trans_rng, 2),
        |_, _| random_row(&mut rng, 2),
    )
    .expect("random latent model")
}

/// `(spec, π_b, π_e, labeler)` of the recommender example.
pub fn build_recommender_env() -> (EnvironmentSpec, AgentPolicy, AgentPolicy, PostHocLabeler) {
    let fx = recommender();
    (fx.spec, fx.behavior, fx.evaluation, fx.labeler)
}

/// `(spec, π_b, π_e, labeler)` of the two-step example.
pub fn build_two_step_env() -> (EnvironmentSpec, AgentPolicy, AgentPolicy, PostHocLabeler) {
    let fx = two_step();
    (fx.spec, fx.behavior, fx.evaluation, fx.labeler)
}
