//! JSON environment files and the built-in environments addressable by name.
//!
//! ```json
//! {
//!   "user_alphabet": ["q", "y0", "y1"],
//!   "agent_alphabet": ["0", "1"],
//!   "horizon": 2,
//!   "user_dynamics": { "": {"q": 1.0}, "q,1": {"y0": 0.2, "y1": 0.8} },
//!   "policies": { "pi_b": { "q": {"0": 0.5, "1": 0.5} } },
//!   "labelers": {
//!     "success": { "kind": "post_hoc", "controls": ["0", "1"], "table": { "q,1,y1,0": {"1": 1.0} } }
//!   }
//! }
//! ```
//!
//! Rows are sparse maps from symbol name to probability; the root history is
//! the empty key. Step-wise labelers key on pre-action states; a-priori
//! controls carry `prior` and one `dynamics` table per control value.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{validate_environment, AgentPolicy, Alphabet, EnvironmentSpec, History, Shape};
use crate::error::{Error, Result};
use crate::fixtures;
use crate::labeling::{reachable_trajectories, AprioriControl, Labeler, PostHocLabeler, StepwiseLabeler};

type Row = BTreeMap<String, f64>;
type Table = BTreeMap<String, Row>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    user_alphabet: Vec<String>,
    agent_alphabet: Vec<String>,
    horizon: usize,
    user_dynamics: Table,
    #[serde(default)]
    policies: BTreeMap<String, Table>,
    #[serde(default)]
    labelers: BTreeMap<String, RawLabeler>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum RawLabeler {
    PostHoc { controls: Vec<String>, table: Table },
    StepWise { controls: Vec<String>, table: Table },
    APriori { controls: Vec<String>, prior: Row, dynamics: BTreeMap<String, Table> },
}

/// A validated environment with its named policies and labelers.
#[derive(Debug, Clone)]
pub struct EnvironmentFile {
    pub name: String,
    pub spec: EnvironmentSpec,
    pub policies: BTreeMap<String, AgentPolicy>,
    pub labelers: BTreeMap<String, Labeler>,
}

impl EnvironmentFile {
    pub fn policy(&self, tag: &str) -> Result<&AgentPolicy> {
        self.policies.get(tag).ok_or_else(|| Error::UnknownPolicy(tag.to_string()))
    }

    /// The named post-hoc labeler, or the first one when `name` is `None`.
    pub fn post_hoc(&self, name: Option<&str>) -> Result<&PostHocLabeler> {
        let found = match name {
            Some(n) => self.labelers.get(n),
            None => self.labelers.values().find(|l| matches!(l, Labeler::PostHoc(_))),
        };
        match found {
            Some(Labeler::PostHoc(l)) => Ok(l),
            Some(other) => Err(Error::Invalid(format!("labeler is {}, not post_hoc", other.kind()))),
            None => Err(Error::Invalid(format!("no post-hoc labeler {}", name.map(|n| format!("`{n}`")).unwrap_or_default()))),
        }
    }

    pub fn stepwise(&self) -> Option<&StepwiseLabeler> {
        self.labelers.values().find_map(|l| match l {
            Labeler::StepWise(s) => Some(s),
            _ => None,
        })
    }

    pub fn apriori(&self) -> Option<&AprioriControl> {
        self.labelers.values().find_map(|l| match l {
            Labeler::Apriori(a) => Some(a),
            _ => None,
        })
    }

    /// Serializes back to the file format, omitting zero entries.
    pub fn to_json(&self) -> Result<String> {
        let shape = self.spec.shape();
        let raw = RawEnvironment {
            user_alphabet: shape.user.names().to_vec(),
            agent_alphabet: shape.agent.names().to_vec(),
            horizon: shape.horizon,
            user_dynamics: dump_table(shape, &shape.user, self.spec.dynamics()),
            policies: self.policies.iter().map(|(k, p)| (k.clone(), dump_table(shape, &shape.agent, p.table()))).collect(),
            labelers: self
                .labelers
                .iter()
                .map(|(k, l)| {
                    let raw = match l {
                        Labeler::PostHoc(p) => RawLabeler::PostHoc {
                            controls: p.controls().names().to_vec(),
                            table: dump_table(shape, p.controls(), p.table()),
                        },
                        Labeler::StepWise(s) => RawLabeler::StepWise {
                            controls: s.controls().names().to_vec(),
                            table: dump_table(shape, s.controls(), s.table()),
                        },
                        Labeler::Apriori(a) => RawLabeler::APriori {
                            controls: a.controls().names().to_vec(),
                            prior: dump_row(a.controls(), a.prior()),
                            dynamics: a
                                .controls()
                                .symbols()
                                .map(|z| (a.controls().name(z).to_string(), dump_table(shape, &shape.user, a.dynamics(z).dynamics())))
                                .collect(),
                        },
                    };
                    (k.clone(), raw)
                })
                .collect(),
        };
        serde_json::to_string_pretty(&raw).map_err(|e| Error::Parse(e.to_string()))
    }
}

fn dump_row(alphabet: &Alphabet, row: &[f64]) -> Row {
    row.iter()
        .enumerate()
        .filter(|(_, &p)| p != 0.0)
        .map(|(i, &p)| (alphabet.name(i as u16).to_string(), p))
        .collect()
}

fn dump_table(shape: &Shape, alphabet: &Alphabet, table: &HashMap<History, Vec<f64>>) -> Table {
    table.iter().map(|(h, r)| (shape.key(h), dump_row(alphabet, r))).collect()
}

fn parse_row(alphabet: &Alphabet, row: &Row, context: &str) -> Result<Vec<f64>> {
    let mut out = vec![0.0; alphabet.len()];
    for (name, &p) in row {
        let s = alphabet
            .index_of(name)
            .ok_or_else(|| Error::Parse(format!("unknown symbol `{name}` in {context}")))?;
        out[s as usize] = p;
    }
    Ok(out)
}

fn parse_table(shape: &Shape, alphabet: &Alphabet, table: &Table, context: &str) -> Result<HashMap<History, Vec<f64>>> {
    let mut out = HashMap::new();
    for (key, row) in table {
        let h = shape.parse_key(key).map_err(|e| Error::Parse(format!("{context}: {e}")))?;
        out.insert(h, parse_row(alphabet, row, &format!("{context} [{key}]"))?);
    }
    Ok(out)
}

fn collect(errors: &mut Vec<Error>, result: Result<()>) {
    if let Err(e) = result {
        errors.extend(e.violations().into_iter().cloned());
    }
}

/// Parses and validates an environment document, reporting every violation.
pub fn parse_environment(name: &str, text: &str) -> Result<EnvironmentFile> {
    let raw: RawEnvironment = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let shape = Shape::new(Alphabet::new(raw.user_alphabet)?, Alphabet::new(raw.agent_alphabet)?, raw.horizon)?;
    shape.check_budget()?;
    let dynamics = parse_table(&shape, &shape.user, &raw.user_dynamics, "user_dynamics")?;
    let spec = validate_environment(EnvironmentSpec::new(shape.clone(), dynamics))?;
    let mut errors = Vec::new();
    let mut policies = BTreeMap::new();
    for (tag, table) in &raw.policies {
        let policy = AgentPolicy::new(tag.clone(), parse_table(&shape, &shape.agent, table, &format!("policy `{tag}`"))?);
        collect(&mut errors, policy.validate(&spec));
        policies.insert(tag.clone(), policy);
    }
    let mut labelers = BTreeMap::new();
    for (lname, raw_l) in &raw.labelers {
        let ctx = format!("labeler `{lname}`");
        let labeler = match raw_l {
            RawLabeler::PostHoc { controls, table } => {
                let controls = Alphabet::new(controls.clone())?;
                let l = PostHocLabeler::new(lname.clone(), controls.clone(), parse_table(&shape, &controls, table, &ctx)?);
                collect(&mut errors, l.validate(&shape));
                for tau in reachable_trajectories(&spec)? {
                    if l.row(tau.history()).is_err() {
                        errors.push(Error::MissingContext(format!("{ctx} at [{}]", shape.key(tau.history()))));
                    }
                }
                Labeler::PostHoc(l)
            }
            RawLabeler::StepWise { controls, table } => {
                let controls = Alphabet::new(controls.clone())?;
                let l = StepwiseLabeler::new(lname.clone(), controls.clone(), parse_table(&shape, &controls, table, &ctx)?)?;
                collect(&mut errors, l.validate(&shape));
                Labeler::StepWise(l)
            }
            RawLabeler::APriori { controls, prior, dynamics } => {
                let controls = Alphabet::new(controls.clone())?;
                let prior = parse_row(&controls, prior, &format!("{ctx} prior"))?;
                let mut tables = Vec::new();
                for z in controls.symbols() {
                    let zname = controls.name(z);
                    let t = dynamics
                        .get(zname)
                        .ok_or_else(|| Error::MissingContext(format!("{ctx} has no dynamics for `{zname}`")))?;
                    tables.push(EnvironmentSpec::new(shape.clone(), parse_table(&shape, &shape.user, t, &ctx)?));
                }
                let a = AprioriControl::new(lname.clone(), controls, prior, tables)?;
                collect(&mut errors, a.validate());
                Labeler::Apriori(a)
            }
        };
        labelers.insert(lname.clone(), labeler);
    }
    if !errors.is_empty() {
        return Err(Error::Validation(errors));
    }
    Ok(EnvironmentFile { name: name.to_string(), spec, policies, labelers })
}

pub fn load_environment(path: &Path) -> Result<EnvironmentFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("environment");
    parse_environment(name, &text)
}

/// Built-in fixture as an environment file with policies `pi_b`, `pi_e` and labeler `success`.
/// Errors if a chain horizon is zero or over the exact budget.
pub fn builtin_environment(name: &str, horizon: Option<usize>) -> Result<Option<EnvironmentFile>> {
    let fx = match (name, horizon) {
        ("chain", Some(t)) => {
            let binary = fixtures::binary_shape(1);
            Shape::new(binary.user, binary.agent, t)?.check_budget()?;
            fixtures::chain(t)
        }
        _ => match fixtures::builtin(name) {
            Some(fx) => fx,
            None => return Ok(None),
        },
    };
    let mut labelers = BTreeMap::new();
    labelers.insert(fx.labeler.name().to_string(), Labeler::PostHoc(fx.labeler.clone()));
    let mut policies = BTreeMap::new();
    policies.insert(fx.behavior.tag().to_string(), fx.behavior.clone());
    policies.insert(fx.evaluation.tag().to_string(), fx.evaluation.clone());
    Ok(Some(EnvironmentFile { name: fx.name, spec: fx.spec, policies, labelers }))
}

/// A built-in name, or a path to a JSON environment file.
pub fn resolve_environment(source: &str, horizon: Option<usize>) -> Result<EnvironmentFile> {
    if let Some(env) = builtin_environment(source, horizon)? {
        return Ok(env);
    }
    let path = Path::new(source);
    if path.exists() {
        return load_environment(path);
    }
    Err(Error::Invalid(format!(
        "`{source}` is neither a built-in environment ({}) nor a readable file",
        fixtures::BUILTINS.join(", ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::enumerate_trajectories;

    #[test]
    fn builtins_round_trip_through_json() {
        for name in fixtures::BUILTINS {
            let env = builtin_environment(name, Some(3)).unwrap().unwrap();
            let text = env.to_json().unwrap();
            let back = parse_environment(name, &text).unwrap();
            assert_eq!(back.spec, env.spec);
            let (pb, pb2) = (env.policy("pi_b").unwrap(), back.policy("pi_b").unwrap());
            assert_eq!(
                enumerate_trajectories(&env.spec, pb).unwrap(),
                enumerate_trajectories(&back.spec, pb2).unwrap()
            );
            assert_eq!(back.post_hoc(None).unwrap().table(), env.post_hoc(None).unwrap().table());
        }
    }

    #[test]
    fn every_violation_is_reported() {
        let text = r#"{
            "user_alphabet": ["q", "y0", "y1"],
            "agent_alphabet": ["0", "1"],
            "horizon": 2,
            "user_dynamics": {"": {"q": 1.0}, "q,0": {"y0": 0.8, "y1": 0.199}}
        }"#;
        let err = parse_environment("bad", text).unwrap_err();
        let v = err.violations();
        assert!(v.iter().any(|e| matches!(e, Error::Normalization { .. })));
        assert!(v.iter().any(|e| matches!(e, Error::MissingContext(_))));
    }

    #[test]
    fn malformed_documents_are_parse_errors() {
        assert!(matches!(parse_environment("x", "{"), Err(Error::Parse(_))));
        assert!(matches!(parse_environment("x", r#"{"user_alphabet": []}"#), Err(Error::Parse(_))));
        let unknown = r#"{"user_alphabet": ["a"], "agent_alphabet": ["b"], "horizon": 1,
                          "user_dynamics": {"": {"zzz": 1.0}}}"#;
        assert!(matches!(parse_environment("x", unknown), Err(Error::Parse(_))));
    }

    #[test]
    fn budget_is_checked_before_tabulation() {
        let text = r#"{"user_alphabet": ["a","b","c","d"], "agent_alphabet": ["x","y","z","w"], "horizon": 9,
                       "user_dynamics": {}}"#;
        assert!(matches!(parse_environment("big", text), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn unknown_source() {
        assert!(matches!(resolve_environment("no-such-env", None), Err(Error::Invalid(_))));
    }
}
