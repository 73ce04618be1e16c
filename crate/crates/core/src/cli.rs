//! The `usersim` command line: one subcommand per experiment suite, CSV
//! reports under `--out`, and exit codes 0 (all checks pass), 1 (a
//! diagnostic failed) and 2 (bad configuration or input).

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    estimate_eta_hat, local_label_sensitivity, martingale_profile, max_ratio_deviation, monte_carlo_weight_variance,
    user_generative_error, variance_decomposition, BiasCheck, ShiftSetup, BIAS_TOL, DECOMPOSITION_TOL, MARTINGALE_TOL,
};
use crate::beliefs::BeliefTable;
use crate::config::{resolve_environment, EnvironmentFile};
use crate::env::{
    derive_seed, event_probability, rng_from_seed, sample_index, sample_trajectory_with, trajectory_probability, AgentPolicy,
    EnvironmentSpec, History, Shape, Symbol,
};
use crate::error::{Error, Result};
use crate::estimation::convergence_curve;
use crate::fixtures::{self, Fixture};
use crate::labeling::{learned_prior, AprioriControl, PostHocLabeler, StepwiseLabeler};
use crate::report::{csv_num, diagnostics_csv, human_num, table_csv, write_report, Check, DiagnosticRow};
use crate::simulators::{
    apriori_kernel, compose, dynamic_state_kernel, parameterized_dynamics_kernel, policy_conditioned_kernel_in,
    trajectory_conditioned_kernel_in, Control, GroundTruth, KernelKind, ParameterizedDynamics, SimulatorKernel,
};

#[derive(Debug, Parser)]
#[command(name = "usersim", version, about = "Exact diagnostics for controllable user simulators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Built-in environment name (recommender, two-step, chain) or a JSON environment file.
    #[arg(long)]
    env: Option<String>,
    /// Root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory.
    #[arg(long, default_value = "reports")]
    out: PathBuf,
    /// Horizon override.
    #[arg(long)]
    horizon: Option<usize>,
    /// Sensitivity floor used for the geometric bound instead of the certified one.
    #[arg(long)]
    eta: Option<f64>,
    /// Sample count.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Debug, Clone, Args)]
struct Roles {
    /// Policy the simulator is trained under.
    #[arg(long, default_value = "pi_b")]
    behavior: String,
    /// Policy the simulator is deployed under.
    #[arg(long, default_value = "pi_e")]
    evaluation: String,
    /// Post-hoc labeler name (default: the first one).
    #[arg(long)]
    labeler: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Worked examples: recommender bias factor and two-step variance.
    Examples {
        #[command(flatten)]
        common: Common,
        /// Replace the recommender with a mis-specified copy.
        #[arg(long, hide = true)]
        corrupt_fixture: bool,
    },
    /// Bias identity, variance decomposition, martingale and mitigation checks.
    Theorems {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        roles: Roles,
        /// Size of the seeded random-environment family (ignored with --env).
        #[arg(long, default_value_t = 20)]
        envs: usize,
    },
    /// Exact and Monte-Carlo weight variance against the horizon for every kernel kind.
    VarianceSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        roles: Roles,
    },
    /// Convergence of the fitted conditional kernel with dataset size.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        roles: Roles,
        /// Dataset sizes, strictly increasing.
        #[arg(long, value_delimiter = ',', default_value = "100,1000,10000,100000")]
        ladder: Vec<usize>,
        /// Number of seeds per dataset size.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Additive smoothing.
        #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
        alpha: f64,
    },
    /// Raw rollouts from the true environment and the trajectory-conditioned simulator.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        roles: Roles,
    },
}

/// Outcome of a suite: the report to write and how many checks failed.
struct Outcome {
    file: &'static str,
    csv: String,
    summary: Vec<String>,
    failures: usize,
}

/// Exit code for an error: 2 for configuration and input problems, 1 for
/// diagnostics that cannot be evaluated on the given inputs.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::UndefinedConditional(_)
        | Error::ZeroDenominator(_)
        | Error::SupportViolation(_)
        | Error::UnseenContext(_) => 1,
        _ => 2,
    }
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let (out, result) = match cli.command {
        Command::Examples { common, corrupt_fixture } => (common.out.clone(), examples(&common, corrupt_fixture)),
        Command::Theorems { common, roles, envs } => (common.out.clone(), theorems(&common, &roles, envs)),
        Command::VarianceSweep { common, roles } => (common.out.clone(), variance_sweep(&common, &roles)),
        Command::Fit { common, roles, ladder, seeds, alpha } => {
            (common.out.clone(), fit(&common, &roles, &ladder, seeds, alpha))
        }
        Command::Simulate { common, roles } => (common.out.clone(), simulate(&common, &roles)),
    };
    let outcome = match result.and_then(|o| write_report(&out, o.file, &o.csv).map(|_| o)) {
        Ok(o) => o,
        Err(e) => {
            for v in e.violations() {
                eprintln!("error: {v}");
            }
            return exit_code(&e);
        }
    };
    for line in &outcome.summary {
        println!("{line}");
    }
    println!("wrote {}", out.join(outcome.file).display());
    if outcome.failures > 0 {
        eprintln!("{} check(s) failed", outcome.failures);
        1
    } else {
        0
    }
}

fn require_seed(common: &Common) -> Result<u64> {
    common.seed.ok_or_else(|| Error::Invalid("--seed is required for this suite".into()))
}

fn check_eta(common: &Common) -> Result<Option<f64>> {
    match common.eta {
        Some(e) if !(e >= 0.0 && e.is_finite()) => Err(Error::Invalid(format!("--eta must be finite and non-negative, got {e}"))),
        other => Ok(other),
    }
}

fn load(common: &Common, default: &str) -> Result<EnvironmentFile> {
    let env = resolve_environment(common.env.as_deref().unwrap_or(default), common.horizon)?;
    env.spec.shape().check_budget()?;
    if let Some(t) = common.horizon {
        if t != env.spec.horizon() {
            return Err(Error::Invalid(format!("`{}` has horizon {}; --horizon {t} only applies to chain", env.name, env.spec.horizon())));
        }
    }
    Ok(env)
}

/// Splits off errors meaning the quantity is undefined on these inputs rather than wrong.
fn defined<T>(r: Result<T>) -> Result<std::result::Result<T, Error>> {
    match r {
        Ok(v) => Ok(Ok(v)),
        Err(e @ (Error::UndefinedConditional(_) | Error::ZeroDenominator(_) | Error::SupportViolation(_))) => Ok(Err(e)),
        Err(e) => Err(e),
    }
}

fn row(diagnostic: &str, environment: &str, kernel: &str, policy_pair: &str, control: &str, horizon: usize) -> DiagnosticRow {
    DiagnosticRow {
        diagnostic: diagnostic.into(),
        environment: environment.into(),
        kernel: kernel.into(),
        policy_pair: policy_pair.into(),
        control: control.into(),
        horizon,
        value: 0.0,
        bound: 0.0,
        tolerance: 0.0,
        check: Check::Equals,
    }
}

fn judged(mut r: DiagnosticRow, value: f64, bound: f64, tolerance: f64, check: Check) -> DiagnosticRow {
    r.value = value;
    r.bound = bound;
    r.tolerance = tolerance;
    r.check = check;
    r
}

fn diagnostics_outcome(file: &'static str, title: &str, rows: Vec<DiagnosticRow>, verbose: bool) -> Outcome {
    let failures = rows.iter().filter(|r| !r.passes()).count();
    let mut summary = Vec::new();
    for r in &rows {
        if verbose || !r.passes() {
            summary.push(format!(
                "{} {:<12} {:<24} {:<8} value {} expected {}",
                if r.passes() { "PASS" } else { "FAIL" },
                r.environment,
                r.diagnostic,
                r.control,
                human_num(r.value),
                human_num(r.bound)
            ));
        }
    }
    summary.push(format!("{title}: {} checks, {failures} failed", rows.len()));
    Outcome { file, csv: diagnostics_csv(&rows), summary, failures }
}

fn examples(common: &Common, corrupt: bool) -> Result<Outcome> {
    check_eta(common)?;
    let recommender = if corrupt { fixtures::recommender_with_rates(0.7, 0.2) } else { fixtures::recommender() };
    let mut rows = recommender_rows(&recommender)?;
    rows.extend(two_step_rows(&fixtures::two_step())?);
    Ok(diagnostics_outcome("examples.csv", "examples", rows, true))
}

fn recommender_rows(fx: &Fixture) -> Result<Vec<DiagnosticRow>> {
    let name = fx.name.as_str();
    let traj = KernelKind::TrajectoryConditioned.as_str();
    let pair = format!("{}->{}", fx.behavior.tag(), fx.evaluation.tag());
    let truth = GroundTruth::post_hoc(fx.spec.clone(), fx.labeler.clone());
    let kernel = trajectory_conditioned_kernel_in(&truth, &fx.behavior)?;
    let y1 = symbol(fx.spec.user_alphabet(), "y1")?;
    let success = |t: &crate::env::Trajectory| t.user(2) == y1;
    let prior = learned_prior(&fx.labeler, &fx.spec, &fx.behavior)?;
    let p_true = event_probability(&fx.spec, &fx.evaluation, success)?;
    let p_sim = compose(&kernel, &fx.evaluation, Control::FromPrior)?.event_probability(success)?;
    let tau = fx.spec.shape().parse_trajectory("q,1,y1,0")?;
    let bias = BiasCheck::new(&fx.spec, &fx.behavior, &fx.labeler)?.check(&fx.evaluation, &tau)?;
    Ok(vec![
        judged(row("learned_prior", name, traj, fx.behavior.tag(), "1", 2), prior[1], 0.5, BIAS_TOL, Check::Equals),
        judged(row("true_success", name, "environment", fx.evaluation.tag(), "1", 2), p_true, 0.8, BIAS_TOL, Check::Equals),
        judged(row("simulated_success", name, traj, &pair, "1", 2), p_sim, 0.5, BIAS_TOL, Check::Equals),
        judged(row("bias_factor", name, traj, &pair, "*", 2), bias.sim_over_true, 0.625, BIAS_TOL, Check::Equals),
        judged(row("bias_factor_expected", name, traj, &pair, "*", 2), bias.expected_factor, 0.625, BIAS_TOL, Check::Equals),
    ])
}

fn two_step_rows(fx: &Fixture) -> Result<Vec<DiagnosticRow>> {
    let name = fx.name.as_str();
    let traj = KernelKind::TrajectoryConditioned.as_str();
    let pair = format!("{}->{}", fx.behavior.tag(), fx.evaluation.tag());
    let root = History::root();
    let users = fx.spec.user_alphabet();
    let mut rows = Vec::new();
    for (policy, expected) in [(&fx.behavior, [4.0 / 3.0, 2.0 / 3.0]), (&fx.evaluation, [5.0 / 3.0, 1.0 / 3.0])] {
        let beliefs = BeliefTable::build(&fx.spec, policy, &fx.labeler)?;
        for (user, want) in ["A", "B"].into_iter().zip(expected) {
            let m = beliefs.belief_update(&root, symbol(users, user)?, 1)?;
            rows.push(judged(row(&format!("belief_update_{user}"), name, "environment", policy.tag(), "1", 1), m, want, BIAS_TOL, Check::Equals));
        }
    }
    let truth = GroundTruth::post_hoc(fx.spec.clone(), fx.labeler.clone());
    let kernel = trajectory_conditioned_kernel_in(&truth, &fx.behavior)?;
    for (user, want) in [("A", 1.25), ("B", 0.5)] {
        let rho = user_generative_error(&kernel, &fx.behavior, &fx.evaluation, &root, symbol(users, user)?, 1)?;
        rows.push(judged(row(&format!("rho_{user}"), name, traj, &pair, "1", 1), rho, want, BIAS_TOL, Check::Equals));
    }
    let setup = ShiftSetup::new(&kernel, &fx.behavior, &fx.evaluation, Control::Fixed(1))?;
    let v = local_label_sensitivity(&setup, &root)?.variance;
    rows.push(judged(row("local_sensitivity", name, traj, &pair, "1", 1), v, 0.125, BIAS_TOL, Check::Equals));
    let var = variance_decomposition(&setup, 1, None)?.exact_variance;
    rows.push(judged(row("weight_variance", name, traj, &pair, "1", 1), var, 0.125, BIAS_TOL, Check::Equals));
    Ok(rows)
}

fn symbol(alphabet: &crate::env::Alphabet, name: &str) -> Result<Symbol> {
    alphabet.index_of(name).ok_or_else(|| Error::Invalid(format!("fixture has no symbol `{name}`")))
}

/// Kernels beyond the trajectory-conditioned one that an environment supports.
struct Mitigations {
    apriori: Option<AprioriControl>,
    stepwise: Option<StepwiseLabeler>,
    parameterized: Option<ParameterizedDynamics>,
}

fn mitigations(env: &EnvironmentFile) -> Mitigations {
    let horizon = env.spec.horizon();
    let builtin = fixtures::builtin(&env.name).is_some();
    match env.name.as_str() {
        "two-step" if builtin => Mitigations {
            apriori: Some(fixtures::two_step_apriori()),
            stepwise: Some(fixtures::two_step_stepwise(&env.spec)),
            parameterized: Some(fixtures::two_step_parameterized()),
        },
        "chain" if builtin => Mitigations {
            apriori: Some(fixtures::chain_apriori(horizon)),
            stepwise: Some(fixtures::chain_stepwise(&env.spec)),
            parameterized: Some(fixtures::chain_parameterized(horizon)),
        },
        _ => Mitigations { apriori: env.apriori().cloned(), stepwise: env.stepwise().cloned(), parameterized: None },
    }
}

/// Every kernel kind available for an environment, each with the controls it is evaluated at.
fn kernel_family(
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    evaluation: &AgentPolicy,
    labeler: &PostHocLabeler,
    extra: &Mitigations,
) -> Result<Vec<(SimulatorKernel, Vec<Control>)>> {
    let truth = GroundTruth::post_hoc(spec.clone(), labeler.clone());
    let every = |n: usize| (0..n as Symbol).map(Control::Fixed).collect::<Vec<_>>();
    let mut out = Vec::new();
    let traj = trajectory_conditioned_kernel_in(&truth, behavior)?;
    let n = traj.controls().len();
    out.push((traj, every(n)));
    if let Some(a) = &extra.apriori {
        let k = apriori_kernel(a)?;
        let n = k.controls().len();
        out.push((k, every(n)));
    }
    if let Some(s) = &extra.stepwise {
        out.push((dynamic_state_kernel(spec, behavior, s)?, vec![Control::FromPrior]));
    }
    let pc = policy_conditioned_kernel_in(&truth, &[behavior, evaluation])?;
    out.push((pc.select(evaluation.tag())?.clone(), every(n)));
    if let Some(pd) = &extra.parameterized {
        out.push((parameterized_dynamics_kernel(pd)?, vec![Control::FromPrior]));
    }
    Ok(out)
}

fn control_name(kernel: &SimulatorKernel, control: Control) -> String {
    match control {
        Control::Fixed(z) => kernel.controls().name(z).to_string(),
        Control::FromPrior => "*".into(),
    }
}

fn theorems(common: &Common, roles: &Roles, envs: usize) -> Result<Outcome> {
    let eta = check_eta(common)?;
    let mut rows = Vec::new();
    if common.env.is_some() {
        let env = load(common, "")?;
        let behavior = env.policy(&roles.behavior)?;
        let evaluation = env.policy(&roles.evaluation)?;
        let labeler = env.post_hoc(roles.labeler.as_deref())?;
        let extra = mitigations(&env);
        environment_checks(&env.name, &env.spec, behavior, evaluation, labeler, &extra, eta, &mut rows)?;
    } else {
        let horizon = common.horizon.unwrap_or(3);
        fixtures::binary_shape(horizon).check_budget()?;
        let root = common.seed.unwrap_or(0);
        for i in 0..envs as u64 {
            let seed = derive_seed(root, i);
            let fx = fixtures::random_environment(seed, horizon);
            let extra = Mitigations {
                apriori: Some(fixtures::random_apriori(derive_seed(seed, 1), horizon)),
                stepwise: Some(fixtures::random_stepwise(derive_seed(seed, 2), &fx.spec)),
                parameterized: Some(fixtures::random_parameterized(derive_seed(seed, 3), horizon)),
            };
            let name = format!("random-{i}");
            environment_checks(&name, &fx.spec, &fx.behavior, &fx.evaluation, &fx.labeler, &extra, eta, &mut rows)?;
        }
    }
    Ok(diagnostics_outcome("theorems.csv", "theorems", rows, false))
}

#[allow(clippy::too_many_arguments)]
fn environment_checks(
    name: &str,
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    evaluation: &AgentPolicy,
    labeler: &PostHocLabeler,
    extra: &Mitigations,
    eta: Option<f64>,
    rows: &mut Vec<DiagnosticRow>,
) -> Result<()> {
    let horizon = spec.horizon();
    let pair = format!("{}->{}", behavior.tag(), evaluation.tag());
    let traj = KernelKind::TrajectoryConditioned.as_str();

    // Bias identity over trajectories both policies can produce.
    let check = BiasCheck::new(spec, behavior, labeler)?;
    let mut worst: f64 = 0.0;
    for (tau, _) in crate::env::enumerate_trajectories(spec, evaluation)? {
        if trajectory_probability(spec, behavior, &tau) > 0.0 {
            worst = worst.max(check.check(evaluation, &tau)?.difference);
        }
    }
    rows.push(judged(row("bias_identity", name, traj, &pair, "*", horizon), worst, 0.0, BIAS_TOL, Check::Equals));

    for (kernel, controls) in kernel_family(spec, behavior, evaluation, labeler, extra)? {
        let kind = kernel.kind();
        for control in controls {
            let setup = ShiftSetup::new(&kernel, behavior, evaluation, control)?;
            let cname = control_name(&kernel, control);
            let r = |d: &str, t: usize| row(d, name, kind.as_str(), &pair, &cname, t);
            let mut reached = 0;
            for t in 1..=horizon {
                let report = match defined(variance_decomposition(&setup, t, eta))? {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("note: {name} {kind} control {cname}: stopped at T={reached}: {e}");
                        break;
                    }
                };
                reached = t;
                if kind == KernelKind::TrajectoryConditioned {
                    rows.push(judged(r("variance_decomposition", t), report.exact_variance, report.decomposition, DECOMPOSITION_TOL, Check::Equals));
                    rows.push(judged(r("variance_floor", t), report.exact_variance, report.bound, DECOMPOSITION_TOL, Check::AtLeast));
                } else {
                    rows.push(judged(r("mitigation_variance", t), report.exact_variance, 0.0, MARTINGALE_TOL, Check::Equals));
                    rows.push(judged(r("mitigation_ratio", t), max_ratio_deviation(&setup, t)?, 0.0, MARTINGALE_TOL, Check::Equals));
                }
            }
            if reached > 0 {
                for (t, d) in martingale_profile(&setup, reached)?.into_iter().enumerate() {
                    rows.push(judged(r("martingale", t + 1), d, 0.0, MARTINGALE_TOL, Check::Equals));
                }
            }
        }
    }
    Ok(())
}

fn variance_sweep(common: &Common, roles: &Roles) -> Result<Outcome> {
    let seed = require_seed(common)?;
    let eta = check_eta(common)?;
    let samples = common.samples.unwrap_or(20_000);
    let env = load(common, "chain")?;
    let behavior = env.policy(&roles.behavior)?;
    let evaluation = env.policy(&roles.evaluation)?;
    let labeler = env.post_hoc(roles.labeler.as_deref())?;
    let extra = mitigations(&env);
    let horizon = env.spec.horizon();
    let mut table = Vec::new();
    let mut summary = Vec::new();
    let mut failures = 0;
    for (k, (kernel, controls)) in kernel_family(&env.spec, behavior, evaluation, labeler, &extra)?.iter().enumerate() {
        for control in controls {
            let setup = ShiftSetup::new(kernel, behavior, evaluation, *control)?;
            let cname = control_name(kernel, *control);
            let stream = derive_seed(seed, (k * 64) as u64 + setup.control() as u64);
            let mut points = Vec::new();
            let mut lines = Vec::new();
            for t in 1..=horizon {
                let report = match defined(variance_decomposition(&setup, t, eta))? {
                    Ok(r) => r,
                    Err(e) => {
                        eprintln!("note: {} control {cname}: stopped at T={}: {e}", kernel.kind(), t - 1);
                        break;
                    }
                };
                let mc = monte_carlo_weight_variance(&setup, t, samples, derive_seed(stream, t as u64))?;
                if kernel.kind() == KernelKind::TrajectoryConditioned && !report.satisfies_bound() {
                    failures += 1;
                    summary.push(format!("FAIL {} control {cname} T={t}: variance {} below bound {}", kernel.kind(), human_num(report.exact_variance), human_num(report.bound)));
                }
                points.push((t, report.exact_variance));
                lines.push((t, report, mc));
            }
            let eta_hat = estimate_eta_hat(&points).ok();
            for (t, report, mc) in lines {
                table.push(vec![
                    kernel.kind().as_str().to_string(),
                    cname.clone(),
                    t.to_string(),
                    csv_num(report.exact_variance),
                    csv_num(mc.variance),
                    csv_num(mc.ci_low),
                    csv_num(mc.ci_high),
                    csv_num(report.bound),
                    eta_hat.map(csv_num).unwrap_or_default(),
                ]);
            }
            summary.push(format!(
                "{:<24} control {:<8} eta_hat {}",
                kernel.kind().as_str(),
                cname,
                eta_hat.map(human_num).unwrap_or_else(|| "-".into())
            ));
        }
    }
    let header = ["kernel", "control", "T", "exact_var", "mc_var", "ci_low", "ci_high", "bound", "eta_hat"];
    Ok(Outcome { file: "variance_sweep.csv", csv: table_csv(&header, &table), summary, failures })
}

fn fit(common: &Common, roles: &Roles, ladder: &[usize], seeds: u64, alpha: f64) -> Result<Outcome> {
    let seed = require_seed(common)?;
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::Invalid(format!("--alpha must be finite and non-negative, got {alpha}")));
    }
    if ladder.windows(2).any(|w| w[0] >= w[1]) || ladder.contains(&0) {
        return Err(Error::Invalid("--ladder must be positive and strictly increasing".into()));
    }
    let env = load(common, "recommender")?;
    let behavior = env.policy(&roles.behavior)?;
    let labeler = env.post_hoc(roles.labeler.as_deref())?;
    let seed_list: Vec<u64> = (0..seeds).map(|i| derive_seed(seed, i)).collect();
    let curve = convergence_curve(&env.spec, behavior, labeler, ladder, &seed_list, alpha)?;
    let decreasing = curve.windows(2).all(|w| w[1].median < w[0].median);
    let table: Vec<Vec<String>> = curve
        .iter()
        .map(|r| vec![r.samples.to_string(), csv_num(r.median), csv_num(r.q1), csv_num(r.q3), csv_num(r.iqr)])
        .collect();
    let mut summary: Vec<String> =
        curve.iter().map(|r| format!("N {:>8}  median TV {}  IQR {}", r.samples, human_num(r.median), human_num(r.iqr))).collect();
    if !decreasing {
        summary.push("FAIL median TV does not strictly decrease along the ladder".into());
    }
    Ok(Outcome {
        file: "fit.csv",
        csv: table_csv(&["samples", "median_tv", "q1", "q3", "iqr"], &table),
        summary,
        failures: usize::from(!decreasing),
    })
}

fn spaced(shape: &Shape, h: &History) -> String {
    shape.key(h).replace(',', " ")
}

fn simulate(common: &Common, roles: &Roles) -> Result<Outcome> {
    let seed = require_seed(common)?;
    let samples = common.samples.unwrap_or(10);
    let env = load(common, "recommender")?;
    let behavior = env.policy(&roles.behavior)?;
    let evaluation = env.policy(&roles.evaluation)?;
    let labeler = env.post_hoc(roles.labeler.as_deref())?;
    let shape = env.spec.shape();
    let truth = GroundTruth::post_hoc(env.spec.clone(), labeler.clone());
    let kernel = trajectory_conditioned_kernel_in(&truth, behavior)?;
    let measure = compose(&kernel, evaluation, Control::FromPrior)?;
    let mut table = Vec::new();
    for i in 0..samples as u64 {
        let mut rng = rng_from_seed(derive_seed(seed, 2 * i));
        let tau = sample_trajectory_with(&env.spec, evaluation, &mut rng)?;
        let z = sample_index(labeler.row(tau.history())?, &mut rng);
        table.push(vec![i.to_string(), "environment".into(), labeler.controls().name(z).into(), spaced(shape, tau.history())]);
        let path = measure.sample(derive_seed(seed, 2 * i + 1))?;
        table.push(vec![
            i.to_string(),
            "simulator".into(),
            kernel.controls().name(path.control).into(),
            spaced(shape, path.trajectory.history()),
        ]);
    }
    Ok(Outcome {
        file: "simulate.csv",
        csv: table_csv(&["sample", "source", "control", "trajectory"], &table),
        summary: vec![format!("{samples} paired rollouts under `{}`", evaluation.tag())],
        failures: 0,
    })
}
