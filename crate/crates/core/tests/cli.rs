use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn usersim(args: &[&str], out: &Path) -> Run {
    let output = Command::new(env!("CARGO_BIN_EXE_usersim"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs");
    Run {
        code: output.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name).to_string_lossy().into_owned()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

#[test]
fn examples_pass_and_corruption_is_caught() {
    let dir = tempfile::tempdir().unwrap();
    let run = usersim(&["examples"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    assert!(run.stdout.contains("0.625"));
    let csv = fs::read_to_string(dir.path().join("examples.csv")).unwrap();
    assert!(csv.starts_with("diagnostic,environment,kernel,policy_pair,control,horizon,value,bound,tolerance,pass\n"));
    assert!(column(&csv, "pass").iter().all(|p| p == "pass"));
    assert!(!csv.contains('\r'));

    let run = usersim(&["examples", "--corrupt-fixture"], dir.path());
    assert_eq!(run.code, 1);
    let csv = fs::read_to_string(dir.path().join("examples.csv")).unwrap();
    assert!(column(&csv, "pass").iter().any(|p| p == "fail"));
}

#[test]
fn unknown_suite_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let run = usersim(&["replay"], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("Usage"));
}

#[test]
fn theorem_suite_edges() {
    let dir = tempfile::tempdir().unwrap();
    let run = usersim(&["theorems", "--envs", "0"], dir.path());
    assert_eq!(run.code, 0);
    let csv = fs::read_to_string(dir.path().join("theorems.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1);

    assert_eq!(usersim(&["theorems", "--horizon", "11"], dir.path()).code, 2);
    assert_eq!(usersim(&["theorems", "--env", "chain", "--horizon", "11"], dir.path()).code, 2);

    let run = usersim(&["theorems", "--envs", "3", "--seed", "5"], dir.path());
    assert_eq!(run.code, 0, "{}", run.stdout);
    let csv = fs::read_to_string(dir.path().join("theorems.csv")).unwrap();
    let diagnostics = column(&csv, "diagnostic");
    for d in ["bias_identity", "variance_decomposition", "variance_floor", "martingale", "mitigation_ratio", "mitigation_variance"] {
        assert!(diagnostics.iter().any(|x| x == d), "missing {d}");
    }
    let mut sorted = csv.lines().skip(1).map(String::from).collect::<Vec<_>>();
    sorted.sort();
    assert_eq!(sorted.len(), diagnostics.len());
}

#[test]
fn theorem_suite_on_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let run = usersim(&["theorems", "--env", &data("two_step_mixed.json")], dir.path());
    assert_eq!(run.code, 0, "{}{}", run.stdout, run.stderr);
    let csv = fs::read_to_string(dir.path().join("theorems.csv")).unwrap();
    let kernels = column(&csv, "kernel");
    for k in ["trajectory_conditioned", "a_priori", "dynamic_state", "policy_conditioned"] {
        assert!(kernels.iter().any(|x| x == k), "missing {k}");
    }
    assert_eq!(usersim(&["theorems", "--env", &data("two_step_mixed.json"), "--behavior", "pi_x"], dir.path()).code, 2);
}

#[test]
fn variance_sweep_contract() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["variance-sweep", "--seed", "11", "--horizon", "3", "--samples", "2000"];
    let run = usersim(&args, dir.path());
    assert_eq!(run.code, 0, "{}", run.stderr);
    let first = fs::read(dir.path().join("variance_sweep.csv")).unwrap();
    usersim(&args, dir.path());
    assert_eq!(first, fs::read(dir.path().join("variance_sweep.csv")).unwrap());

    let csv = String::from_utf8(first).unwrap();
    assert!(csv.starts_with("kernel,control,T,exact_var,mc_var,ci_low,ci_high,bound,eta_hat\n"));
    let kernels = column(&csv, "kernel");
    for k in ["trajectory_conditioned", "a_priori", "dynamic_state", "policy_conditioned", "parameterized_dynamics"] {
        assert_eq!(kernels.iter().filter(|x| *x == k).count() % 3, 0, "{k}");
        assert!(kernels.iter().any(|x| x == k), "{k}");
    }

    let run = usersim(&["variance-sweep", "--seed", "11", "--horizon", "3", "--samples", "500", "--eta", "0"], dir.path());
    assert_eq!(run.code, 0);
    let csv = fs::read_to_string(dir.path().join("variance_sweep.csv")).unwrap();
    assert!(column(&csv, "bound").iter().all(|b| b == "0"));

    assert_eq!(usersim(&["variance-sweep", "--horizon", "2"], dir.path()).code, 2);
    assert_eq!(usersim(&["variance-sweep", "--seed", "1", "--eta", "-0.5"], dir.path()).code, 2);
    assert_eq!(usersim(&["variance-sweep", "--seed", "1", "--horizon", "2", "--samples", "100", "--eta", "5"], dir.path()).code, 1);
}

#[test]
fn fit_contract() {
    let dir = tempfile::tempdir().unwrap();
    let run = usersim(&["fit", "--seed", "2", "--ladder", "300", "--seeds", "1"], dir.path());
    assert_eq!(run.code, 0);
    let csv = fs::read_to_string(dir.path().join("fit.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(column(&csv, "iqr"), vec!["0"]);

    let run = usersim(&["fit", "--seed", "2", "--ladder", "100,1000,10000", "--seeds", "4"], dir.path());
    assert_eq!(run.code, 0);
    let medians: Vec<f64> = column(&fs::read_to_string(dir.path().join("fit.csv")).unwrap(), "median_tv")
        .iter()
        .map(|m| m.parse().unwrap())
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]));

    assert_eq!(usersim(&["fit", "--seed", "2", "--alpha", "-1"], dir.path()).code, 2);
    assert_eq!(usersim(&["fit", "--seed", "2", "--ladder", "1000,100"], dir.path()).code, 2);
    assert_eq!(usersim(&["fit", "--seed", "2", "--ladder", "100,100"], dir.path()).code, 2);
    assert_eq!(usersim(&["fit", "--ladder", "100"], dir.path()).code, 2);
}

#[test]
fn simulate_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let read = || fs::read_to_string(dir.path().join("simulate.csv")).unwrap();
    assert_eq!(usersim(&["simulate", "--seed", "8", "--samples", "50"], dir.path()).code, 0);
    let a = read();
    assert_eq!(usersim(&["simulate", "--seed", "8", "--samples", "50"], dir.path()).code, 0);
    assert_eq!(a, read());
    assert_eq!(a.lines().count(), 101);
    assert_eq!(usersim(&["simulate", "--seed", "9", "--samples", "50"], dir.path()).code, 0);
    assert_ne!(a, read());
    // Under the shifted policy the recommender always shows item 1.
    assert!(column(&a, "trajectory").iter().all(|t| t.starts_with("q 1 ")));
}

#[test]
fn bad_environment_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p.to_string_lossy().into_owned()
    };
    let two_violations = write(
        "two.json",
        r#"{"user_alphabet": ["u", "v"], "agent_alphabet": ["a"], "horizon": 1,
            "user_dynamics": {"": {"u": 0.7}},
            "policies": {"pi_b": {"u": {"a": 0.5}, "v": {"a": 1.0}}}}"#,
    );
    let run = usersim(&["theorems", "--env", &two_violations], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.contains("not normalized"), "{}", run.stderr);

    let policy_only = write(
        "policy.json",
        r#"{"user_alphabet": ["u", "v"], "agent_alphabet": ["a", "b"], "horizon": 1,
            "user_dynamics": {"": {"u": 0.5, "v": 0.5}},
            "policies": {"pi_b": {"u": {"a": 0.5}, "v": {"b": 2.0}}}}"#,
    );
    let run = usersim(&["theorems", "--env", &policy_only], dir.path());
    assert_eq!(run.code, 2);
    assert!(run.stderr.lines().filter(|l| l.starts_with("error:")).count() >= 2, "{}", run.stderr);

    for (name, text) in [
        ("truncated.json", r#"{"user_alphabet": ["u""#),
        ("unknown_field.json", r#"{"user_alphabet": ["u"], "agent_alphabet": ["a"], "horizon": 1, "user_dynamics": {}, "extra": 1}"#),
        ("unknown_symbol.json", r#"{"user_alphabet": ["u"], "agent_alphabet": ["a"], "horizon": 1, "user_dynamics": {"": {"w": 1.0}}}"#),
        ("zero_horizon.json", r#"{"user_alphabet": ["u"], "agent_alphabet": ["a"], "horizon": 0, "user_dynamics": {}}"#),
        ("huge.json", r#"{"user_alphabet": ["u", "v"], "agent_alphabet": ["a", "b"], "horizon": 40, "user_dynamics": {}}"#),
        ("empty.json", ""),
    ] {
        let path = write(name, text);
        for suite in [&["theorems"][..], &["variance-sweep", "--seed", "1"], &["fit", "--seed", "1"], &["simulate", "--seed", "1"]] {
            let mut args = suite.to_vec();
            args.extend(["--env", &path]);
            let run = usersim(&args, dir.path());
            assert_eq!(run.code, 2, "{name} {suite:?}: {}", run.stderr);
        }
    }
    assert_eq!(usersim(&["theorems", "--env", "/no/such/file.json"], dir.path()).code, 2);
}

#[test]
fn environment_file_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(usersim(&["fit", "--seed", "4", "--ladder", "200,2000", "--seeds", "3"], &a).code, 0);
    let file = data("recommender.json");
    assert_eq!(usersim(&["fit", "--seed", "4", "--ladder", "200,2000", "--seeds", "3", "--env", &file], &b).code, 0);
    assert_eq!(fs::read(a.join("fit.csv")).unwrap(), fs::read(b.join("fit.csv")).unwrap());
}
