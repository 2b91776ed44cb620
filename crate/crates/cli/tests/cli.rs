use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_misspec-rl"));
    cmd.env("MISSPEC_RL_THREADS", "2").env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn minimal_config(episodes: usize) -> Value {
    json!({
        "config_version": 1,
        "run_id": "mini",
        "episodes": episodes,
        "seeds": [0, 1],
        "env": {
            "source": "generate",
            "kind": "simplex_mixture",
            "n_states": 4,
            "n_actions": 3,
            "horizon": 2,
            "dim": 3,
            "eps_mis_target": 0.05,
            "seed": 2
        },
        "algorithm": { "name": "sup_lsvi_ucb", "eps_tol": 0.25, "alpha_scale": 0.05 }
    })
}

fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_one_row_per_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &minimal_config(30));
    let out = dir.path().join("out");
    let res = run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let csv = fs::read_to_string(out.join("regret_mini_seed0.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(csv.starts_with("k,regret_inc,cum_regret,psi_1_1,"));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary_mini.json")).unwrap()).unwrap();
    assert_eq!(summary["summary_version"], 1);
    assert_eq!(summary["seeds"].as_array().unwrap().len(), 2);
    assert!(out.join("spec_mini.json").exists());
}

#[test]
fn degenerate_tolerance_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &minimal_config(5));
    let res = run(&[
        "run", "--quiet", "--config", s(&cfg), "--out", s(&dir.path().join("o")),
        "--set", "env.dim=1", "--set", "algorithm.eps_tol=2.0",
    ]);
    assert_eq!(code(&res), 1);
    assert!(text(&res.stderr).contains("eps_tol yields L ≤ 0"), "{}", text(&res.stderr));
}

#[test]
fn undeclared_override_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &minimal_config(5));
    for key in ["algorithm.bogus=1", "nothing.here=1", "episodes"] {
        let res = run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--set", key]);
        assert_eq!(code(&res), 1, "{key}");
    }
}

#[test]
fn injected_bound_violation_exits_two_in_exact_mode() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal_config(10);
    cfg["invariant_mode"] = json!("paper-exact-assert");
    cfg["algorithm"]["alpha_scale"] = json!(1.0);
    cfg["test_hooks"] = json!({ "psi_bound_override": 0.0 });
    let cfg = write_json(dir.path(), "c.json", &cfg);
    let res = run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&res), 2);
    assert!(text(&res.stderr).contains("dataset-bound"), "{}", text(&res.stderr));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &minimal_config(40));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(code(&run(&["run", "--quiet", "--config", s(&cfg), "--out", s(out)])), 0);
    }
    for name in ["regret_mini_seed0.csv", "regret_mini_seed1.csv", "summary_mini.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let res = run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&dir.path().join("c")), "--seed", "9"]);
    assert_eq!(code(&res), 0);
    assert_ne!(
        fs::read(a.join("regret_mini_seed0.csv")).unwrap(),
        fs::read(dir.path().join("c/regret_mini_seed0.csv")).unwrap()
    );
}

#[test]
fn sweep_expands_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = minimal_config(8);
    cfg["sweep"] = json!([
        { "key": "env.eps_mis_target", "values": [0.0, 0.1] },
        { "key": "algorithm.alpha_scale", "values": [0.05, 0.1, 0.2] }
    ]);
    let cfg = write_json(dir.path(), "c.json", &cfg);
    let out = dir.path().join("out");
    let res = run(&["sweep", "--quiet", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&res), 0, "{}", text(&res.stderr));
    let index: Value = serde_json::from_str(&fs::read_to_string(out.join("sweep_mini.json")).unwrap()).unwrap();
    let cells = index["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);
    assert_eq!(cells[1]["assignments"]["algorithm.alpha_scale"], json!(0.1));
    for i in 0..6 {
        assert!(out.join(format!("regret_mini-c{i}_seed1.csv")).exists());
    }
}

#[test]
fn plot_draws_one_curve_per_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_json(dir.path(), "c.json", &minimal_config(20));
    let out = dir.path().join("out");
    assert_eq!(code(&run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&out), "--set", "seeds=[0,1,2]"])), 0);
    let csvs: Vec<PathBuf> = (0..3).map(|i| out.join(format!("regret_mini_seed{i}.csv"))).collect();

    let one = dir.path().join("one.svg");
    assert_eq!(code(&run(&["plot", "--quiet", s(&csvs[0]), "--out", s(&one)])), 0);
    let svg = fs::read_to_string(&one).unwrap();
    assert_eq!(svg.matches("<path").count(), 2);

    let res = run(&["plot", "--quiet", s(&csvs[0]), s(&csvs[1]), s(&csvs[2]), "--out", s(&dir.path().join("plots"))]);
    assert_eq!(code(&res), 0);
    let svg = fs::read_to_string(dir.path().join("plots/regret.svg")).unwrap();
    for i in 0..3 {
        assert!(svg.contains(&format!(">mini_seed{i}<")));
    }
}

#[test]
fn plot_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "k,regret_inc,cum_regret,calls,wall_ns\n1,0.2,0.2,1,0\n2,0.1,0.3,1,0\n3,0,0.25,1,0\n").unwrap();
    let res = run(&["plot", "--quiet", s(&bad), "--out", s(&dir.path().join("x.svg"))]);
    assert_eq!(code(&res), 1);
    assert!(text(&res.stderr).contains("row 3"), "{}", text(&res.stderr));
    let res = run(&["plot", "--quiet", s(&dir.path().join("missing.csv"))]);
    assert_eq!(code(&res), 1);
}

#[test]
fn verify_quick_suite_passes() {
    let res = run(&["verify", "--quiet", "--set", "draws=300", "--set", "instances=2", "--set", "episodes=30"]);
    assert_eq!(code(&res), 0, "{}{}", text(&res.stdout), text(&res.stderr));
    let table = text(&res.stdout);
    for name in ["rounding-error", "norm-equivalence", "dataset-bound", "level>=2", "ensemble-equivalence", "dp-oracle"] {
        assert!(table.contains(name), "{name}");
    }
}

#[test]
fn verify_zero_rounding_width_is_a_config_error() {
    let res = run(&["verify", "--quiet", "--set", "eps_rnd=0"]);
    assert_eq!(code(&res), 1);
}

fn oversized_spec(dir: &Path) -> PathBuf {
    let out = dir.join("gen");
    let cfg = write_json(dir, "c.json", &minimal_config(2));
    assert_eq!(code(&run(&["run", "--quiet", "--config", s(&cfg), "--out", s(&out)])), 0);
    let mut spec: Value = serde_json::from_str(&fs::read_to_string(out.join("spec_mini.json")).unwrap()).unwrap();
    spec["phi"][0][0] = json!([1.5, 0.0, 0.0]);
    write_json(dir, "bad_spec.json", &spec)
}

#[test]
fn verify_names_the_violation_of_a_perturbed_spec() {
    let dir = tempfile::tempdir().unwrap();
    let spec = oversized_spec(dir.path());
    let res = run(&[
        "verify", "--quiet", "--set", &format!("spec={:?}", s(&spec)),
        "--set", "draws=100", "--set", "instances=1", "--set", "episodes=10",
    ]);
    assert_eq!(code(&res), 2);
    let table = text(&res.stdout);
    assert!(table.contains("spec-validation") && table.contains("feature-norm"), "{table}");
}

#[test]
fn validate_spec_reports_status() {
    let dir = tempfile::tempdir().unwrap();
    let spec = oversized_spec(dir.path());
    let res = run(&["validate-spec", "--quiet", s(&spec)]);
    assert_eq!(code(&res), 2);
    assert!(text(&res.stderr).contains("feature norm exceeds 1"));
    let good = dir.path().join("gen/spec_mini.json");
    assert_eq!(code(&run(&["validate-spec", "--quiet", s(&good)])), 0);
    let cfg = dir.path().join("c.json");
    assert_eq!(code(&run(&["validate-spec", "--quiet", "--config", s(&cfg)])), 0);
    assert_eq!(code(&run(&["validate-spec", "--quiet"])), 1);
}
