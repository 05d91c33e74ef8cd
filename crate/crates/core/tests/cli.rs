use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const LINEAR: &str = r#"
seed = 9
epsilon = 0.1
[model]
preset = "explicit"
alpha = [1.0]
gamma = [1.0]
[coefficients]
preset = "linear"
delta = 0.0
[simulation]
n_steps = 8
n_paths = 64
store_paths = true
[run]
x = [0.5]
t = 0.5
probe_points = [[0.0]]
ldp_target = [0.2]
"#;

fn qlspde(dir: &Path, args: &[&str], config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qlspde"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let p = dir.join("config.toml");
        fs::write(&p, text).unwrap();
        cmd.arg("--config").arg(p);
    }
    cmd.output().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_hypotheses_writes_summary_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qlspde(tmp.path(), &["check-hypotheses"], None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&tmp.path().join("out/summary.json"));
    assert_eq!(s["command"], "check-hypotheses");
    assert_eq!(s["pass"], true);
    assert!(s["timestamp"].is_u64());
    let csv = fs::read_to_string(tmp.path().join("out/hypotheses.csv")).unwrap();
    assert!(csv.starts_with("group,clause,pass,measured,bound,note"));
}

#[test]
fn failed_assertion_exits_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[model]\npreset = \"constant_alpha\"\nn_modes = 2\n";
    let out = qlspde(tmp.path(), &["check-hypotheses"], Some(cfg));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(json(&tmp.path().join("out/summary.json"))["pass"], false);
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL all_clauses"));
}

#[test]
fn rejected_config_exits_with_two_and_names_the_clause() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qlspde(tmp.path(), &["solve-qlpde"], Some("[model]\nn_modes = 4\n"));
    assert_eq!(out.status.code(), Some(2));
    let e = json(&tmp.path().join("out/error.json"));
    assert_eq!(e["status"], 2);
    assert_eq!(e["clause"], "quadrature_budget");

    let out = qlspde(tmp.path(), &["solve-qlpde"], Some("unknown_key = 1\n"));
    assert_eq!(out.status.code(), Some(2));

    let out = qlspde(tmp.path(), &["check-hypotheses", "--config", "/nonexistent.toml"], None);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn iteration_limit_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[solver]\nmax_iter = 1\nslices = 6\ndegree = 8\n";
    let out = qlspde(tmp.path(), &["solve-qlpde"], Some(cfg));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&tmp.path().join("out/error.json"))["status"], 3);
}

#[test]
fn paths_bin_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qlspde(tmp.path(), &["simulate"], Some(LINEAR));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let bytes = fs::read(tmp.path().join("out/paths.bin")).unwrap();
    let word = |k: usize| u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
    let (paths, steps, modes) = (word(0) as usize, word(1) as usize, word(2) as usize);
    assert_eq!((paths, steps, modes), (64, 8, 1));
    assert_eq!(bytes.len(), 24 + 8 * paths * (steps + 1) * modes);
    let state = |p: usize, k: usize| {
        let off = 24 + 8 * (p * (steps + 1) + k);
        f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap())
    };
    // every path starts at x and ends at its terminal.csv row
    let terminal = fs::read_to_string(tmp.path().join("out/terminal.csv")).unwrap();
    for (p, line) in terminal.lines().skip(1).enumerate() {
        assert_eq!(state(p, 0), 0.5);
        let end: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(state(p, steps), end);
    }
}

#[test]
fn seed_override_changes_monte_carlo_output() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    qlspde(a.path(), &["simulate", "--seed", "1"], Some(LINEAR));
    qlspde(b.path(), &["simulate", "--seed", "1"], Some(LINEAR));
    qlspde(c.path(), &["simulate", "--seed", "2"], Some(LINEAR));
    let read = |d: &Path| fs::read(d.join("out/paths.bin")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_ne!(read(a.path()), read(c.path()));
}

#[test]
fn ldp_minimize_writes_trace_and_control() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qlspde(tmp.path(), &["ldp-minimize"], Some(LINEAR));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&tmp.path().join("out/summary.json"));
    // z' = -z + phi from 0.5 to 0.2 in time 0.5
    let t: f64 = 0.5;
    let miss = 0.2 - 0.5 * (-t).exp();
    let want = miss * miss / (1.0 - (-2.0 * t).exp());
    let got = s["result"]["value"].as_f64().unwrap();
    assert!((got - want).abs() < 1e-3 * want, "{got} vs {want}");
    let control = json(&tmp.path().join("out/control.json"));
    assert_eq!(control["times"].as_array().unwrap().len(), control["values"].as_array().unwrap().len());
    assert!(fs::read_to_string(tmp.path().join("out/trace.csv")).unwrap().starts_with("outer,penalty,action,gap"));
}

#[test]
fn saved_field_is_reused_by_verify_fk() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[solver]\nslices = 8\ndegree = 10\n[simulation]\nn_paths = 500\nn_steps = 20\n[run]\nprobe_points = [[0.0, 0.0]]\n";
    let out = qlspde(tmp.path(), &["solve-qlpde"], Some(cfg));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let field = tmp.path().join("out/field.json");
    let dir = tempfile::tempdir().unwrap();
    let out = qlspde(dir.path(), &["verify-fk", "--field", field.to_str().unwrap()], Some(cfg));
    assert!(matches!(out.status.code(), Some(0 | 1)), "{}", String::from_utf8_lossy(&out.stderr));
    let s = json(&dir.path().join("out/summary.json"));
    assert!(s["result"]["solver"].is_null());

    // a field solved at another noise level is rejected
    let other = format!("epsilon = 0.2\n{cfg}");
    let out = qlspde(dir.path(), &["verify-fk", "--field", field.to_str().unwrap()], Some(&other));
    assert_eq!(out.status.code(), Some(2));
}
