use std::path::Path;
use std::process::{Command, Output};

fn eefl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eefl")).args(args).output().unwrap()
}

const CONFIG: &str = r#"splits = ["33-33-33", "80-15-5"]
total_samples = 300
strategies = ["equal", "serving_rate"]
seeds = [1, 2]
[task.mlp]
hidden_dim = 8
test_samples = 60
[evaluation]
noise_probes = 0
[train]
rounds = 2
local_steps = 2
batch_size = 8
"#;

fn run_config(dir: &Path, extra: &[&str]) -> Output {
    let config = dir.join("config.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let out = dir.join("out");
    let mut args = vec!["run", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    eefl(&args)
}

#[test]
fn missing_config_fails_with_one_line() {
    let out = eefl(&["run", "/nonexistent/config.toml"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(stderr.starts_with("error: config error"));
}

#[test]
fn run_then_compare() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(dir.path(), &["--threads", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = dir.path().join("out/results.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 2 * 2 * 2);
    assert!(dir.path().join("out/runs/seed1_equal_80-15-5_serving_rate_k0/report.json").exists());

    let cmp = eefl(&["compare", csv.to_str().unwrap(), "--baseline", "equal", "--candidate", "serving_rate"]);
    assert!(cmp.status.success());
    let stdout = String::from_utf8(cmp.stdout).unwrap();
    let thirds = stdout.lines().find(|l| l.contains(",33-33-33,")).unwrap();
    assert_eq!(thirds, "equal,33-33-33,0,2,0,0");

    let same = eefl(&["compare", csv.to_str().unwrap(), "--baseline", "equal", "--candidate", "equal"]);
    let stdout = String::from_utf8(same.stdout).unwrap();
    assert!(stdout.lines().skip(1).all(|l| l.ends_with(",0,0")), "{stdout}");

    let missing = eefl(&["compare", csv.to_str().unwrap(), "--baseline", "equal", "--candidate", "flops_prop"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8(missing.stderr).unwrap().contains("missing rows"));
}

#[test]
fn seed_override_replaces_seed_list() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_config(dir.path(), &["--seed-override", "9"]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.starts_with("9,")));
}
