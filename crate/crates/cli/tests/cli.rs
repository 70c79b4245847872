use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use wcrit_cli::config::parse_config_str;
use wcrit_core::dist1d::iqm;
use wcrit_core::trainers::RunConfig;

const QUICK: &[&str] = &[
    "--set",
    "env.kind=chain",
    "--set",
    "train.gradient_steps=30",
    "--set",
    "train.eval_every=10",
    "--set",
    "eval.max_pairs=4",
    "--set",
    "eval.n_samples=20",
    "--set",
    "data.size=200",
];

fn wcrit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wcrit"))
        .args(args)
        .env_remove("WCRIT_SEED")
        .output()
        .expect("binary runs")
}

fn run_quick(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    wcrit(&args)
}

fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn unknown_subcommand_fails() {
    assert!(!wcrit(&["bogus"]).status.success());
    assert!(!wcrit(&["eval-fixed", "--set", "nope=1"]).status.success());
}

#[test]
fn zero_steps_gives_a_single_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_quick("eval-fixed", dir.path(), &["--set", "train.gradient_steps=0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = csv_rows(&dir.path().join("metrics.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("0,"));
    for f in ["events.jsonl", "w2.svg", "config.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn props_pass() {
    let dir = tempfile::tempdir().unwrap();
    let out = wcrit(&["props", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn repeat_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(run_quick("eval-fixed", d.path(), &["--seed", "11"]).status.success());
    }
    for f in ["metrics.csv", "events.jsonl", "w2.svg", "config.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sweep_counts_runs_and_summary_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_quick("sweep", dir.path(), &["--override", "train.lr=1e-3,3e-4", "--seeds", "3", "--jobs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&dir.path().join("runs.csv")).len(), 6);
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    assert!(lines.next().unwrap().starts_with("config,train.lr,seeds"));
    assert_eq!(lines.count(), 2);
    for c in 0..2 {
        for s in 0..3 {
            assert!(dir.path().join(format!("c{c:03}_s{s:02}/metrics.csv")).exists());
        }
    }
}

#[test]
fn one_seed_sweep_matches_a_plain_run() {
    let (plain, sw) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(run_quick("eval-fixed", plain.path(), &["--seed", "5"]).status.success());
    assert!(run_quick("sweep", sw.path(), &["--seed", "5", "--seeds", "1"]).status.success());
    assert_eq!(
        fs::read(plain.path().join("metrics.csv")).unwrap(),
        fs::read(sw.path().join("c000_s00/metrics.csv")).unwrap()
    );
}

#[test]
fn sweep_rejects_bad_points_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_quick("sweep", dir.path(), &["--override", "critic.M=4,0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("c000_s00").exists());
}

#[test]
fn seed_flag_beats_environment() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["eval-fixed", "--out", a.path().to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(QUICK);
    let st = Command::new(env!("CARGO_BIN_EXE_wcrit")).args(&args).env("WCRIT_SEED", "9").output().unwrap().status;
    assert!(st.success());
    assert!(run_quick("eval-fixed", b.path(), &["--seed", "3"]).status.success());
    assert_eq!(fs::read(a.path().join("metrics.csv")).unwrap(), fs::read(b.path().join("metrics.csv")).unwrap());
    assert!(fs::read_to_string(a.path().join("config.txt")).unwrap().contains("seed=3\n"));
}

#[test]
fn offline_writes_policy_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_quick("offline", dir.path(), &["--set", "env.kind=mixed_walk", "--set", "offline.episodes=50"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("offline.json")).unwrap()).unwrap();
    assert!(summary["extraction_value"].is_f64());
    assert!(csv_rows(&dir.path().join("policy.csv")).len() > 1);
}

#[test]
fn written_config_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_quick("eval-fixed", dir.path(), &["--set", "train.gradient_steps=0", "--set", "net.hidden=8,8"]).status.success());
    let text = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    let cfg = parse_config_str(&text).unwrap();
    assert_eq!(cfg.to_kv_string(), text);
    assert_eq!(cfg.net.hidden, [8, 8]);
    assert_ne!(cfg, RunConfig::default());
}

#[test]
fn iqm_of_constant_is_constant() {
    assert_eq!(iqm(&[2.5; 7]).unwrap(), 2.5);
}
