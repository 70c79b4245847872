//! Single runs and the files they leave in the output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde_json::json;
use wcrit_core::trainers::{
    contraction_study, train_fixed_policy, train_offline_rejection, ContractionReport, MetricsTrace, OfflineReport,
    RunConfig,
};

use crate::plot::line_chart;
use crate::props::{run_props, PropResult};

pub const METRICS_FILE: &str = "metrics.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const PLOT_FILE: &str = "w2.svg";
pub const CONFIG_FILE: &str = "config.txt";

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_trace(dir: &Path, cfg: &RunConfig, trace: &MetricsTrace) -> Result<()> {
    write(dir, CONFIG_FILE, &cfg.to_kv_string())?;
    write(dir, METRICS_FILE, &trace.to_csv_string()?)?;
    write(dir, EVENTS_FILE, &trace.to_jsonl_string())?;
    let points: Vec<(f64, f64)> = trace.records.iter().map(|r| (r.step as f64, r.mean_w2)).collect();
    let title = format!("{} on {}", cfg.critic.name(), cfg.env.kind.name());
    write(dir, PLOT_FILE, &line_chart(&title, "gradient step", "mean W2 to oracle", &points))
}

pub fn eval_fixed(cfg: &RunConfig, dir: &Path) -> Result<MetricsTrace> {
    prepare(dir)?;
    let trace = train_fixed_policy(cfg)?;
    write_trace(dir, cfg, &trace)?;
    Ok(trace)
}

pub fn offline(cfg: &RunConfig, dir: &Path) -> Result<OfflineReport> {
    prepare(dir)?;
    let rep = train_offline_rejection(cfg)?;
    write_trace(dir, cfg, &rep.trace)?;
    let mut policy = String::from("state,action\n");
    for (s, a) in rep.policy.iter().enumerate() {
        let _ = writeln!(policy, "{s},{a}");
    }
    write(dir, "policy.csv", &policy)?;
    let summary = json!({
        "extraction_value": rep.extraction_value,
        "behaviour_value": rep.behaviour_value,
        "extraction_rollout": rep.extraction_rollout,
        "behaviour_rollout": rep.behaviour_rollout,
        "zero_support_selections": rep.zero_support_selections,
        "fallback_states": rep.fallback_states,
        "aborted": rep.trace.aborted,
    });
    write(dir, "offline.json", &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    Ok(rep)
}

pub fn contraction(cfg: &RunConfig, dir: &Path) -> Result<ContractionReport> {
    prepare(dir)?;
    let (mdp, policy) = cfg.build_env()?;
    let rep = contraction_study(&mdp, &policy, cfg.contraction_p, cfg.contraction_sweeps, cfg.support_size)?;
    write(dir, CONFIG_FILE, &cfg.to_kv_string())?;
    let violations = rep.violations();
    let mut csv = String::from("sweep,distance,ratio,bound_violated\n");
    for (k, d) in rep.distances.iter().enumerate() {
        let ratio = rep.ratios.get(k).map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{k},{d},{ratio},{}", violations.contains(&k));
    }
    write(dir, "contraction.csv", &csv)?;
    let points: Vec<(f64, f64)> = rep.distances.iter().enumerate().map(|(k, d)| (k as f64, *d)).collect();
    write(dir, "contraction.svg", &line_chart("distance to the fixed point", "sweep", "sup W_p", &points))?;
    Ok(rep)
}

pub fn props(seed: u64, dir: &Path) -> Result<Vec<PropResult>> {
    prepare(dir)?;
    let results = run_props(seed);
    let mut csv = String::from("property,passed,detail\n");
    for r in &results {
        let _ = writeln!(csv, "{},{},\"{}\"", r.name, r.passed, r.detail.replace('"', "'"));
    }
    write(dir, "props.csv", &csv)?;
    Ok(results)
}
