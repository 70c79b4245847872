//! Grid sweeps over config overrides and seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use wcrit_core::dist1d::trimmed_mean;
use wcrit_core::trainers::{split_seed, RunConfig};

use crate::run;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    EvalFixed,
    Offline,
}

/// One swept key and its values. Values are split on `|` when the string
/// contains one, otherwise on `,`, so list-valued keys can be swept as
/// `net.hidden=64|64,64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub values: Vec<String>,
}

impl Override {
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, rest) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--override expects key=v1,v2,..., got `{spec}`"))?;
        let sep = if rest.contains('|') { '|' } else { ',' };
        let values: Vec<String> = rest.split(sep).map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            bail!("--override {spec}: empty value");
        }
        Ok(Self {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// The seed of replicate `j`; replicate 0 keeps the base seed so a
/// one-seed sweep reproduces a plain run.
pub fn replicate_seed(base: u64, j: usize) -> u64 {
    if j == 0 {
        base
    } else {
        split_seed(base, j as u64)
    }
}

/// Every combination of override values, first override varying slowest.
pub fn expand(base: &RunConfig, overrides: &[Override]) -> Result<Vec<(Vec<String>, RunConfig)>> {
    let mut grid = vec![(Vec::new(), base.clone())];
    for o in overrides {
        let mut next = Vec::with_capacity(grid.len() * o.values.len());
        for (labels, cfg) in &grid {
            for v in &o.values {
                let mut c = cfg.clone();
                c.set(&o.key, v).map_err(|e| anyhow!("--override {}={v}: {e}", o.key))?;
                let mut l = labels.clone();
                l.push(v.clone());
                next.push((l, c));
            }
        }
        grid = next;
    }
    for (labels, cfg) in &grid {
        cfg.validate().with_context(|| format!("sweep point {}", labels.join(" ")))?;
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub config: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub final_mean_w2: f64,
    pub final_sup_w2: f64,
    pub aborted: bool,
    /// Exact value of the extracted policy (offline sweeps only).
    pub extraction_value: Option<f64>,
}

pub fn run_dir(out: &Path, config: usize, replicate: usize) -> PathBuf {
    out.join(format!("c{config:03}_s{replicate:02}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Runs the whole grid on `jobs` threads and writes `runs.csv` and
/// `summary.csv` (IQM over seeds of the final metrics) to `out`.
pub fn sweep(
    base: &RunConfig,
    overrides: &[Override],
    seeds: usize,
    mode: SweepMode,
    jobs: usize,
    out: &Path,
) -> Result<Vec<RunSummary>> {
    if seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let grid = expand(base, overrides)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let tasks: Vec<(usize, usize)> = (0..grid.len()).flat_map(|c| (0..seeds).map(move |j| (c, j))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .context("building thread pool")?;
    let runs: Vec<RunSummary> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, j)| -> Result<RunSummary> {
                let mut cfg = grid[c].1.clone();
                cfg.seed = replicate_seed(base.seed, j);
                let dir = run_dir(out, c, j);
                let (trace, extraction_value) = match mode {
                    SweepMode::EvalFixed => (run::eval_fixed(&cfg, &dir)?, None),
                    SweepMode::Offline => {
                        let r = run::offline(&cfg, &dir)?;
                        (r.trace, Some(r.extraction_value))
                    }
                };
                let last = trace.last().ok_or_else(|| anyhow!("run {} produced no records", dir.display()))?;
                Ok(RunSummary {
                    config: c,
                    seed: cfg.seed,
                    final_mean_w2: last.mean_w2,
                    final_sup_w2: last.sup_w2,
                    aborted: trace.aborted.is_some(),
                    extraction_value,
                    dir,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut runs_csv = String::from("config,seed,dir,final_mean_w2,final_sup_w2,aborted\n");
    for r in &runs {
        let dir = r.dir.file_name().map(|d| d.to_string_lossy().into_owned()).unwrap_or_default();
        let _ = writeln!(runs_csv, "{},{},{dir},{},{},{}", r.config, r.seed, r.final_mean_w2, r.final_sup_w2, r.aborted);
    }
    fs::write(out.join("runs.csv"), runs_csv).context("writing runs.csv")?;
    fs::write(out.join("summary.csv"), summary_csv(&grid, overrides, &runs, mode)).context("writing summary.csv")?;
    Ok(runs)
}

fn summary_csv(grid: &[(Vec<String>, RunConfig)], overrides: &[Override], runs: &[RunSummary], mode: SweepMode) -> String {
    let mut header: Vec<String> = vec!["config".into()];
    header.extend(overrides.iter().map(|o| csv_field(&o.key)));
    header.extend(["seeds", "aborted", "iqm_final_mean_w2", "iqm_final_sup_w2"].map(String::from));
    if mode == SweepMode::Offline {
        header.push("iqm_extraction_value".into());
    }
    let mut s = header.join(",");
    s.push('\n');
    for (c, (labels, _)) in grid.iter().enumerate() {
        let rs: Vec<&RunSummary> = runs.iter().filter(|r| r.config == c).collect();
        let stat = |f: &dyn Fn(&RunSummary) -> f64| {
            let v: Vec<f64> = rs.iter().map(|r| f(r)).filter(|x| x.is_finite()).collect();
            if v.is_empty() {
                f64::NAN
            } else {
                trimmed_mean(&v)
            }
        };
        let mut row: Vec<String> = vec![c.to_string()];
        row.extend(labels.iter().map(|l| csv_field(l)));
        row.push(rs.len().to_string());
        row.push(rs.iter().filter(|r| r.aborted).count().to_string());
        row.push(stat(&|r| r.final_mean_w2).to_string());
        row.push(stat(&|r| r.final_sup_w2).to_string());
        if mode == SweepMode::Offline {
            row.push(stat(&|r| r.extraction_value.unwrap_or(f64::NAN)).to_string());
        }
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}
