use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use wcrit_cli::config::{self, SEED_ENV};
use wcrit_cli::run;
use wcrit_cli::sweep::{self, Override, SweepMode};
use wcrit_core::trainers::RunConfig;

/// Flow-matching distributional critics on tabular MDPs.
#[derive(Parser)]
#[command(name = "wcrit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed and the WCRIT_SEED variable.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// key=value assignment applied after the config file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    EvalFixed,
    Offline,
}

#[derive(Subcommand)]
enum Command {
    /// Train a critic for a fixed policy and track W2 to the DP oracle.
    EvalFixed(Common),
    /// Train on behaviour data with rejection-sampling policy extraction.
    Offline(Common),
    /// Distance of distributional DP iterates to the fixed point.
    Contraction(Common),
    /// Run the built-in property checks.
    Props(Common),
    /// Grid over overrides and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// key=v1,v2,... (or v1|v2 for list values); repeatable.
        #[arg(long = "override", value_name = "KEY=VALUES")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, value_enum, default_value = "eval-fixed")]
        mode: Mode,
    },
}

fn load(c: &Common) -> Result<RunConfig> {
    let env_seed = std::env::var(SEED_ENV).ok();
    config::load(c.config.as_deref(), &c.sets, env_seed.as_deref(), c.seed)
}

fn in_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    Ok(pool.install(f))
}

/// Exit 0 on success, 1 when a check fails, 2 on bad input or I/O errors,
/// 3 when training stopped on a numerical failure.
fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::EvalFixed(c) => {
            let cfg = load(&c)?;
            let trace = in_pool(c.jobs, || run::eval_fixed(&cfg, &c.out))??;
            if let Some(last) = trace.last() {
                println!("step {} mean_w2 {:.6} sup_w2 {:.6}", last.step, last.mean_w2, last.sup_w2);
            }
            if let Some(reason) = &trace.aborted {
                eprintln!("aborted: {reason}");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Offline(c) => {
            let cfg = load(&c)?;
            let rep = in_pool(c.jobs, || run::offline(&cfg, &c.out))??;
            println!(
                "extraction value {:.6} (rollout {:.6}), behaviour value {:.6} (rollout {:.6}), zero-support selections {}",
                rep.extraction_value, rep.extraction_rollout, rep.behaviour_value, rep.behaviour_rollout, rep.zero_support_selections
            );
            if let Some(reason) = &rep.trace.aborted {
                eprintln!("aborted: {reason}");
                return Ok(3);
            }
            Ok(0)
        }
        Command::Contraction(c) => {
            let cfg = load(&c)?;
            let rep = run::contraction(&cfg, &c.out)?;
            let v = rep.violations();
            println!("{} sweeps, bound violated at {} of them", rep.distances.len().saturating_sub(1), v.len());
            Ok(if v.is_empty() { 0 } else { 1 })
        }
        Command::Props(c) => {
            let seed = match (c.seed, std::env::var(SEED_ENV).ok()) {
                (Some(s), _) => s,
                (None, Some(v)) => v.trim().parse()?,
                (None, None) => 0,
            };
            let results = run::props(seed, &c.out)?;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            Ok(if results.iter().all(|r| r.passed) { 0 } else { 1 })
        }
        Command::Sweep {
            common,
            overrides,
            seeds,
            mode,
        } => {
            let cfg = load(&common)?;
            let overrides = overrides.iter().map(|o| Override::parse(o)).collect::<Result<Vec<_>>>()?;
            let mode = match mode {
                Mode::EvalFixed => SweepMode::EvalFixed,
                Mode::Offline => SweepMode::Offline,
            };
            let runs = sweep::sweep(&cfg, &overrides, seeds, mode, common.jobs, &common.out)?;
            let aborted = runs.iter().filter(|r| r.aborted).count();
            println!("{} runs, {aborted} aborted; summary in {}", runs.len(), common.out.join("summary.csv").display());
            Ok(if aborted > 0 { 3 } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
