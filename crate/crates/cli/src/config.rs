//! Run configuration files: flat `key=value` lines with dotted sections.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use wcrit_core::kv;
use wcrit_core::trainers::RunConfig;

/// Keys every config file must set.
pub const REQUIRED_KEYS: &[&str] = &["env.kind"];

/// Environment variable that overrides the config seed.
pub const SEED_ENV: &str = "WCRIT_SEED";

pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let lines = kv::parse(text)?;
    let mut cfg = RunConfig::default();
    for l in &lines {
        cfg.set(&l.key, &l.value).map_err(|e| anyhow!("line {}: {e}", l.line))?;
    }
    for key in REQUIRED_KEYS {
        if !lines.iter().any(|l| l.key == *key) {
            bail!("missing required key `{key}`");
        }
    }
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in config {}", path.display()))
}

/// Applies one `key=value` assignment.
pub fn apply_set(cfg: &mut RunConfig, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("--set expects key=value, got `{assignment}`"))?;
    cfg.set(key.trim(), value).map_err(|e| anyhow!("--set {assignment}: {e}"))
}

/// Config file (or defaults), then `--set` assignments, then the seed from
/// the environment, then the `--seed` flag.
pub fn load(path: Option<&Path>, sets: &[String], env_seed: Option<&str>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    for s in sets {
        apply_set(&mut cfg, s)?;
    }
    if let Some(v) = env_seed {
        cfg.seed = v.trim().parse().map_err(|_| anyhow!("{SEED_ENV}={v} is not a seed"))?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
