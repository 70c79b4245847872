//! Experiment drivers: fixed-policy distributional evaluation against the
//! DP oracle, offline training with rejection-sampled next actions, and the
//! DP contraction study.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::approx::{Activation, AdamConfig, EmbeddingConfig};
use crate::baselines::{IqnConfig, IqnCritic};
use crate::dist1d::{trimmed_mean, wasserstein_cat, wasserstein_emp, EmpiricalDistribution};
use crate::env::{
    bimodal_chain, build_chain_mdp, generate_dataset, mixed_walk, mixed_walk_behaviour, oracle_return_distribution,
    policy_value, rollout_return, sample_index, Dataset, DistributionalDp, FixedPolicy, OracleTable, RewardSupport,
    TabularMdp, Transition,
};
use crate::error::{config_err, usage, Error, Result};
use crate::flowcritic::{compute_bounds, CouplingMode, FlowCritic, FlowCriticConfig, SourceMap, VelocityNetConfig};
use crate::kv;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticKind {
    FlowIqn,
    /// The FlowIQN pipeline with sources and targets paired at random.
    IndependentCfm,
    Iqn,
}

impl CriticKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::FlowIqn => "flowiqn",
            Self::IndependentCfm => "independent_cfm",
            Self::Iqn => "iqn",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "flowiqn" => Some(Self::FlowIqn),
            "independent_cfm" => Some(Self::IndependentCfm),
            "iqn" => Some(Self::Iqn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    /// Deterministic single-action chain with configurable reward laws.
    Chain,
    BimodalChain,
    MixedWalk,
    /// An MDP read from a key=value file.
    File,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Chain => "chain",
            Self::BimodalChain => "bimodal_chain",
            Self::MixedWalk => "mixed_walk",
            Self::File => "file",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "chain" => Some(Self::Chain),
            "bimodal_chain" => Some(Self::BimodalChain),
            "mixed_walk" => Some(Self::MixedWalk),
            "file" => Some(Self::File),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub path: Option<PathBuf>,
    /// Chain length (chain only).
    pub n_states: usize,
    /// Chain reward laws: `;`-separated, each a number or `x:p,x:p`. One law
    /// is reused for every step.
    pub rewards: String,
    /// `default`, `uniform`, `actions:a0,a1,...` or `probs:p,p;p,p;...`. A
    /// single probability row applies to every state. `default` is the
    /// mixed behaviour policy on the mixed walk and uniform elsewhere.
    pub policy: String,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            kind: EnvKind::BimodalChain,
            path: None,
            n_states: 5,
            rewards: "1".into(),
            policy: "default".into(),
        }
    }
}

fn parse_reward_laws(spec: &str) -> std::result::Result<Vec<RewardSupport>, String> {
    spec.split(';')
        .map(str::trim)
        .map(|law| {
            if law.contains(':') {
                RewardSupport::new(kv::parse_weighted(law)?).map_err(|e| e.to_string())
            } else {
                let r: f64 = law.parse().map_err(|_| format!("bad reward `{law}`"))?;
                Ok(RewardSupport::dirac(r))
            }
        })
        .collect()
}

fn check_policy_syntax(spec: &str) -> std::result::Result<(), String> {
    match spec.split_once(':') {
        None if spec == "default" || spec == "uniform" => Ok(()),
        Some(("actions", list)) => list
            .split(',')
            .map(|a| a.trim().parse::<usize>().map(drop).map_err(|_| format!("bad action `{a}`")))
            .collect(),
        Some(("probs", rows)) => rows
            .split(';')
            .flat_map(|r| r.split(','))
            .map(|p| p.trim().parse::<f64>().map(drop).map_err(|_| format!("bad probability `{p}`")))
            .collect(),
        _ => Err(format!("unknown policy `{spec}`")),
    }
}

fn build_policy(spec: &str, kind: EnvKind, mdp: &TabularMdp) -> Result<FixedPolicy> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    check_policy_syntax(spec).map_err(Error::Config)?;
    match spec.split_once(':') {
        None if spec == "default" && kind == EnvKind::MixedWalk => Ok(mixed_walk_behaviour()),
        None => Ok(FixedPolicy::uniform(ns, na)),
        Some(("actions", list)) => {
            let actions: Vec<usize> = list.split(',').map(|a| a.trim().parse().unwrap()).collect();
            if actions.len() != ns || actions.iter().any(|&a| a >= na) {
                return Err(config_err!("policy needs one action below {na} for each of {ns} states"));
            }
            Ok(FixedPolicy::deterministic(&actions, na))
        }
        Some((_, rows)) => {
            let rows: Vec<Vec<f64>> = rows
                .split(';')
                .map(|r| r.split(',').map(|p| p.trim().parse().unwrap()).collect())
                .collect();
            let rows = if rows.len() == 1 { vec![rows[0].clone(); ns] } else { rows };
            if rows.len() != ns || rows.iter().any(|r| r.len() != na) {
                return Err(config_err!("policy needs {ns} rows of {na} probabilities"));
            }
            FixedPolicy::new(rows)
        }
    }
}

/// Network sizes shared by every critic kind.
#[derive(Debug, Clone, PartialEq)]
pub struct NetSpec {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub cosine_basis: usize,
    pub fourier_dim: usize,
    pub fourier_freqs: usize,
    pub hlgauss_bins: usize,
    /// `None` derives `0.08` times the embedding range width.
    pub hlgauss_sigma: Option<f64>,
    /// `None` derives the range from the source interval and the return
    /// bounds, padded by 10% on each side.
    pub hlgauss_range: Option<(f64, f64)>,
    pub step_embed_dim: usize,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: vec![64],
            activation: Activation::Gelu,
            cosine_basis: 16,
            fourier_dim: 16,
            fourier_freqs: 8,
            hlgauss_bins: 32,
            hlgauss_sigma: None,
            hlgauss_range: None,
            step_embed_dim: 16,
        }
    }
}

const AUTO_SIGMA_RATIO: f64 = 0.08;

impl NetSpec {
    pub fn embedding(&self, sm: &SourceMap) -> EmbeddingConfig {
        let range = self.hlgauss_range.unwrap_or_else(|| {
            let lo = sm.l.min(sm.q_min).min(0.0);
            let hi = sm.u.max(sm.q_max).max(0.0);
            let pad = 0.1 * (hi - lo).max(1e-6);
            (lo - pad, hi + pad)
        });
        EmbeddingConfig {
            cosine_basis: self.cosine_basis,
            fourier_dim: self.fourier_dim,
            fourier_freqs: self.fourier_freqs,
            hlgauss_bins: self.hlgauss_bins,
            hlgauss_sigma: self.hlgauss_sigma.unwrap_or(AUTO_SIGMA_RATIO * (range.1 - range.0)),
            hlgauss_range: range,
            step_embed_dim: self.step_embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub gamma: f64,
    pub seed: u64,
    pub critic: CriticKind,
    /// FlowIQN settings; its discount is taken from [`Self::gamma`].
    pub flow: FlowCriticConfig,
    pub iqn_quantiles: usize,
    pub huber_kappa: f64,
    pub net: NetSpec,
    pub gradient_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub lr: f64,
    /// EMA rate of the target parameters.
    pub rho: f64,
    pub data_size: usize,
    pub data_horizon: usize,
    /// Grid-mode critic samples per evaluated pair.
    pub eval_samples: usize,
    /// Atoms of the oracle's categorical grid.
    pub support_size: usize,
    pub max_pairs: usize,
    pub oracle_sweeps: usize,
    /// Rejection-sampling candidates (offline only).
    pub j: usize,
    /// Monte Carlo episodes for the offline rollout returns.
    pub rollout_episodes: usize,
    /// Metric order of the contraction study.
    pub contraction_p: f64,
    pub contraction_sweeps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            env: EnvSpec::default(),
            gamma: 0.9,
            seed: 0,
            critic: CriticKind::FlowIqn,
            flow: FlowCriticConfig::default(),
            iqn_quantiles: 16,
            huber_kappa: 1.0,
            net: NetSpec::default(),
            gradient_steps: 20_000,
            batch_size: 8,
            eval_every: 1000,
            lr: 1e-3,
            rho: 0.005,
            data_size: 10_000,
            data_horizon: 100,
            eval_samples: 100,
            support_size: 401,
            max_pairs: 256,
            oracle_sweeps: 100_000,
            j: 8,
            rollout_episodes: 2000,
            contraction_p: 2.0,
            contraction_sweeps: 50,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.trim().parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_usize_list(key: &str, value: &str) -> std::result::Result<Vec<usize>, String> {
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every accepted key, in the order [`Self::to_pairs`] emits them.
    pub fn keys() -> Vec<String> {
        Self::default().to_pairs().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let value = value.trim();
        if let Some(ck) = key.strip_prefix("critic.") {
            return match ck {
                "kind" => {
                    self.critic = CriticKind::from_name(value).ok_or_else(|| format!("{key}: unknown critic {value:?}"))?;
                    Ok(())
                }
                "gamma" => Err(format!("unknown key {key:?}; the discount is set by `gamma`")),
                _ => self.flow.set(ck, value).map_err(|e| {
                    if e.starts_with("unknown") {
                        format!("unknown key {key:?}")
                    } else {
                        e
                    }
                }),
            };
        }
        match key {
            "env.kind" => self.env.kind = EnvKind::from_name(value).ok_or_else(|| format!("{key}: unknown environment {value:?}"))?,
            "env.path" => self.env.path = (!value.is_empty()).then(|| PathBuf::from(value)),
            "env.n_states" => self.env.n_states = parse_num(key, value)?,
            "env.rewards" => {
                parse_reward_laws(value).map_err(|e| format!("{key}: {e}"))?;
                self.env.rewards = value.to_string();
            }
            "env.policy" => {
                check_policy_syntax(value).map_err(|e| format!("{key}: {e}"))?;
                self.env.policy = value.to_string();
            }
            "gamma" => self.gamma = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "iqn.n_quantiles" => self.iqn_quantiles = parse_num(key, value)?,
            "iqn.huber_kappa" => self.huber_kappa = parse_num(key, value)?,
            "net.embed_dim" => self.net.embed_dim = parse_num(key, value)?,
            "net.hidden" => self.net.hidden = parse_usize_list(key, value)?,
            "net.activation" => {
                self.net.activation = Activation::from_name(value).ok_or_else(|| format!("{key}: unknown activation {value:?}"))?
            }
            "net.cosine_basis" => self.net.cosine_basis = parse_num(key, value)?,
            "net.fourier_dim" => self.net.fourier_dim = parse_num(key, value)?,
            "net.fourier_freqs" => self.net.fourier_freqs = parse_num(key, value)?,
            "net.hlgauss_bins" => self.net.hlgauss_bins = parse_num(key, value)?,
            "net.hlgauss_sigma" => {
                self.net.hlgauss_sigma = if value == "auto" { None } else { Some(parse_num(key, value)?) }
            }
            "net.hlgauss_range" => {
                self.net.hlgauss_range = if value == "auto" {
                    None
                } else {
                    let (lo, hi) = value.split_once(',').ok_or_else(|| format!("{key}: expected `lo,hi` or `auto`"))?;
                    Some((parse_num(key, lo)?, parse_num(key, hi)?))
                }
            }
            "net.step_embed_dim" => self.net.step_embed_dim = parse_num(key, value)?,
            "train.gradient_steps" => self.gradient_steps = parse_num(key, value)?,
            "train.batch_size" => self.batch_size = parse_num(key, value)?,
            "train.eval_every" => self.eval_every = parse_num(key, value)?,
            "train.lr" => self.lr = parse_num(key, value)?,
            "train.rho" => self.rho = parse_num(key, value)?,
            "data.size" => self.data_size = parse_num(key, value)?,
            "data.horizon" => self.data_horizon = parse_num(key, value)?,
            "eval.n_samples" => self.eval_samples = parse_num(key, value)?,
            "eval.support_size" => self.support_size = parse_num(key, value)?,
            "eval.max_pairs" => self.max_pairs = parse_num(key, value)?,
            "eval.oracle_sweeps" => self.oracle_sweeps = parse_num(key, value)?,
            "offline.J" => self.j = parse_num(key, value)?,
            "offline.episodes" => self.rollout_episodes = parse_num(key, value)?,
            "contraction.p" => self.contraction_p = parse_num(key, value)?,
            "contraction.sweeps" => self.contraction_sweeps = parse_num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("env.kind".into(), self.env.kind.name().into()),
            (
                "env.path".into(),
                self.env.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            ),
            ("env.n_states".into(), self.env.n_states.to_string()),
            ("env.rewards".into(), self.env.rewards.clone()),
            ("env.policy".into(), self.env.policy.clone()),
            ("gamma".into(), self.gamma.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("critic.kind".into(), self.critic.name().into()),
        ];
        out.extend(
            self.flow
                .to_pairs()
                .into_iter()
                .filter(|(k, _)| *k != "gamma")
                .map(|(k, v)| (format!("critic.{k}"), v)),
        );
        let n = &self.net;
        out.extend([
            ("iqn.n_quantiles".into(), self.iqn_quantiles.to_string()),
            ("iqn.huber_kappa".into(), self.huber_kappa.to_string()),
            ("net.embed_dim".into(), n.embed_dim.to_string()),
            ("net.hidden".into(), join(&n.hidden)),
            ("net.activation".into(), n.activation.name().into()),
            ("net.cosine_basis".into(), n.cosine_basis.to_string()),
            ("net.fourier_dim".into(), n.fourier_dim.to_string()),
            ("net.fourier_freqs".into(), n.fourier_freqs.to_string()),
            ("net.hlgauss_bins".into(), n.hlgauss_bins.to_string()),
            (
                "net.hlgauss_sigma".into(),
                n.hlgauss_sigma.map_or_else(|| "auto".into(), |s| s.to_string()),
            ),
            (
                "net.hlgauss_range".into(),
                n.hlgauss_range.map_or_else(|| "auto".into(), |(a, b)| format!("{a},{b}")),
            ),
            ("net.step_embed_dim".into(), n.step_embed_dim.to_string()),
            ("train.gradient_steps".into(), self.gradient_steps.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.eval_every".into(), self.eval_every.to_string()),
            ("train.lr".into(), self.lr.to_string()),
            ("train.rho".into(), self.rho.to_string()),
            ("data.size".into(), self.data_size.to_string()),
            ("data.horizon".into(), self.data_horizon.to_string()),
            ("eval.n_samples".into(), self.eval_samples.to_string()),
            ("eval.support_size".into(), self.support_size.to_string()),
            ("eval.max_pairs".into(), self.max_pairs.to_string()),
            ("eval.oracle_sweeps".into(), self.oracle_sweeps.to_string()),
            ("offline.J".into(), self.j.to_string()),
            ("offline.episodes".into(), self.rollout_episodes.to_string()),
            ("contraction.p".into(), self.contraction_p.to_string()),
            ("contraction.sweeps".into(), self.contraction_sweeps.to_string()),
        ]);
        out
    }

    /// The config as `key=value` lines, readable back through [`Self::set`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// The FlowIQN settings with the run's discount, and independent
    /// pairing for the CFM baseline.
    pub fn flow_config(&self) -> FlowCriticConfig {
        let mut f = self.flow.clone();
        f.gamma = self.gamma;
        if self.critic == CriticKind::IndependentCfm {
            f.coupling_mode = CouplingMode::Independent;
        }
        f
    }

    pub fn iqn_config(&self) -> IqnConfig {
        IqnConfig {
            n_quantiles: self.iqn_quantiles,
            huber_kappa: self.huber_kappa,
            embed_dim: self.net.embed_dim,
            hidden: self.net.hidden.clone(),
            cosine_basis: self.net.cosine_basis,
            activation: self.net.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_samples == 0 || self.max_pairs == 0 {
            return Err(config_err!("batch size, eval interval, eval samples and max pairs must be at least 1"));
        }
        if self.data_size == 0 || self.data_horizon == 0 || self.j == 0 || self.rollout_episodes == 0 {
            return Err(config_err!("data size, horizon, J and rollout episodes must be at least 1"));
        }
        if !(self.contraction_p >= 1.0) {
            return Err(config_err!("contraction.p must be at least 1"));
        }
        if self.support_size < 2 || self.oracle_sweeps == 0 {
            return Err(config_err!("oracle needs at least 2 atoms and 1 sweep"));
        }
        if !(self.lr > 0.0) || !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(config_err!("learning rate must be positive and rho must lie in (0, 1]"));
        }
        if self.env.kind == EnvKind::File && self.env.path.is_none() {
            return Err(config_err!("env.kind=file needs env.path"));
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(config_err!("net.hidden needs at least one positive width"));
        }
        self.flow_config().validate()?;
        if self.critic == CriticKind::Iqn {
            self.iqn_config().validate()?;
        }
        Ok(())
    }

    /// The configured MDP (with the run's discount) and fixed or behaviour
    /// policy.
    pub fn build_env(&self) -> Result<(TabularMdp, FixedPolicy)> {
        let mdp = match self.env.kind {
            EnvKind::Chain => {
                let laws = parse_reward_laws(&self.env.rewards).map_err(Error::Config)?;
                build_chain_mdp(self.env.n_states, &laws, self.gamma)?
            }
            EnvKind::BimodalChain => bimodal_chain(self.gamma)?,
            EnvKind::MixedWalk => mixed_walk(self.gamma)?,
            EnvKind::File => {
                let path = self.env.path.as_ref().ok_or_else(|| config_err!("env.kind=file needs env.path"))?;
                TabularMdp::from_kv_file(path)?.with_gamma(self.gamma)?
            }
        };
        let policy = build_policy(&self.env.policy, self.env.kind, &mdp)?;
        Ok((mdp, policy))
    }
}

/// Derives the seed of run `index` of a multi-seed sweep (SplitMix64).
pub fn split_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_w2: f64,
    pub iqm_neg_w2: f64,
    pub sup_w2: f64,
    /// Mean training loss since the previous record.
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTrace {
    pub records: Vec<MetricsRecord>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
    pub diagnostics: Vec<String>,
}

pub const CSV_HEADER: [&str; 5] = ["step", "mean_w2", "iqm_neg_w2", "sup_w2", "loss"];

impl MetricsTrace {
    pub fn push(&mut self, record: MetricsRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(usage!("metric steps must increase ({} after {})", record.step, last.step));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.step.to_string(),
                r.mean_w2.to_string(),
                r.iqm_neg_w2.to_string(),
                r.sup_w2.to_string(),
                r.loss.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| usage!("csv buffer: {e}"))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// One `eval` record per evaluation, then any diagnostics and the abort
    /// reason.
    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let v = json!({
                "event": "eval",
                "step": r.step,
                "mean_w2": r.mean_w2,
                "iqm_neg_w2": r.iqm_neg_w2,
                "sup_w2": r.sup_w2,
                "loss": r.loss,
            });
            let _ = writeln!(out, "{v}");
        }
        for d in &self.diagnostics {
            let _ = writeln!(out, "{}", json!({ "event": "diagnostic", "message": d }));
        }
        if let Some(a) = &self.aborted {
            let _ = writeln!(out, "{}", json!({ "event": "abort", "reason": a }));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl_string()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct W2Report {
    pub pairs: Vec<(usize, usize)>,
    pub per_pair: Vec<f64>,
    pub mean: f64,
    pub sup: f64,
    /// IQM of the negated distances; below four pairs nothing is trimmed.
    pub iqm_neg: f64,
}

/// `W_2` between `n_samples` critic samples and the atomized oracle, per
/// pair, with aggregates.
pub fn evaluate_w2<F>(mut sampler: F, oracle: &OracleTable, pairs: &[(usize, usize)], n_samples: usize) -> Result<W2Report>
where
    F: FnMut(usize, usize, usize) -> Result<EmpiricalDistribution>,
{
    if pairs.is_empty() || n_samples == 0 {
        return Err(usage!("evaluation needs pairs and samples"));
    }
    let mut per_pair = Vec::with_capacity(pairs.len());
    for &(s, a) in pairs {
        let truth = oracle.get(s, a).ok_or_else(|| usage!("oracle has no entry for ({s},{a})"))?;
        let mut model = sampler(s, a, n_samples)?;
        if model.len() != n_samples {
            model = model.resample(n_samples);
        }
        per_pair.push(wasserstein_emp(&model, &truth.atomize(n_samples), 2.0)?);
    }
    let neg: Vec<f64> = per_pair.iter().map(|d| -d).collect();
    Ok(W2Report {
        pairs: pairs.to_vec(),
        mean: per_pair.iter().sum::<f64>() / per_pair.len() as f64,
        sup: per_pair.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        iqm_neg: trimmed_mean(&neg),
        per_pair,
    })
}

/// A trainable critic of any configured kind.
pub enum Critic {
    Flow(Box<FlowCritic>),
    Iqn(Box<IqnCritic>),
}

impl Critic {
    /// Builds the configured critic; FlowIQN bounds come from the dataset's
    /// reward range.
    pub fn build(cfg: &RunConfig, mdp: &TabularMdp, reward_range: (f64, f64), rng: &mut impl Rng) -> Result<Self> {
        let adam = AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        };
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        match cfg.critic {
            CriticKind::Iqn => Ok(Self::Iqn(Box::new(IqnCritic::new(
                ns,
                na,
                cfg.iqn_config(),
                cfg.gamma,
                cfg.flow.k_grid,
                adam,
                cfg.rho,
                rng,
            )?))),
            CriticKind::FlowIqn | CriticKind::IndependentCfm => {
                let flow = cfg.flow_config();
                let sm = compute_bounds(reward_range.0, reward_range.1, flow.gamma, flow.kappa)?;
                let net_cfg = VelocityNetConfig {
                    n_states: ns,
                    n_actions: na,
                    embed: cfg.net.embedding(&sm),
                    embed_dim: cfg.net.embed_dim,
                    hidden: cfg.net.hidden.clone(),
                    activation: cfg.net.activation,
                    shortcut: flow.shortcut_enabled,
                };
                Ok(Self::Flow(Box::new(FlowCritic::new(flow, net_cfg, sm, adam, cfg.rho, rng)?)))
            }
        }
    }

    /// Bootstrap samples drawn per transition, each with its own next action.
    pub fn target_samples(&self) -> usize {
        match self {
            Self::Flow(c) => c.cfg.k,
            Self::Iqn(c) => c.cfg.n_quantiles,
        }
    }

    pub fn update(&mut self, transitions: &[Transition], next_actions: &[Vec<usize>], rng: &mut impl Rng) -> Result<f64> {
        match self {
            Self::Flow(c) => c.update(transitions, next_actions, rng),
            Self::Iqn(c) => c.update(transitions, next_actions, rng),
        }
    }

    pub fn values(&self, pairs: &[(usize, usize)], use_target: bool) -> Result<Vec<f64>> {
        match self {
            Self::Flow(c) => c.values(pairs, use_target),
            Self::Iqn(c) => c.values(pairs, use_target),
        }
    }

    pub fn sample(&self, s: usize, a: usize, n: usize) -> Result<EmpiricalDistribution> {
        match self {
            Self::Flow(c) => c.sample(s, a, n),
            Self::Iqn(c) => c.sample(s, a, n),
        }
    }
}

fn eval_pairs(data: &Dataset, max_pairs: usize) -> Vec<(usize, usize)> {
    let mut pairs = data.visited_pairs();
    pairs.truncate(max_pairs);
    pairs
}

fn sample_batch(data: &Dataset, n: usize, rng: &mut impl Rng) -> Vec<Transition> {
    let all = data.transitions();
    (0..n).map(|_| all[rng.random_range(0..all.len())]).collect()
}

/// Runs the shared minibatch loop, evaluating at step 0, every
/// `eval_every` steps and at the final step. A non-finite loss or metric
/// ends the run with an abort record instead of an error.
fn training_loop<N, E>(cfg: &RunConfig, critic: &mut Critic, rng: &mut ChaCha8Rng, data: &Dataset, mut next_actions: N, mut eval: E) -> Result<MetricsTrace>
where
    N: FnMut(&Critic, &[Transition], &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>>,
    E: FnMut(&Critic) -> Result<W2Report>,
{
    let mut trace = MetricsTrace::default();
    let record = |trace: &mut MetricsTrace, critic: &Critic, step: usize, loss: Option<f64>, eval: &mut E| -> Result<bool> {
        let rep = eval(critic)?;
        trace.push(MetricsRecord {
            step,
            mean_w2: rep.mean,
            iqm_neg_w2: rep.iqm_neg,
            sup_w2: rep.sup,
            loss,
        })?;
        if !(rep.mean.is_finite() && rep.sup.is_finite()) {
            trace.aborted = Some(format!("non-finite W2 at step {step}"));
            return Ok(false);
        }
        Ok(true)
    };
    if !record(&mut trace, critic, 0, None, &mut eval)? {
        return Ok(trace);
    }
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for step in 1..=cfg.gradient_steps {
        let batch = sample_batch(data, cfg.batch_size, rng);
        let next = next_actions(critic, &batch, rng)?;
        match critic.update(&batch, &next, rng) {
            Ok(l) => {
                loss_sum += l;
                loss_n += 1;
            }
            Err(Error::Numeric { what, .. }) => {
                trace.aborted = Some(format!("step {step}: {what}"));
                return Ok(trace);
            }
            Err(e) => return Err(e),
        }
        if step % cfg.eval_every == 0 || step == cfg.gradient_steps {
            let loss = Some(loss_sum / loss_n as f64);
            (loss_sum, loss_n) = (0.0, 0);
            if !record(&mut trace, critic, step, loss, &mut eval)? {
                return Ok(trace);
            }
        }
    }
    Ok(trace)
}

/// Distributional evaluation of the configured fixed policy: every
/// bootstrap sample draws its own next action from the policy, and the critic
/// is scored against the DP oracle on visited pairs.
pub fn train_fixed_policy(cfg: &RunConfig) -> Result<MetricsTrace> {
    cfg.validate()?;
    let (mdp, policy) = cfg.build_env()?;
    let data = generate_dataset(&mdp, &policy, cfg.data_size, cfg.data_horizon, cfg.seed)?;
    let oracle = oracle_return_distribution(&mdp, &policy, cfg.support_size, cfg.oracle_sweeps)?;
    let pairs = eval_pairs(&data, cfg.max_pairs);
    let mut critic = Critic::build(cfg, &mdp, data.reward_range(), &mut stream(cfg.seed, 1))?;
    let mut rng = stream(cfg.seed, 2);
    training_loop(
        cfg,
        &mut critic,
        &mut rng,
        &data,
        |c, batch, rng| {
            let k = c.target_samples();
            Ok(batch
                .iter()
                .map(|tr| {
                    if tr.mask {
                        (0..k).map(|_| policy.sample(tr.s_next, rng)).collect()
                    } else {
                        vec![0]
                    }
                })
                .collect())
        },
        |c| evaluate_w2(|s, a, n| c.sample(s, a, n), &oracle, &pairs, cfg.eval_samples),
    )
}

/// `j` draws from the empirical action distribution `counts`; uniform when
/// the state has no data (second value `true`).
pub fn draw_candidates(counts: &[usize], j: usize, rng: &mut impl Rng) -> (Vec<usize>, bool) {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return ((0..j).map(|_| rng.random_range(0..counts.len())).collect(), true);
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    ((0..j).map(|_| sample_index(&probs, rng)).collect(), false)
}

/// Picks, for each state, the highest-scoring candidate in draw order;
/// ties go to the earliest candidate.
fn pick(states: &[usize], candidates: &[Vec<usize>], scores: &BTreeMap<(usize, usize), f64>) -> Vec<usize> {
    states
        .iter()
        .zip(candidates)
        .map(|(&s, cands)| {
            let mut best = cands[0];
            for &a in &cands[1..] {
                if scores[&(s, a)] > scores[&(s, best)] {
                    best = a;
                }
            }
            best
        })
        .collect()
}

fn score_candidates<F>(states: &[usize], candidates: &[Vec<usize>], scorer: &mut F) -> Result<Vec<usize>>
where
    F: FnMut(&[(usize, usize)]) -> Result<Vec<f64>>,
{
    let mut keys: Vec<(usize, usize)> = states
        .iter()
        .zip(candidates)
        .flat_map(|(&s, c)| c.iter().map(move |&a| (s, a)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let vals = scorer(&keys)?;
    let scores: BTreeMap<_, _> = keys.into_iter().zip(vals).collect();
    Ok(pick(states, candidates, &scores))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// One action per state; terminal states get action 0.
    pub actions: Vec<usize>,
    /// Non-terminal states without behaviour data, which drew uniformly.
    pub fallback_states: Vec<usize>,
}

/// Rejection-sampling extraction: for each non-terminal state, `j`
/// behaviour-sampled candidates ranked by `scorer`.
pub fn extract_policy<F>(mdp: &TabularMdp, counts: &[Vec<usize>], j: usize, mut scorer: F, rng: &mut impl Rng) -> Result<Extraction>
where
    F: FnMut(&[(usize, usize)]) -> Result<Vec<f64>>,
{
    if j == 0 || counts.len() != mdp.n_states() {
        return Err(usage!("extraction needs J >= 1 and counts for every state"));
    }
    let states: Vec<usize> = (0..mdp.n_states()).filter(|&s| !mdp.is_terminal(s)).collect();
    let mut fallback_states = Vec::new();
    let candidates: Vec<Vec<usize>> = states
        .iter()
        .map(|&s| {
            let (c, fb) = draw_candidates(&counts[s], j, rng);
            if fb {
                fallback_states.push(s);
            }
            c
        })
        .collect();
    let chosen = score_candidates(&states, &candidates, &mut scorer)?;
    let mut actions = vec![0; mdp.n_states()];
    for (&s, a) in states.iter().zip(chosen) {
        actions[s] = a;
    }
    Ok(Extraction { actions, fallback_states })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineReport {
    pub trace: MetricsTrace,
    /// The final extraction policy, one action per state.
    pub policy: Vec<usize>,
    pub fallback_states: Vec<usize>,
    /// Extracted actions with zero behaviour count at a state that has data.
    pub zero_support_selections: usize,
    /// Exact discounted values from the start distribution.
    pub extraction_value: f64,
    pub behaviour_value: f64,
    /// Monte Carlo estimates of the same values.
    pub extraction_rollout: f64,
    pub behaviour_rollout: f64,
}

/// Offline training with rejection-sampled bootstrap actions: `J`
/// behaviour-sampled candidates at `s'`, ranked by the scalarized target
/// critic. Evaluations extract a policy with the online critic and score the
/// critic against that policy's oracle.
pub fn train_offline_rejection(cfg: &RunConfig) -> Result<OfflineReport> {
    cfg.validate()?;
    let (mdp, behaviour) = cfg.build_env()?;
    let data = generate_dataset(&mdp, &behaviour, cfg.data_size, cfg.data_horizon, cfg.seed)?;
    let counts = data.behaviour_counts().to_vec();
    let pairs = eval_pairs(&data, cfg.max_pairs);
    let mut critic = Critic::build(cfg, &mdp, data.reward_range(), &mut stream(cfg.seed, 1))?;
    let mut rng = stream(cfg.seed, 2);
    let mut eval_rng = stream(cfg.seed, 3);
    let mut bootstrap_fallbacks = std::collections::BTreeSet::new();
    let mut trace = training_loop(
        cfg,
        &mut critic,
        &mut rng,
        &data,
        |c, batch, rng| {
            let live: Vec<usize> = batch.iter().filter(|t| t.mask).map(|t| t.s_next).collect();
            let candidates: Vec<Vec<usize>> = live
                .iter()
                .map(|&s| {
                    let (cands, fb) = draw_candidates(&counts[s], cfg.j, rng);
                    if fb {
                        bootstrap_fallbacks.insert(s);
                    }
                    cands
                })
                .collect();
            let chosen = score_candidates(&live, &candidates, &mut |p: &[(usize, usize)]| c.values(p, true))?;
            let mut chosen = chosen.into_iter();
            Ok(batch
                .iter()
                .map(|t| vec![if t.mask { chosen.next().unwrap() } else { 0 }])
                .collect())
        },
        |c| {
            let ext = extract_policy(&mdp, &counts, cfg.j, |p| c.values(p, false), &mut eval_rng)?;
            let pol = FixedPolicy::deterministic(&ext.actions, mdp.n_actions());
            let oracle = oracle_return_distribution(&mdp, &pol, cfg.support_size, cfg.oracle_sweeps)?;
            evaluate_w2(|s, a, n| c.sample(s, a, n), &oracle, &pairs, cfg.eval_samples)
        },
    )?;
    let ext = extract_policy(&mdp, &counts, cfg.j, |p| critic.values(p, false), &mut eval_rng)?;
    for s in &ext.fallback_states {
        trace.diagnostics.push(format!("state {s} has no behaviour data; extraction drew uniformly"));
    }
    for s in bootstrap_fallbacks.iter().filter(|s| !ext.fallback_states.contains(s)) {
        trace
            .diagnostics
            .push(format!("state {s} has no behaviour data; bootstrap candidates drew uniformly"));
    }
    let zero_support_selections = (0..mdp.n_states())
        .filter(|&s| !mdp.is_terminal(s) && counts[s].iter().sum::<usize>() > 0 && counts[s][ext.actions[s]] == 0)
        .count();
    let pol = FixedPolicy::deterministic(&ext.actions, mdp.n_actions());
    let rollout_seed = split_seed(cfg.seed, 4);
    Ok(OfflineReport {
        extraction_value: policy_value(&mdp, &pol)?,
        behaviour_value: policy_value(&mdp, &behaviour)?,
        extraction_rollout: rollout_return(&mdp, &pol, cfg.rollout_episodes, cfg.data_horizon, rollout_seed)?,
        behaviour_rollout: rollout_return(&mdp, &behaviour, cfg.rollout_episodes, cfg.data_horizon, rollout_seed)?,
        policy: ext.actions,
        fallback_states: ext.fallback_states,
        zero_support_selections,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub gamma: f64,
    pub atom_width: f64,
    /// `d_k`, the sup over pairs of `W_p` between the table after `k`
    /// sweeps from `delta_0` and the converged table; `d_0` first.
    pub distances: Vec<f64>,
    /// `d_{k+1} / d_k`, or 0 where `d_k` is 0.
    pub ratios: Vec<f64>,
}

impl ContractionReport {
    /// Sweeps `k >= 1` with `d_{k+1} > gamma d_k + 2 atom_width`.
    pub fn violations(&self) -> Vec<usize> {
        (1..self.distances.len().saturating_sub(1))
            .filter(|&k| self.distances[k + 1] > self.gamma * self.distances[k] + 2.0 * self.atom_width)
            .collect()
    }

    pub fn bound_holds(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Sweeps allowed when locating the DP fixed point.
pub const FIXED_POINT_SWEEPS: usize = 200_000;

/// Runs the categorical DP from `Z = delta_0` for `sweeps` sweeps and records
/// the sup-`W_p` distance to the converged fixed point after each.
pub fn contraction_study(mdp: &TabularMdp, policy: &FixedPolicy, p: f64, sweeps: usize, support_size: usize) -> Result<ContractionReport> {
    if !(p >= 1.0) {
        return Err(usage!("metric order {p} must be at least 1"));
    }
    let dp = DistributionalDp::new(mdp, policy, support_size)?;
    let fixed: Vec<_> = dp
        .converge(1e-13, FIXED_POINT_SWEEPS)
        .iter()
        .map(|row| dp.to_distribution(row))
        .collect();
    let sup_distance = |table: &crate::env::CategoricalTable| -> Result<f64> {
        let mut d: f64 = 0.0;
        for (row, fp) in table.iter().zip(&fixed) {
            d = d.max(wasserstein_cat(&dp.to_distribution(row), fp, p)?);
        }
        Ok(d)
    };
    let mut table = dp.zero_table();
    let mut distances = vec![sup_distance(&table)?];
    for _ in 0..sweeps {
        table = dp.sweep(&table);
        distances.push(sup_distance(&table)?);
    }
    let ratios = distances
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    Ok(ContractionReport {
        gamma: mdp.gamma(),
        atom_width: dp.grid().width(),
        distances,
        ratios,
    })
}
