//! Tabular MDPs, fixed policies, offline datasets, and the exact
//! distributional dynamic-programming oracle used as ground truth.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dist1d::{CategoricalDistribution, PROB_TOL};
use crate::error::{config_err, usage, Error, Result};
use crate::kv;

/// Default number of atoms in the oracle's categorical grid.
pub const DEFAULT_SUPPORT_SIZE: usize = 401;

/// Finite-support reward law: `(value, probability)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSupport {
    atoms: Vec<(f64, f64)>,
}

impl RewardSupport {
    pub fn new(atoms: Vec<(f64, f64)>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(config_err!("reward support is empty"));
        }
        if atoms.iter().any(|(r, p)| !r.is_finite() || !(*p >= 0.0)) {
            return Err(config_err!("reward support has a non-finite value or negative probability"));
        }
        let total: f64 = atoms.iter().map(|(_, p)| p).sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(config_err!("reward probabilities sum to {total}, not 1"));
        }
        Ok(Self { atoms })
    }

    pub fn dirac(r: f64) -> Self {
        Self { atoms: vec![(r, 1.0)] }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(r, p)| r * p).sum()
    }

    fn min(&self) -> f64 {
        self.atoms.iter().filter(|a| a.1 > 0.0).map(|a| a.0).fold(f64::INFINITY, f64::min)
    }

    fn max(&self) -> f64 {
        self.atoms.iter().filter(|a| a.1 > 0.0).map(|a| a.0).fold(f64::NEG_INFINITY, f64::max)
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        let probs: Vec<f64> = self.atoms.iter().map(|a| a.1).collect();
        self.atoms[sample_index(&probs, rng)].0
    }
}

/// Finite MDP with stochastic finite-support rewards and absorbing terminals.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// Row-major `(s, a, s')`.
    transition: Vec<f64>,
    /// Row-major `(s, a)`.
    reward: Vec<RewardSupport>,
    terminal: Vec<bool>,
    gamma: f64,
    start: Vec<f64>,
}

/// Incremental construction of a [`TabularMdp`].
///
/// Terminal states are completed automatically with a zero-reward self-loop
/// for every action. Unspecified rewards default to a point mass at zero;
/// the start distribution defaults to state 0.
#[derive(Debug, Clone)]
pub struct MdpBuilder {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Option<Vec<(usize, f64)>>>,
    reward: Vec<Option<RewardSupport>>,
    terminal: Vec<bool>,
    start: Option<Vec<(usize, f64)>>,
}

impl MdpBuilder {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64) -> Self {
        Self {
            n_states,
            n_actions,
            gamma,
            transition: vec![None; n_states * n_actions],
            reward: vec![None; n_states * n_actions],
            terminal: vec![false; n_states],
            start: None,
        }
    }

    pub fn transition(mut self, s: usize, a: usize, next: &[(usize, f64)]) -> Self {
        if s < self.n_states && a < self.n_actions {
            self.transition[s * self.n_actions + a] = Some(next.to_vec());
        }
        self
    }

    pub fn reward(mut self, s: usize, a: usize, support: RewardSupport) -> Self {
        if s < self.n_states && a < self.n_actions {
            self.reward[s * self.n_actions + a] = Some(support);
        }
        self
    }

    pub fn terminal(mut self, s: usize) -> Self {
        if s < self.n_states {
            self.terminal[s] = true;
        }
        self
    }

    pub fn start(mut self, dist: &[(usize, f64)]) -> Self {
        self.start = Some(dist.to_vec());
        self
    }

    pub fn build(self) -> Result<TabularMdp> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(config_err!("MDP needs at least one state and one action"));
        }
        let mut transition = vec![0.0; ns * na * ns];
        let mut reward = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let sa = s * na + a;
                if self.terminal[s] {
                    transition[sa * ns + s] = 1.0;
                    reward.push(RewardSupport::dirac(0.0));
                    continue;
                }
                let row = self.transition[sa]
                    .as_ref()
                    .ok_or_else(|| config_err!("missing transition for state {s}, action {a}"))?;
                for &(next, p) in row {
                    if next >= ns {
                        return Err(config_err!("transition ({s},{a}) targets unknown state {next}"));
                    }
                    transition[sa * ns + next] += p;
                }
                reward.push(self.reward[sa].clone().unwrap_or_else(|| RewardSupport::dirac(0.0)));
            }
        }
        let mut start = vec![0.0; ns];
        match &self.start {
            Some(dist) => {
                for &(s, p) in dist {
                    if s >= ns {
                        return Err(config_err!("start distribution names unknown state {s}"));
                    }
                    start[s] += p;
                }
            }
            None => start[0] = 1.0,
        }
        TabularMdp::new(ns, na, transition, reward, self.terminal, self.gamma, start)
    }
}

impl TabularMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<RewardSupport>,
        terminal: Vec<bool>,
        gamma: f64,
        start: Vec<f64>,
    ) -> Result<Self> {
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || terminal.len() != n_states
            || start.len() != n_states
        {
            return Err(config_err!("MDP tensor shapes do not match {n_states} states x {n_actions} actions"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(config_err!("discount {gamma} must lie in [0, 1)"));
        }
        for (i, row) in transition.chunks(n_states).enumerate() {
            let total: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > PROB_TOL {
                return Err(config_err!(
                    "transition row for state {}, action {} sums to {total}",
                    i / n_actions,
                    i % n_actions
                ));
            }
        }
        for s in (0..n_states).filter(|&s| terminal[s]) {
            for a in 0..n_actions {
                let sa = s * n_actions + a;
                if transition[sa * n_states + s] != 1.0 || reward[sa] != RewardSupport::dirac(0.0) {
                    return Err(config_err!("terminal state {s} must self-loop with reward 0"));
                }
            }
        }
        let total: f64 = start.iter().sum();
        if (total - 1.0).abs() > PROB_TOL || start.iter().any(|&p| !(p >= 0.0)) {
            return Err(config_err!("start distribution sums to {total}"));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            terminal,
            gamma,
            start,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    /// The same dynamics under another discount.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(config_err!("discount {gamma} must lie in [0, 1)"));
        }
        self.gamma = gamma;
        Ok(self)
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn next_probs(&self, s: usize, a: usize) -> &[f64] {
        let off = (s * self.n_actions + a) * self.n_states;
        &self.transition[off..off + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> &RewardSupport {
        &self.reward[s * self.n_actions + a]
    }

    /// Smallest and largest attainable one-step rewards.
    pub fn reward_range(&self) -> (f64, f64) {
        let lo = self.reward.iter().map(RewardSupport::min).fold(f64::INFINITY, f64::min);
        let hi = self.reward.iter().map(RewardSupport::max).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    /// Interval containing every discounted return, including the zero
    /// return of terminal states.
    pub fn return_bounds(&self) -> (f64, f64) {
        let (lo, hi) = self.reward_range();
        let scale = 1.0 / (1.0 - self.gamma);
        (lo.min(0.0) * scale, hi.max(0.0) * scale)
    }

    /// Parses the `key=value` MDP description format.
    ///
    /// ```text
    /// n_states=3
    /// n_actions=1
    /// gamma=0.5
    /// terminal=2
    /// start=0:1
    /// transition.0.0=1:1
    /// reward.0.0=-1:0.5,1:0.5
    /// ```
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let lines = kv::parse(text)?;
        let get = |key: &str| lines.iter().find(|l| l.key == key);
        let num = |key: &str| -> Result<usize> {
            let l = get(key).ok_or_else(|| config_err!("MDP file is missing `{key}`"))?;
            l.value
                .parse()
                .map_err(|_| config_err!("line {}: `{}` is not a count", l.line, l.value))
        };
        let ns = num("n_states")?;
        let na = num("n_actions")?;
        let gamma_line = get("gamma").ok_or_else(|| config_err!("MDP file is missing `gamma`"))?;
        let gamma: f64 = gamma_line
            .value
            .parse()
            .map_err(|_| config_err!("line {}: bad gamma `{}`", gamma_line.line, gamma_line.value))?;
        let mut b = MdpBuilder::new(ns, na, gamma);
        for l in &lines {
            let bad = |why: String| config_err!("line {}: {why}", l.line);
            let parts: Vec<&str> = l.key.split('.').collect();
            match parts.as_slice() {
                ["n_states"] | ["n_actions"] | ["gamma"] => {}
                ["terminal"] => {
                    for item in l.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                        let s: usize = item.parse().map_err(|_| bad(format!("bad state `{item}`")))?;
                        if s >= ns {
                            return Err(bad(format!("terminal state {s} out of range")));
                        }
                        b = b.terminal(s);
                    }
                }
                ["start"] => {
                    let pts = kv::parse_weighted(&l.value).map_err(bad)?;
                    let dist: Vec<(usize, f64)> = pts.iter().map(|&(s, p)| (s as usize, p)).collect();
                    b = b.start(&dist);
                }
                [kind @ ("transition" | "reward"), s, a] => {
                    let s: usize = s.parse().map_err(|_| bad(format!("bad state index `{s}`")))?;
                    let a: usize = a.parse().map_err(|_| bad(format!("bad action index `{a}`")))?;
                    if s >= ns || a >= na {
                        return Err(bad(format!("({s},{a}) out of range")));
                    }
                    let pts = kv::parse_weighted(&l.value).map_err(bad)?;
                    if *kind == "transition" {
                        let row: Vec<(usize, f64)> = pts.iter().map(|&(s, p)| (s as usize, p)).collect();
                        b = b.transition(s, a, &row);
                    } else {
                        b = b.reward(s, a, RewardSupport::new(pts).map_err(|e| bad(e.to_string()))?);
                    }
                }
                _ => return Err(bad(format!("unknown key `{}`", l.key))),
            }
        }
        b.build()
    }

    pub fn from_kv_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }

    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "n_states={}", self.n_states);
        let _ = writeln!(out, "n_actions={}", self.n_actions);
        let _ = writeln!(out, "gamma={}", self.gamma);
        let terminals: Vec<String> = (0..self.n_states)
            .filter(|&s| self.terminal[s])
            .map(|s| s.to_string())
            .collect();
        if !terminals.is_empty() {
            let _ = writeln!(out, "terminal={}", terminals.join(","));
        }
        let start: Vec<(f64, f64)> = self
            .start
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(s, &p)| (s as f64, p))
            .collect();
        let _ = writeln!(out, "start={}", kv::format_weighted(&start));
        for s in (0..self.n_states).filter(|&s| !self.terminal[s]) {
            for a in 0..self.n_actions {
                let row: Vec<(f64, f64)> = self
                    .next_probs(s, a)
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(n, &p)| (n as f64, p))
                    .collect();
                let _ = writeln!(out, "transition.{s}.{a}={}", kv::format_weighted(&row));
                let _ = writeln!(out, "reward.{s}.{a}={}", kv::format_weighted(self.reward(s, a).atoms()));
            }
        }
        out
    }
}

/// Per-state action probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedPolicy {
    probs: Vec<Vec<f64>>,
}

impl FixedPolicy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.is_empty() || row.iter().any(|&p| !(p >= 0.0)) || (total - 1.0).abs() > PROB_TOL {
                return Err(config_err!("policy row for state {s} is not a probability vector"));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![vec![1.0 / n_actions as f64; n_actions]; n_states],
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a.min(n_actions - 1)] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn sample(&self, s: usize, rng: &mut impl Rng) -> usize {
        sample_index(&self.probs[s], rng)
    }

    fn check_shape(&self, mdp: &TabularMdp) -> Result<()> {
        if self.probs.len() != mdp.n_states || self.probs.iter().any(|r| r.len() != mdp.n_actions) {
            return Err(config_err!(
                "policy shape does not match MDP ({} states x {} actions)",
                mdp.n_states,
                mdp.n_actions
            ));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// One logged step `(s, a, r, s', m)`; `mask` is false iff `s_next` is terminal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub mask: bool,
}

impl Transition {
    pub fn mask_value(&self) -> f64 {
        if self.mask {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    transitions: Vec<Transition>,
    behaviour_counts: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(transitions: Vec<Transition>, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut counts = vec![vec![0usize; n_actions]; n_states];
        for t in &transitions {
            if t.s >= n_states || t.s_next >= n_states || t.a >= n_actions {
                return Err(usage!("transition {t:?} is out of range"));
            }
            counts[t.s][t.a] += 1;
        }
        Ok(Self {
            transitions,
            behaviour_counts: counts,
        })
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn behaviour_counts(&self) -> &[Vec<usize>] {
        &self.behaviour_counts
    }

    /// Observed reward extremes.
    pub fn reward_range(&self) -> (f64, f64) {
        self.transitions.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), t| {
            (lo.min(t.r), hi.max(t.r))
        })
    }

    /// State-action pairs that occur in the data, in `(s, a)` order.
    pub fn visited_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (s, row) in self.behaviour_counts.iter().enumerate() {
            for (a, &c) in row.iter().enumerate() {
                if c > 0 {
                    out.push((s, a));
                }
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["s", "a", "r", "s_next", "mask"])?;
        for t in &self.transitions {
            w.write_record([
                t.s.to_string(),
                t.a.to_string(),
                t.r.to_string(),
                t.s_next.to_string(),
                u8::from(t.mask).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path, n_states: usize, n_actions: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let bad = |row: usize, why: &str| Error::Format {
            path: path.to_path_buf(),
            reason: format!("row {row}: {why}"),
        };
        let mut transitions = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            if rec.len() != 5 {
                return Err(bad(i + 1, "expected 5 columns"));
            }
            let idx = |k: usize| rec[k].trim().parse::<usize>().map_err(|_| bad(i + 1, "bad index"));
            transitions.push(Transition {
                s: idx(0)?,
                a: idx(1)?,
                r: rec[2].trim().parse().map_err(|_| bad(i + 1, "bad reward"))?,
                s_next: idx(3)?,
                mask: match rec[4].trim() {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(i + 1, "mask must be 0 or 1")),
                },
            });
        }
        Self::new(transitions, n_states, n_actions)
    }
}

/// Episodic rollouts of `behaviour` until `n` transitions are collected.
///
/// Episodes restart from the start distribution on reaching a terminal state
/// or after `horizon` steps. The result depends only on the arguments.
pub fn generate_dataset(
    mdp: &TabularMdp,
    behaviour: &FixedPolicy,
    n: usize,
    horizon: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || horizon == 0 {
        return Err(usage!("dataset size and horizon must be positive"));
    }
    behaviour.check_shape(mdp)?;
    if (0..mdp.n_states).all(|s| mdp.start[s] == 0.0 || mdp.terminal[s]) {
        return Err(config_err!("every start state is terminal"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = Vec::with_capacity(n);
    while transitions.len() < n {
        let mut s = sample_index(&mdp.start, &mut rng);
        let mut steps = 0;
        while !mdp.terminal[s] && steps < horizon && transitions.len() < n {
            let a = behaviour.sample(s, &mut rng);
            let r = mdp.reward(s, a).sample(&mut rng);
            let s_next = sample_index(mdp.next_probs(s, a), &mut rng);
            transitions.push(Transition {
                s,
                a,
                r,
                s_next,
                mask: !mdp.terminal[s_next],
            });
            s = s_next;
            steps += 1;
        }
    }
    Dataset::new(transitions, mdp.n_states, mdp.n_actions)
}

/// Deterministic left-to-right chain of `n_states` states; the last is
/// terminal.
///
/// `reward_spec` gives the reward law of each of the `n_states - 1` steps, or
/// a single law reused for every step.
pub fn build_chain_mdp(n_states: usize, reward_spec: &[RewardSupport], gamma: f64) -> Result<TabularMdp> {
    if n_states < 2 {
        return Err(config_err!("a chain needs at least 2 states, got {n_states}"));
    }
    let steps = n_states - 1;
    if reward_spec.len() != 1 && reward_spec.len() != steps {
        return Err(config_err!(
            "chain of {n_states} states needs 1 or {steps} reward laws, got {}",
            reward_spec.len()
        ));
    }
    let mut b = MdpBuilder::new(n_states, 1, gamma).terminal(n_states - 1);
    for s in 0..steps {
        let law = if reward_spec.len() == 1 {
            &reward_spec[0]
        } else {
            &reward_spec[s]
        };
        b = b.transition(s, 0, &[(s + 1, 1.0)]).reward(s, 0, law.clone());
    }
    b.build()
}

/// Five-state, two-action chain (state 4 terminal): action 0 pays `-1` and
/// action 1 pays `+1`, both advancing. Under a stochastic policy the return
/// from every state but the last is multimodal.
pub fn bimodal_chain(gamma: f64) -> Result<TabularMdp> {
    let mut b = MdpBuilder::new(5, 2, gamma).terminal(4);
    for s in 0..4 {
        b = b
            .transition(s, 0, &[(s + 1, 1.0)])
            .reward(s, 0, RewardSupport::dirac(-1.0))
            .transition(s, 1, &[(s + 1, 1.0)])
            .reward(s, 1, RewardSupport::dirac(1.0));
    }
    b.build()
}

/// Five-state walk (state 4 terminal) with three actions of mixed quality:
/// `0` advances toward a risky final reward, `1` quits for a small sure
/// reward, `2` stumbles forward half the time at a small expected cost.
pub fn mixed_walk(gamma: f64) -> Result<TabularMdp> {
    let mut b = MdpBuilder::new(5, 3, gamma).terminal(4);
    for s in 0..4 {
        let advance = if s == 3 {
            RewardSupport::new(vec![(1.0, 0.8), (-1.0, 0.2)])?
        } else {
            RewardSupport::dirac(0.0)
        };
        b = b
            .transition(s, 0, &[(s + 1, 1.0)])
            .reward(s, 0, advance)
            .transition(s, 1, &[(4, 1.0)])
            .reward(s, 1, RewardSupport::dirac(0.1))
            .transition(s, 2, &[(s, 0.5), (s + 1, 0.5)])
            .reward(s, 2, RewardSupport::new(vec![(-0.3, 0.5), (0.1, 0.5)])?);
    }
    b.build()
}

/// The data-collection policy paired with [`mixed_walk`].
pub fn mixed_walk_behaviour() -> FixedPolicy {
    FixedPolicy {
        probs: vec![vec![0.4, 0.3, 0.3]; 5],
    }
}

/// Expected-value policy evaluation; returns `Q` row-major over `(s, a)`.
pub fn policy_q_values(mdp: &TabularMdp, policy: &FixedPolicy) -> Result<Vec<f64>> {
    policy.check_shape(mdp)?;
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    for _ in 0..1_000_000 {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    policy.probs[s].iter().zip(&q[s * na..(s + 1) * na]).map(|(p, q)| p * q).sum()
                }
            })
            .collect();
        let mut delta: f64 = 0.0;
        for s in (0..ns).filter(|&s| !mdp.terminal[s]) {
            for a in 0..na {
                let next: f64 = mdp.next_probs(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                let new = mdp.reward(s, a).mean() + mdp.gamma * next;
                delta = delta.max((new - q[s * na + a]).abs());
                q[s * na + a] = new;
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    Ok(q)
}

/// Optimal `Q` by value iteration, row-major over `(s, a)`.
pub fn optimal_q_values(mdp: &TabularMdp) -> Vec<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    for _ in 0..1_000_000 {
        let v: Vec<f64> = (0..ns)
            .map(|s| {
                if mdp.terminal[s] {
                    0.0
                } else {
                    q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let mut delta: f64 = 0.0;
        for s in (0..ns).filter(|&s| !mdp.terminal[s]) {
            for a in 0..na {
                let next: f64 = mdp.next_probs(s, a).iter().zip(&v).map(|(p, v)| p * v).sum();
                let new = mdp.reward(s, a).mean() + mdp.gamma * next;
                delta = delta.max((new - q[s * na + a]).abs());
                q[s * na + a] = new;
            }
        }
        if delta < 1e-15 {
            break;
        }
    }
    q
}

/// Expected discounted return from the start distribution.
pub fn policy_value(mdp: &TabularMdp, policy: &FixedPolicy) -> Result<f64> {
    let q = policy_q_values(mdp, policy)?;
    let na = mdp.n_actions;
    Ok((0..mdp.n_states)
        .filter(|&s| !mdp.terminal[s])
        .map(|s| {
            let v: f64 = policy.probs[s].iter().zip(&q[s * na..(s + 1) * na]).map(|(p, q)| p * q).sum();
            mdp.start[s] * v
        })
        .sum())
}

/// Mean discounted return of `episodes` Monte Carlo rollouts from the start
/// distribution, truncated at `horizon` steps.
pub fn rollout_return(mdp: &TabularMdp, policy: &FixedPolicy, episodes: usize, horizon: usize, seed: u64) -> Result<f64> {
    policy.check_shape(mdp)?;
    if episodes == 0 {
        return Err(usage!("rollout needs at least one episode"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut s = sample_index(&mdp.start, &mut rng);
        let mut discount = 1.0;
        for _ in 0..horizon {
            if mdp.terminal[s] {
                break;
            }
            let a = policy.sample(s, &mut rng);
            total += discount * mdp.reward(s, a).sample(&mut rng);
            s = sample_index(mdp.next_probs(s, a), &mut rng);
            discount *= mdp.gamma;
        }
    }
    Ok(total / episodes as f64)
}

/// Uniform categorical grid used by the distributional DP.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomGrid {
    v_min: f64,
    v_max: f64,
    atoms: Vec<f64>,
}

impl AtomGrid {
    pub fn new(v_min: f64, v_max: f64, size: usize) -> Result<Self> {
        if size < 2 {
            return Err(config_err!("atom grid needs at least 2 atoms, got {size}"));
        }
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(config_err!("atom grid bounds [{v_min}, {v_max}] are invalid"));
        }
        let width = (v_max - v_min) / (size - 1) as f64;
        let mut atoms: Vec<f64> = (0..size).map(|i| v_min + i as f64 * width).collect();
        atoms[size - 1] = v_max;
        Ok(Self { v_min, v_max, atoms })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn width(&self) -> f64 {
        (self.v_max - self.v_min) / (self.atoms.len() - 1) as f64
    }

    /// Adds `mass` at `x`, split between the two neighbouring atoms so the
    /// mean is preserved.
    fn project(&self, x: f64, mass: f64, out: &mut [f64]) {
        let n = self.atoms.len();
        let b = ((x - self.v_min) / self.width()).clamp(0.0, (n - 1) as f64);
        let lo = b.floor() as usize;
        let frac = b - lo as f64;
        if frac <= 0.0 || lo + 1 >= n {
            out[lo] += mass;
        } else {
            out[lo] += mass * (1.0 - frac);
            out[lo + 1] += mass * frac;
        }
    }
}

/// Projected distributional Bellman operator for a fixed policy.
#[derive(Debug, Clone)]
pub struct DistributionalDp<'a> {
    mdp: &'a TabularMdp,
    policy: &'a FixedPolicy,
    grid: AtomGrid,
}

/// Per-(s,a) probability vectors over a shared [`AtomGrid`].
pub type CategoricalTable = Vec<Vec<f64>>;

impl<'a> DistributionalDp<'a> {
    /// Uses the grid `[min(0, r_min), max(0, r_max)] / (1 - gamma)`.
    pub fn new(mdp: &'a TabularMdp, policy: &'a FixedPolicy, support_size: usize) -> Result<Self> {
        let (mut lo, mut hi) = mdp.return_bounds();
        if lo == hi {
            lo -= 1.0;
            hi += 1.0;
        }
        Self::with_grid(mdp, policy, AtomGrid::new(lo, hi, support_size)?)
    }

    pub fn with_grid(mdp: &'a TabularMdp, policy: &'a FixedPolicy, grid: AtomGrid) -> Result<Self> {
        policy.check_shape(mdp)?;
        let (lo, hi) = mdp.return_bounds();
        let slack = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
        if grid.v_min > lo + slack || grid.v_max < hi - slack {
            return Err(config_err!(
                "oracle support [{}, {}] excludes attainable returns in [{lo}, {hi}]",
                grid.v_min,
                grid.v_max
            ));
        }
        Ok(Self { mdp, policy, grid })
    }

    pub fn grid(&self) -> &AtomGrid {
        &self.grid
    }

    /// Every `(s, a)` at a point mass on zero.
    pub fn zero_table(&self) -> CategoricalTable {
        let mut delta = vec![0.0; self.grid.atoms.len()];
        self.grid.project(0.0, 1.0, &mut delta);
        vec![delta; self.mdp.n_states * self.mdp.n_actions]
    }

    /// One application of the projected operator.
    pub fn sweep(&self, table: &CategoricalTable) -> CategoricalTable {
        let mdp = self.mdp;
        let (ns, na) = (mdp.n_states, mdp.n_actions);
        let n_atoms = self.grid.atoms.len();
        let mut out = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let mut row = vec![0.0; n_atoms];
                if mdp.terminal[s] {
                    self.grid.project(0.0, 1.0, &mut row);
                    out.push(row);
                    continue;
                }
                for &(r, pr) in mdp.reward(s, a).atoms() {
                    if pr == 0.0 {
                        continue;
                    }
                    for (s2, &ps) in mdp.next_probs(s, a).iter().enumerate() {
                        let w = pr * ps;
                        if w == 0.0 {
                            continue;
                        }
                        if mdp.terminal[s2] || mdp.gamma == 0.0 {
                            self.grid.project(r, w, &mut row);
                            continue;
                        }
                        for (a2, &pa) in self.policy.probs[s2].iter().enumerate() {
                            if pa == 0.0 {
                                continue;
                            }
                            for (z, &pz) in self.grid.atoms.iter().zip(&table[s2 * na + a2]) {
                                if pz > 0.0 {
                                    self.grid.project(r + mdp.gamma * z, w * pa * pz, &mut row);
                                }
                            }
                        }
                    }
                }
                out.push(row);
            }
        }
        out
    }

    /// Sweeps from the zero table until the largest probability change drops
    /// below `tol` or `max_sweeps` is reached.
    pub fn converge(&self, tol: f64, max_sweeps: usize) -> CategoricalTable {
        let mut table = self.zero_table();
        for _ in 0..max_sweeps {
            let next = self.sweep(&table);
            let delta = table
                .iter()
                .flatten()
                .zip(next.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            table = next;
            if delta < tol {
                break;
            }
        }
        table
    }

    pub fn to_distribution(&self, probs: &[f64]) -> CategoricalDistribution {
        to_categorical(&self.grid, probs)
    }
}

/// Drops zero-mass atoms and renormalizes rounding drift.
fn to_categorical(grid: &AtomGrid, probs: &[f64]) -> CategoricalDistribution {
    let total: f64 = probs.iter().sum();
    let (support, probs): (Vec<f64>, Vec<f64>) = grid
        .atoms
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&x, &p)| (x, p / total))
        .unzip();
    CategoricalDistribution::new(support, probs).expect("projected DP rows are valid distributions")
}

/// Ground-truth return distributions for every `(s, a)`.
#[derive(Debug, Clone)]
pub struct OracleTable {
    n_actions: usize,
    dists: Vec<CategoricalDistribution>,
    atom_width: f64,
}

impl OracleTable {
    pub fn get(&self, s: usize, a: usize) -> Option<&CategoricalDistribution> {
        if a >= self.n_actions {
            return None;
        }
        self.dists.get(s * self.n_actions + a)
    }

    pub fn atom_width(&self) -> f64 {
        self.atom_width
    }

    pub fn len(&self) -> usize {
        self.dists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dists.is_empty()
    }
}

/// Fixed point of the projected distributional Bellman operator.
///
/// Runs at most `sweeps` sweeps, stopping early once successive tables agree
/// to 1e-13.
pub fn oracle_return_distribution(
    mdp: &TabularMdp,
    policy: &FixedPolicy,
    support_size: usize,
    sweeps: usize,
) -> Result<OracleTable> {
    let dp = DistributionalDp::new(mdp, policy, support_size)?;
    Ok(oracle_from_dp(&dp, sweeps))
}

pub fn oracle_from_dp(dp: &DistributionalDp<'_>, sweeps: usize) -> OracleTable {
    let table = dp.converge(1e-13, sweeps);
    OracleTable {
        n_actions: dp.mdp.n_actions,
        dists: table.iter().map(|row| dp.to_distribution(row)).collect(),
        atom_width: dp.grid.width(),
    }
}
