use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::approx::{read_checkpoint, write_checkpoint, AdamConfig, AdamState, NetParams, TargetParams};
use crate::dist1d::{midpoint_grid, EmpiricalDistribution};
use crate::env::Transition;
use crate::error::{usage, Error, Result};

use super::coupling::{bellman_targets, couple_batch, CoupledBatch, TargetSamples};
use super::loss::combined_loss;
use super::net::{FlowPoint, VelocityModel, VelocityNet, VelocityNetConfig};
use super::schedule::{update_schedule, TimeSchedule};
use super::source::SourceMap;
use super::{EnsembleAgg, FlowCriticConfig, SampleMode, ScheduleMode};

/// Integrates one trajectory from `g(tau)` over the schedule.
pub fn integrate(
    model: &impl VelocityModel,
    s: usize,
    a: usize,
    tau: f64,
    sm: &SourceMap,
    schedule: &TimeSchedule,
) -> Result<f64> {
    Ok(model.integrate(&[FlowPoint { s, a, tau }], &[sm.apply(tau)], schedule.knots())?[0])
}

pub fn integrate_many(
    model: &impl VelocityModel,
    points: &[FlowPoint],
    sm: &SourceMap,
    schedule: &TimeSchedule,
) -> Result<Vec<f64>> {
    let z0: Vec<f64> = points.iter().map(|p| sm.apply(p.tau)).collect();
    model.integrate(points, &z0, schedule.knots())
}

/// Mean of the integrated returns at the `(k - 0.5)/K` fractions.
pub fn scalarize(
    model: &impl VelocityModel,
    s: usize,
    a: usize,
    k_grid: usize,
    sm: &SourceMap,
    schedule: &TimeSchedule,
) -> Result<f64> {
    Ok(scalarize_many(model, &[(s, a)], k_grid, sm, schedule)?[0])
}

pub fn scalarize_many(
    model: &impl VelocityModel,
    pairs: &[(usize, usize)],
    k_grid: usize,
    sm: &SourceMap,
    schedule: &TimeSchedule,
) -> Result<Vec<f64>> {
    if k_grid == 0 {
        return Err(usage!("scalarization grid needs at least one fraction"));
    }
    let points: Vec<FlowPoint> = pairs
        .iter()
        .flat_map(|&(s, a)| midpoint_grid(k_grid).map(move |tau| FlowPoint { s, a, tau }))
        .collect();
    let z = integrate_many(model, &points, sm, schedule)?;
    Ok(z.chunks(k_grid).map(|c| c.iter().sum::<f64>() / k_grid as f64).collect())
}

/// Pushes `n` fractions (uniform draws or the midpoint grid) through the
/// flow.
#[allow(clippy::too_many_arguments)]
pub fn sample_return_distribution(
    model: &impl VelocityModel,
    s: usize,
    a: usize,
    n: usize,
    sm: &SourceMap,
    schedule: &TimeSchedule,
    mode: SampleMode,
    rng: &mut impl Rng,
) -> Result<EmpiricalDistribution> {
    if n == 0 {
        return Err(usage!("need at least one return sample"));
    }
    let taus: Vec<f64> = match mode {
        SampleMode::Grid => midpoint_grid(n).collect(),
        SampleMode::Random => (0..n).map(|_| rng.random()).collect(),
    };
    let points: Vec<FlowPoint> = taus.into_iter().map(|tau| FlowPoint { s, a, tau }).collect();
    EmpiricalDistribution::new(integrate_many(model, &points, sm, schedule)?)
}

/// Online velocity network plus its slowly tracking target copy.
#[derive(Debug, Clone)]
pub struct VelocityField {
    pub online: VelocityNet,
    target: TargetParams<VelocityNet>,
}

impl VelocityField {
    pub fn new(online: VelocityNet, rho: f64) -> Result<Self> {
        let target = TargetParams::new(&online, rho)?;
        Ok(Self { online, target })
    }

    pub fn net(&self, use_target: bool) -> &VelocityNet {
        if use_target {
            self.target.params()
        } else {
            &self.online
        }
    }

    pub fn target(&self) -> &VelocityNet {
        self.target.params()
    }

    pub fn ema_update(&mut self) -> Result<()> {
        self.target.ema_update(&self.online)
    }
}

#[derive(Debug, Clone)]
struct Member {
    field: VelocityField,
    adam: AdamState,
    schedule: TimeSchedule,
}

/// A trainable FlowIQN critic: one or more ensemble members sharing a
/// source map, each with its own field, optimizer and schedule.
#[derive(Debug, Clone)]
pub struct FlowCritic {
    pub cfg: FlowCriticConfig,
    pub sm: SourceMap,
    net_cfg: VelocityNetConfig,
    members: Vec<Member>,
    steps: u64,
}

impl FlowCritic {
    pub fn new(
        cfg: FlowCriticConfig,
        net_cfg: VelocityNetConfig,
        sm: SourceMap,
        adam: AdamConfig,
        rho: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.shortcut_enabled != net_cfg.shortcut {
            return Err(usage!("shortcut flag differs between critic and net configs"));
        }
        let mut members = Vec::with_capacity(cfg.ensemble_size);
        for _ in 0..cfg.ensemble_size {
            let net = VelocityNet::new(net_cfg.clone(), rng)?;
            members.push(Member {
                adam: AdamState::new(&net, adam.clone()),
                field: VelocityField::new(net, rho)?,
                schedule: cfg.initial_schedule()?,
            });
        }
        Ok(Self {
            cfg,
            sm,
            net_cfg,
            members,
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    pub fn field(&self, member: usize) -> &VelocityField {
        &self.members[member].field
    }

    pub fn schedule(&self, member: usize) -> &TimeSchedule {
        &self.members[member].schedule
    }

    /// One gradient step per member on the same transitions: bootstrap
    /// targets from the target field, couple, regress, Adam, EMA. Adaptive
    /// schedules are refreshed every `sched_every` steps using the batch's
    /// state-action pairs as probes. Returns the mean member loss.
    pub fn update(&mut self, transitions: &[Transition], next_actions: &[Vec<usize>], rng: &mut impl Rng) -> Result<f64> {
        if transitions.is_empty() {
            return Err(usage!("update needs at least one transition"));
        }
        let pairs: Vec<(usize, usize)> = transitions.iter().map(|tr| (tr.s, tr.a)).collect();
        self.step_members(&pairs, rng, |m, sm, cfg, rng| {
            bellman_targets(transitions, next_actions, m.field.target(), sm, &m.schedule, cfg, rng)
        })
    }

    /// One gradient step per member towards externally supplied samples,
    /// one [`TargetSamples`] per pair; no bootstrapping.
    pub fn fit_samples(&mut self, pairs: &[(usize, usize)], samples: &[TargetSamples], rng: &mut impl Rng) -> Result<f64> {
        if pairs.is_empty() || pairs.len() != samples.len() {
            return Err(usage!("need one target set per pair, got {} pairs and {} sets", pairs.len(), samples.len()));
        }
        self.step_members(pairs, rng, |_, _, _, _| Ok(samples.to_vec()))
    }

    fn step_members<R: Rng>(
        &mut self,
        pairs: &[(usize, usize)],
        rng: &mut R,
        mut targets: impl FnMut(&Member, &SourceMap, &FlowCriticConfig, &mut R) -> Result<Vec<TargetSamples>>,
    ) -> Result<f64> {
        let step = self.steps as usize;
        let mut total = 0.0;
        for m in &mut self.members {
            let samples = targets(m, &self.sm, &self.cfg, rng)?;
            let batch: CoupledBatch = pairs
                .iter()
                .zip(&samples)
                .map(|(&(s, a), ts)| couple_batch(s, a, &ts.tau_prime, &ts.y, &self.sm, &self.cfg, rng))
                .collect::<Result<_>>()?;
            let (loss, grads) = combined_loss(&batch, &m.field.online, m.field.target(), &self.cfg, rng)?;
            if !loss.is_finite() {
                return Err(Error::Numeric {
                    step,
                    what: format!("critic loss is {loss}"),
                });
            }
            m.adam.step(&mut m.field.online, &grads)?;
            m.field.ema_update()?;
            total += loss;
        }
        self.steps += 1;
        if self.cfg.schedule_mode == ScheduleMode::Adaptive && self.steps % self.cfg.sched_every as u64 == 0 {
            let probes: Vec<FlowPoint> = pairs
                .iter()
                .flat_map(|&(s, a)| midpoint_grid(4).map(move |tau| FlowPoint { s, a, tau }))
                .collect();
            self.refresh_schedules(&probes)?;
        }
        Ok(total / self.members.len() as f64)
    }

    pub fn refresh_schedules(&mut self, probes: &[FlowPoint]) -> Result<()> {
        for m in &mut self.members {
            m.schedule = update_schedule(&m.field.online, probes, &self.sm, &m.schedule, self.cfg.m)?;
        }
        Ok(())
    }

    fn aggregate(&self, per_member: Vec<Vec<f64>>) -> Vec<f64> {
        let n = per_member[0].len();
        (0..n)
            .map(|i| {
                let vals = per_member.iter().map(|v| v[i]);
                match self.cfg.ensemble_agg {
                    EnsembleAgg::Mean => vals.sum::<f64>() / per_member.len() as f64,
                    EnsembleAgg::Min => vals.fold(f64::INFINITY, f64::min),
                }
            })
            .collect()
    }

    /// Ensemble-aggregated scalar values of the pairs.
    pub fn values(&self, pairs: &[(usize, usize)], use_target: bool) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let per = self
            .members
            .iter()
            .map(|m| scalarize_many(m.field.net(use_target), pairs, self.cfg.k_grid, &self.sm, &m.schedule))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.aggregate(per))
    }

    /// Grid-mode return samples of the online fields; with several members
    /// the pooled samples are re-gridded to `n`.
    pub fn sample(&self, s: usize, a: usize, n: usize) -> Result<EmpiricalDistribution> {
        let points: Vec<FlowPoint> = midpoint_grid(n).map(|tau| FlowPoint { s, a, tau }).collect();
        if points.is_empty() {
            return Err(usage!("need at least one return sample"));
        }
        let mut pooled = Vec::with_capacity(n * self.members.len());
        for m in &self.members {
            pooled.extend(integrate_many(&m.field.online, &points, &self.sm, &m.schedule)?);
        }
        Ok(EmpiricalDistribution::new(pooled)?.resample(n))
    }

    /// Writes every member's online and target sub-networks to `path` and a
    /// key=value sidecar with the critic settings and schedule knots.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut nets: Vec<&NetParams> = Vec::new();
        for m in &self.members {
            nets.extend(m.field.online.subnets());
            nets.extend(m.field.target().subnets());
        }
        write_checkpoint(path, &nets)?;
        let mut meta = String::new();
        for (k, v) in self.cfg.to_pairs() {
            let _ = writeln!(meta, "{k}={v}");
        }
        let _ = writeln!(meta, "source_l={}", self.sm.l);
        let _ = writeln!(meta, "source_u={}", self.sm.u);
        let _ = writeln!(meta, "steps={}", self.steps);
        for (i, m) in self.members.iter().enumerate() {
            let knots: Vec<String> = m.schedule.knots().iter().map(|x| x.to_string()).collect();
            let _ = writeln!(meta, "knots.{i}={}", knots.join(","));
        }
        let meta_path = sidecar_path(path);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    /// Restores the networks written by [`Self::save`] into a critic built
    /// with the same configs, together with the saved schedule knots.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let acts: Vec<_> = self
            .members
            .iter()
            .flat_map(|m| {
                let online = m.field.online.subnets();
                let target = m.field.target().subnets();
                online
                    .into_iter()
                    .chain(target)
                    .map(|n| (n.hidden_activation(), n.output_activation()))
                    .collect::<Vec<_>>()
            })
            .collect();
        let mut nets = read_checkpoint(path, &acts)?.into_iter();
        let per = if self.net_cfg.shortcut { 5 } else { 4 };
        let meta_path = sidecar_path(path);
        let meta = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let lines = crate::kv::parse(&meta)?;
        for (i, m) in self.members.iter_mut().enumerate() {
            let online = VelocityNet::from_subnets(self.net_cfg.clone(), nets.by_ref().take(per).collect())?;
            let target = VelocityNet::from_subnets(self.net_cfg.clone(), nets.by_ref().take(per).collect())?;
            let rho = m.field.target.rho();
            m.field = VelocityField::new(target, rho)?;
            m.field.online = online;
            m.adam = AdamState::new(&m.field.online, m.adam.config.clone());
            let key = format!("knots.{i}");
            let line = lines.iter().find(|l| l.key == key).ok_or_else(|| Error::Format {
                path: meta_path.clone(),
                reason: format!("missing {key}"),
            })?;
            let knots = line
                .value
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format {
                    path: meta_path.clone(),
                    reason: format!("line {}: {e}", line.line),
                })?;
            m.schedule = m.schedule.clone().with_knots(knots)?;
        }
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}
