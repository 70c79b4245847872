//! Control critics: flow matching with independent pairing, and an
//! implicit quantile network trained by quantile-Huber regression.

use ndarray::Array2;
use rand::Rng;

use crate::approx::{
    cosine_embed_into, Activation, AdamConfig, AdamState, ForwardCache, Gradients, NetParams, ParamSet, TargetParams,
};
use crate::dist1d::{midpoint_grid, EmpiricalDistribution};
use crate::env::Transition;
use crate::error::{config_err, usage, Error, Result};
use crate::flowcritic::{check_next_actions, flowiqn_loss, next_action, pair_in_order, CoupledBatch, CoupledEntry, SourceMap, VelocityGrads, VelocityNet};

/// Pairs sources and targets in draw order, never sorting.
pub fn pair_independent(
    s: usize,
    a: usize,
    tau: Vec<f64>,
    y: Vec<f64>,
    sm: &SourceMap,
    t: f64,
) -> Result<CoupledEntry> {
    pair_in_order(s, a, tau, y, sm, t)
}

/// The flow-matching regression on independently paired batches. The
/// objective is the FlowIQN one; only the pairing that built `batch`
/// differs.
pub fn independent_cfm_loss(batch: &CoupledBatch, net: &VelocityNet) -> Result<(f64, VelocityGrads)> {
    flowiqn_loss(batch, net)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqnConfig {
    pub n_quantiles: usize,
    pub huber_kappa: f64,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub cosine_basis: usize,
    pub activation: Activation,
}

impl Default for IqnConfig {
    fn default() -> Self {
        Self {
            n_quantiles: 16,
            huber_kappa: 1.0,
            embed_dim: 32,
            hidden: vec![64],
            cosine_basis: 16,
            activation: Activation::Gelu,
        }
    }
}

impl IqnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_quantiles == 0 || self.embed_dim == 0 || self.cosine_basis == 0 || self.hidden.contains(&0) {
            return Err(config_err!("IQN counts and widths must be at least 1"));
        }
        if !(self.huber_kappa > 0.0) {
            return Err(config_err!("huber_kappa {} must be positive", self.huber_kappa));
        }
        Ok(())
    }
}

/// `q(s, a, tau)`: a state-action embedding times a cosine fraction
/// embedding, followed by a dense trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct IqnNet {
    n_states: usize,
    n_actions: usize,
    cosine_basis: usize,
    sa: NetParams,
    tau: NetParams,
    trunk: NetParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqnGrads {
    pub sa: Gradients,
    pub tau: Gradients,
    pub trunk: Gradients,
}

impl ParamSet for IqnGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.sa.as_slice(), self.tau.as_slice(), self.trunk.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.sa.tensors_mut();
        out.extend(self.tau.tensors_mut());
        out.extend(self.trunk.tensors_mut());
        out
    }
}

impl ParamSet for IqnNet {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.sa.as_slice(), self.tau.as_slice(), self.trunk.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.sa.tensors_mut();
        out.extend(self.tau.tensors_mut());
        out.extend(self.trunk.tensors_mut());
        out
    }
}

pub struct IqnCache {
    sa_out: Array2<f64>,
    tau_out: Array2<f64>,
    sa: ForwardCache,
    tau: ForwardCache,
    trunk: ForwardCache,
}

impl IqnNet {
    pub fn new(n_states: usize, n_actions: usize, cfg: &IqnConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let act = cfg.activation;
        let sa = NetParams::new(&[n_states + n_actions, cfg.embed_dim], act, act, rng)?;
        let tau = NetParams::new(&[cfg.cosine_basis, cfg.embed_dim], act, act, rng)?;
        let mut dims = vec![cfg.embed_dim];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let trunk = NetParams::new(&dims, act, Activation::Identity, rng)?;
        Ok(Self {
            n_states,
            n_actions,
            cosine_basis: cfg.cosine_basis,
            sa,
            tau,
            trunk,
        })
    }

    pub fn subnets(&self) -> [&NetParams; 3] {
        [&self.sa, &self.tau, &self.trunk]
    }

    fn inputs(&self, points: &[(usize, usize, f64)]) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = points.len();
        let mut sa = Array2::zeros((n, self.n_states + self.n_actions));
        let mut tau = Array2::zeros((n, self.cosine_basis));
        for (i, &(s, a, t)) in points.iter().enumerate() {
            if s >= self.n_states || a >= self.n_actions {
                return Err(usage!("state-action ({s},{a}) outside the IQN table"));
            }
            sa[[i, s]] = 1.0;
            sa[[i, self.n_states + a]] = 1.0;
            cosine_embed_into(t, tau.row_mut(i).as_slice_mut().expect("row-major"));
        }
        Ok((sa, tau))
    }

    pub fn forward(&self, points: &[(usize, usize, f64)]) -> Result<(Vec<f64>, IqnCache)> {
        let (sa_in, tau_in) = self.inputs(points)?;
        let (sa_out, sa) = self.sa.forward(sa_in.view())?;
        let (tau_out, tau) = self.tau.forward(tau_in.view())?;
        let h = &sa_out * &tau_out;
        let (out, trunk) = self.trunk.forward(h.view())?;
        Ok((
            out.iter().copied().collect(),
            IqnCache {
                sa_out,
                tau_out,
                sa,
                tau,
                trunk,
            },
        ))
    }

    pub fn quantiles(&self, points: &[(usize, usize, f64)]) -> Result<Vec<f64>> {
        let (sa_in, tau_in) = self.inputs(points)?;
        let h = self.sa.predict(sa_in.view())? * self.tau.predict(tau_in.view())?;
        Ok(self.trunk.predict(h.view())?.iter().copied().collect())
    }

    pub fn backward(&self, cache: &IqnCache, grad_out: &[f64]) -> Result<IqnGrads> {
        let g = Array2::from_shape_vec((grad_out.len(), 1), grad_out.to_vec()).map_err(|e| usage!("{e}"))?;
        let (trunk, g_h) = self.trunk.backward(&cache.trunk, g.view())?;
        let (sa, _) = self.sa.backward(&cache.sa, (&g_h * &cache.tau_out).view())?;
        let (tau, _) = self.tau.backward(&cache.tau, (&g_h * &cache.sa_out).view())?;
        Ok(IqnGrads { sa, tau, trunk })
    }
}

/// Quantile-Huber element `|tau - 1{u < 0}| L_kappa(u) / kappa`.
pub fn quantile_huber(tau: f64, u: f64, kappa: f64) -> f64 {
    let huber = if u.abs() <= kappa { 0.5 * u * u } else { kappa * (u.abs() - 0.5 * kappa) };
    let w = if u < 0.0 { (tau - 1.0).abs() } else { tau };
    w * huber / kappa
}

/// Derivative of [`quantile_huber`] with respect to the prediction, where
/// `u = target - prediction`.
fn quantile_huber_grad(tau: f64, u: f64, kappa: f64) -> f64 {
    let dhuber = if u.abs() <= kappa { u } else { kappa * u.signum() };
    let w = if u < 0.0 { (tau - 1.0).abs() } else { tau };
    -w * dhuber / kappa
}

/// Predicted fractions and bootstrapped targets of one transition.
#[derive(Debug, Clone, PartialEq)]
pub struct IqnSample {
    pub s: usize,
    pub a: usize,
    pub taus: Vec<f64>,
    pub targets: Vec<f64>,
}

/// Mean over every `(tau_i, target_j)` pair of every sample of the
/// quantile-Huber loss of `u = target_j - q(s, a, tau_i)`.
pub fn iqn_loss(net: &IqnNet, batch: &[IqnSample], cfg: &IqnConfig) -> Result<(f64, IqnGrads)> {
    let points: Vec<(usize, usize, f64)> =
        batch.iter().flat_map(|b| b.taus.iter().map(move |&t| (b.s, b.a, t))).collect();
    let n_pairs: usize = batch.iter().map(|b| b.taus.len() * b.targets.len()).sum();
    if n_pairs == 0 {
        return Err(usage!("quantile loss needs fractions and targets"));
    }
    let (pred, cache) = net.forward(&points)?;
    let mut grad = vec![0.0; pred.len()];
    let mut loss = 0.0;
    let mut idx = 0;
    let norm = n_pairs as f64;
    for b in batch {
        for &tau in &b.taus {
            for &y in &b.targets {
                let u = y - pred[idx];
                loss += quantile_huber(tau, u, cfg.huber_kappa) / norm;
                grad[idx] += quantile_huber_grad(tau, u, cfg.huber_kappa) / norm;
            }
            idx += 1;
        }
    }
    Ok((loss, net.backward(&cache, &grad)?))
}

/// Quantiles on the `(k - 0.5)/n` grid, sorted.
pub fn iqn_sample_distribution(net: &IqnNet, s: usize, a: usize, n: usize) -> Result<EmpiricalDistribution> {
    if n == 0 {
        return Err(usage!("need at least one return sample"));
    }
    let points: Vec<(usize, usize, f64)> = midpoint_grid(n).map(|t| (s, a, t)).collect();
    EmpiricalDistribution::new(net.quantiles(&points)?)
}

/// Trainable IQN critic with an EMA target network.
#[derive(Debug, Clone)]
pub struct IqnCritic {
    pub cfg: IqnConfig,
    pub gamma: f64,
    pub k_grid: usize,
    online: IqnNet,
    target: TargetParams<IqnNet>,
    adam: AdamState,
    steps: u64,
}

impl IqnCritic {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_states: usize,
        n_actions: usize,
        cfg: IqnConfig,
        gamma: f64,
        k_grid: usize,
        adam: AdamConfig,
        rho: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&gamma) || k_grid == 0 {
            return Err(config_err!("IQN critic needs gamma in [0, 1) and k_grid >= 1"));
        }
        let online = IqnNet::new(n_states, n_actions, &cfg, rng)?;
        Ok(Self {
            target: TargetParams::new(&online, rho)?,
            adam: AdamState::new(&online, adam),
            online,
            cfg,
            gamma,
            k_grid,
            steps: 0,
        })
    }

    pub fn online(&self) -> &IqnNet {
        &self.online
    }

    pub fn target(&self) -> &IqnNet {
        self.target.params()
    }

    /// Targets `r + gamma m q_target(s', a', tau'_j)` against predictions at
    /// fresh fractions; one Adam step and EMA update.
    pub fn update(&mut self, transitions: &[Transition], next_actions: &[Vec<usize>], rng: &mut impl Rng) -> Result<f64> {
        if transitions.is_empty() || transitions.len() != next_actions.len() {
            return Err(usage!("update needs matching non-empty transitions and next actions"));
        }
        let n = self.cfg.n_quantiles;
        check_next_actions(next_actions, n)?;
        let mut batch = Vec::with_capacity(transitions.len());
        let mut next_points = Vec::new();
        for (tr, row) in transitions.iter().zip(next_actions) {
            let taus: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let next: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            if tr.mask && self.gamma != 0.0 {
                next_points.extend(next.iter().enumerate().map(|(j, &t)| (tr.s_next, next_action(row, j), t)));
            }
            batch.push(IqnSample {
                s: tr.s,
                a: tr.a,
                taus,
                targets: Vec::new(),
            });
        }
        let q_next = if next_points.is_empty() {
            Vec::new()
        } else {
            self.target.params().quantiles(&next_points)?
        };
        let mut it = q_next.into_iter();
        for (b, tr) in batch.iter_mut().zip(transitions) {
            b.targets = if tr.mask && self.gamma != 0.0 {
                (0..n).map(|_| tr.r + self.gamma * it.next().expect("one value per fraction")).collect()
            } else {
                vec![tr.r; n]
            };
        }
        let (loss, grads) = iqn_loss(&self.online, &batch, &self.cfg)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: self.steps as usize,
                what: format!("IQN loss is {loss}"),
            });
        }
        self.adam.step(&mut self.online, &grads)?;
        self.target.ema_update(&self.online)?;
        self.steps += 1;
        Ok(loss)
    }

    /// Mean quantile over the `k_grid` midpoint grid.
    pub fn values(&self, pairs: &[(usize, usize)], use_target: bool) -> Result<Vec<f64>> {
        let net = if use_target { self.target.params() } else { &self.online };
        let k = self.k_grid;
        let points: Vec<(usize, usize, f64)> =
            pairs.iter().flat_map(|&(s, a)| midpoint_grid(k).map(move |t| (s, a, t))).collect();
        let q = net.quantiles(&points)?;
        Ok(q.chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect())
    }

    pub fn sample(&self, s: usize, a: usize, n: usize) -> Result<EmpiricalDistribution> {
        iqn_sample_distribution(&self.online, s, a, n)
    }
}
