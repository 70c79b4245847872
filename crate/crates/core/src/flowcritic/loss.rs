use rand::Rng;

use crate::dist1d::midpoint_grid;
use crate::error::{usage, Result};

use super::coupling::CoupledBatch;
use super::net::{VelocityGrads, VelocityModel, VelocityNet, VelocityQuery};
use super::source::SourceMap;
use super::FlowCriticConfig;

fn regression_queries(batch: &CoupledBatch) -> Result<(Vec<VelocityQuery>, Vec<f64>)> {
    let n: usize = batch.iter().map(|e| e.len()).sum();
    if n == 0 {
        return Err(usage!("flow-matching loss needs a non-empty batch"));
    }
    let mut queries = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for e in batch {
        for k in 0..e.len() {
            queries.push(VelocityQuery {
                s: e.s,
                a: e.a,
                tau: e.tau[k],
                z: e.zt[k],
                t: e.t,
                d: 0.0,
            });
            targets.push(e.u[k]);
        }
    }
    Ok((queries, targets))
}

fn mean_squared(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

fn squared_loss_grads(net: &VelocityNet, queries: &[VelocityQuery], targets: &[f64]) -> Result<(f64, VelocityGrads)> {
    let (pred, cache) = net.forward(queries)?;
    let n = pred.len() as f64;
    let grad: Vec<f64> = pred.iter().zip(targets).map(|(p, t)| 2.0 * (p - t) / n).collect();
    let grads = net.backward(&cache, &grad)?;
    Ok((mean_squared(&pred, targets), grads))
}

/// Mean over all coupled pairs of `|v(t, z_t | s, a, tau) - (y - z0)|^2`.
pub fn flowiqn_loss(batch: &CoupledBatch, net: &VelocityNet) -> Result<(f64, VelocityGrads)> {
    let (q, target) = regression_queries(batch)?;
    squared_loss_grads(net, &q, &target)
}

pub fn flowiqn_loss_value(batch: &CoupledBatch, model: &impl VelocityModel) -> Result<f64> {
    let (q, target) = regression_queries(batch)?;
    Ok(mean_squared(&model.velocities(&q)?, &target))
}

/// A sampled consistency check: entry index, step size and start time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsistencyDraw {
    pub entry: usize,
    pub d: f64,
    pub t: f64,
}

/// One draw per entry and step size with `2d <= 1`, `t ~ U[0, 1 - 2d]`.
pub fn consistency_draws(batch: &CoupledBatch, step_sizes: &[f64], rng: &mut impl Rng) -> Vec<ConsistencyDraw> {
    let mut out = Vec::new();
    for entry in 0..batch.len() {
        for &d in step_sizes {
            if 2.0 * d > 1.0 {
                continue;
            }
            let t = rng.random::<f64>() * (1.0 - 2.0 * d);
            out.push(ConsistencyDraw { entry, d, t });
        }
    }
    out
}

/// Student queries at `(t, z_t, 2d)` and their half-step targets
/// `(s(t, z, d) + s(t + d, z + d s(t, z, d), d)) / 2` under `target`.
fn consistency_queries(
    target: &impl VelocityModel,
    batch: &CoupledBatch,
    draws: &[ConsistencyDraw],
) -> Result<(Vec<VelocityQuery>, Vec<f64>)> {
    let mut first = Vec::new();
    for dr in draws {
        let e = batch
            .get(dr.entry)
            .ok_or_else(|| usage!("consistency draw refers to entry {}", dr.entry))?;
        for (k, z) in e.interpolant(dr.t).into_iter().enumerate() {
            first.push(VelocityQuery {
                s: e.s,
                a: e.a,
                tau: e.tau[k],
                z,
                t: dr.t,
                d: dr.d,
            });
        }
    }
    if first.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let s1 = target.velocities(&first)?;
    let second: Vec<VelocityQuery> = first
        .iter()
        .zip(&s1)
        .map(|(q, v)| VelocityQuery {
            z: q.z + q.d * v,
            t: q.t + q.d,
            ..*q
        })
        .collect();
    let s2 = target.velocities(&second)?;
    let targets = s1.iter().zip(&s2).map(|(a, b)| 0.5 * (a + b)).collect();
    let student = first.into_iter().map(|q| VelocityQuery { d: 2.0 * q.d, ..q }).collect();
    Ok((student, targets))
}

/// Residuals `s_online(t, z, 2d) - target` for every pair of every draw.
pub fn shortcut_residuals(
    online: &impl VelocityModel,
    target: &impl VelocityModel,
    batch: &CoupledBatch,
    draws: &[ConsistencyDraw],
) -> Result<Vec<f64>> {
    let (q, t) = consistency_queries(target, batch, draws)?;
    if q.is_empty() {
        return Ok(Vec::new());
    }
    Ok(online.velocities(&q)?.iter().zip(&t).map(|(p, t)| p - t).collect())
}

/// Mean squared consistency residual; zero when no draw is admissible.
pub fn shortcut_consistency_value(
    online: &impl VelocityModel,
    target: &impl VelocityModel,
    batch: &CoupledBatch,
    draws: &[ConsistencyDraw],
) -> Result<f64> {
    let r = shortcut_residuals(online, target, batch, draws)?;
    if r.is_empty() {
        return Ok(0.0);
    }
    Ok(r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64)
}

/// Consistency loss with targets from `target` treated as constants.
pub fn shortcut_consistency_loss(
    online: &VelocityNet,
    target: &impl VelocityModel,
    batch: &CoupledBatch,
    cfg: &FlowCriticConfig,
    rng: &mut impl Rng,
) -> Result<(f64, VelocityGrads)> {
    if !online.config().shortcut {
        return Err(usage!("consistency loss needs a step-conditioned field"));
    }
    let draws = consistency_draws(batch, &cfg.shortcut_step_sizes, rng);
    let (q, t) = consistency_queries(target, batch, &draws)?;
    if q.is_empty() {
        return Ok((0.0, online.zero_grads()));
    }
    squared_loss_grads(online, &q, &t)
}

/// `(1 - lambda_c) L_flow + lambda_c L_con`; plain flow matching when the
/// shortcut is disabled.
pub fn combined_loss(
    batch: &CoupledBatch,
    online: &VelocityNet,
    target: &impl VelocityModel,
    cfg: &FlowCriticConfig,
    rng: &mut impl Rng,
) -> Result<(f64, VelocityGrads)> {
    if !cfg.shortcut_enabled {
        return flowiqn_loss(batch, online);
    }
    let lam = cfg.lambda_c;
    let (con, con_grads) = shortcut_consistency_loss(online, target, batch, cfg, rng)?;
    if lam == 1.0 {
        return Ok((con, con_grads));
    }
    let (flow, mut grads) = flowiqn_loss(batch, online)?;
    if lam == 0.0 {
        return Ok((flow, grads));
    }
    grads.scale(1.0 - lam);
    grads.add_assign(&con_grads, lam);
    Ok(((1.0 - lam) * flow + lam * con, grads))
}

/// One `2d` step from `(t, z)` using `s(t, z, 2d)`.
pub fn shortcut_one_step(model: &impl VelocityModel, q: &VelocityQuery, d: f64) -> Result<f64> {
    let v = model.velocities(&[VelocityQuery { d: 2.0 * d, ..*q }])?[0];
    Ok(q.z + 2.0 * d * v)
}

/// Two composed `d` steps from `(t, z)`, written as one step of length
/// `2d` along the mean of the two half-step velocities.
pub fn shortcut_two_steps(model: &impl VelocityModel, q: &VelocityQuery, d: f64) -> Result<f64> {
    let first = VelocityQuery { d, ..*q };
    let s1 = model.velocities(&[first])?[0];
    let second = VelocityQuery {
        z: q.z + d * s1,
        t: q.t + d,
        ..first
    };
    let s2 = model.velocities(&[second])?[0];
    Ok(q.z + 2.0 * d * (0.5 * (s1 + s2)))
}

/// Outputs `g(tau_k) + s(0, g(tau_k), 1)` of a single full-length shortcut
/// step on the `(k - 0.5)/K` grid.
pub fn single_step_outputs(model: &impl VelocityModel, s: usize, a: usize, sm: &SourceMap, k: usize) -> Result<Vec<f64>> {
    let q: Vec<VelocityQuery> = midpoint_grid(k)
        .map(|tau| VelocityQuery {
            s,
            a,
            tau,
            z: sm.apply(tau),
            t: 0.0,
            d: 1.0,
        })
        .collect();
    let v = model.velocities(&q)?;
    Ok(q.iter().zip(v).map(|(q, v)| q.z + v).collect())
}

/// Flow-matching loss of the `d = 1` field at `t = 0` against sorted
/// targets on the shared grid.
pub fn single_step_loss(model: &impl VelocityModel, s: usize, a: usize, sm: &SourceMap, sorted_targets: &[f64]) -> Result<f64> {
    let k = sorted_targets.len();
    if k == 0 {
        return Err(usage!("single-step loss needs targets"));
    }
    let q: Vec<VelocityQuery> = midpoint_grid(k)
        .map(|tau| VelocityQuery {
            s,
            a,
            tau,
            z: sm.apply(tau),
            t: 0.0,
            d: 1.0,
        })
        .collect();
    let v = model.velocities(&q)?;
    let u: Vec<f64> = q.iter().zip(sorted_targets).map(|(q, y)| y - q.z).collect();
    Ok(mean_squared(&v, &u))
}
