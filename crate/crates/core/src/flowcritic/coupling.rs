use rand::seq::SliceRandom;
use rand::Rng;

use crate::dist1d::sorted;
use crate::env::Transition;
use crate::error::{usage, Result};

use super::net::{FlowPoint, VelocityModel};
use super::schedule::TimeSchedule;
use super::source::SourceMap;
use super::{CouplingMode, FlowCriticConfig, TauMode};

/// Fractions `tau'` and bootstrapped returns `y` for one transition,
/// index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSamples {
    pub tau_prime: Vec<f64>,
    pub y: Vec<f64>,
}

/// Draws `K` fractions per transition and integrates the target field at
/// `(s', a'_k, tau'_k)`: `y_k = r + gamma m Q(s', a'_k, tau'_k)`.
///
/// Each row of `next_actions` holds either `K` actions or a single action
/// shared by all `K` samples.
///
/// Fractions for every transition are drawn before any integration, so the
/// random stream does not depend on masks or the field.
pub fn bellman_targets(
    transitions: &[Transition],
    next_actions: &[Vec<usize>],
    target: &impl VelocityModel,
    sm: &SourceMap,
    schedule: &TimeSchedule,
    cfg: &FlowCriticConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TargetSamples>> {
    if transitions.len() != next_actions.len() {
        return Err(usage!(
            "{} transitions but {} next actions",
            transitions.len(),
            next_actions.len()
        ));
    }
    let k = cfg.k;
    check_next_actions(next_actions, k)?;
    let taus: Vec<Vec<f64>> = transitions
        .iter()
        .map(|_| (0..k).map(|_| rng.random::<f64>()).collect())
        .collect();

    let mut points = Vec::new();
    let mut z0 = Vec::new();
    for ((tr, row), tau) in transitions.iter().zip(next_actions).zip(&taus) {
        if tr.mask && cfg.gamma != 0.0 {
            for (j, &t) in tau.iter().enumerate() {
                points.push(FlowPoint {
                    s: tr.s_next,
                    a: next_action(row, j),
                    tau: t,
                });
                z0.push(sm.apply(t));
            }
        }
    }
    let q = if points.is_empty() {
        Vec::new()
    } else {
        target.integrate(&points, &z0, schedule.knots())?
    };

    let mut q_iter = q.into_iter();
    let mut out = Vec::with_capacity(transitions.len());
    for (tr, tau) in transitions.iter().zip(taus) {
        let y = if tr.mask && cfg.gamma != 0.0 {
            (0..k).map(|_| tr.r + cfg.gamma * q_iter.next().expect("one value per fraction")).collect()
        } else {
            vec![tr.r; k]
        };
        out.push(TargetSamples { tau_prime: tau, y });
    }
    Ok(out)
}

/// Checks that every row of per-sample next actions has `1` or `k` entries.
pub fn check_next_actions(next_actions: &[Vec<usize>], k: usize) -> Result<()> {
    if let Some(row) = next_actions.iter().find(|r| r.len() != 1 && r.len() != k) {
        return Err(usage!("next-action rows need 1 or {k} entries, got {}", row.len()));
    }
    Ok(())
}

/// The `j`-th next action of a row, broadcasting single-action rows.
pub fn next_action(row: &[usize], j: usize) -> usize {
    if row.len() == 1 {
        row[0]
    } else {
        row[j]
    }
}

/// One transition's coupled pairs and its interpolation time.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledEntry {
    pub s: usize,
    pub a: usize,
    pub tau: Vec<f64>,
    pub z0: Vec<f64>,
    pub y: Vec<f64>,
    pub t: f64,
    pub zt: Vec<f64>,
    pub u: Vec<f64>,
}

impl CoupledEntry {
    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn is_monotone(&self) -> bool {
        let nd = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
        nd(&self.tau) && nd(&self.z0) && nd(&self.y)
    }

    /// `(1 - t) z0 + t y` for every pair.
    pub fn interpolant(&self, t: f64) -> Vec<f64> {
        self.z0.iter().zip(&self.y).map(|(z, y)| (1.0 - t) * z + t * y).collect()
    }
}

pub type CoupledBatch = Vec<CoupledEntry>;

/// Pairs `tau[k]` with `y[k]` as given, at time `t`.
pub fn pair_in_order(s: usize, a: usize, tau: Vec<f64>, y: Vec<f64>, sm: &SourceMap, t: f64) -> Result<CoupledEntry> {
    if tau.len() != y.len() {
        return Err(usage!("{} source fractions but {} targets", tau.len(), y.len()));
    }
    let z0: Vec<f64> = tau.iter().map(|&x| sm.apply(x)).collect();
    let zt = z0.iter().zip(&y).map(|(z, y)| (1.0 - t) * z + t * y).collect();
    let u = z0.iter().zip(&y).map(|(z, y)| y - z).collect();
    Ok(CoupledEntry {
        s,
        a,
        tau,
        z0,
        y,
        t,
        zt,
        u,
    })
}

/// Builds one transition's coupled entry.
///
/// Source fractions are the target fractions (`TauMode::Reuse`) or a fresh
/// uniform draw. Sorted coupling sorts sources and targets separately;
/// independent coupling keeps the targets in draw order and applies a
/// random permutation to the sources, so no pairing structure carries over
/// from how the targets were generated.
pub fn couple_batch(
    s: usize,
    a: usize,
    tau_prime: &[f64],
    y: &[f64],
    sm: &SourceMap,
    cfg: &FlowCriticConfig,
    rng: &mut impl Rng,
) -> Result<CoupledEntry> {
    if tau_prime.len() != y.len() {
        return Err(usage!("{} fractions but {} targets", tau_prime.len(), y.len()));
    }
    let mut tau: Vec<f64> = match cfg.tau_reuse {
        TauMode::Reuse => tau_prime.to_vec(),
        TauMode::Fresh => (0..y.len()).map(|_| rng.random::<f64>()).collect(),
    };
    let y = match cfg.coupling_mode {
        CouplingMode::Sorted => {
            tau = sorted(&tau);
            sorted(y)
        }
        CouplingMode::Independent => {
            tau.shuffle(rng);
            y.to_vec()
        }
    };
    let t = rng.random::<f64>();
    pair_in_order(s, a, tau, y, sm, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcritic::net::{FnField, VelocityQuery};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sm() -> SourceMap {
        SourceMap::from_interval(9.0, 10.0).unwrap()
    }

    #[test]
    fn sorted_pairing_example() {
        let e = pair_in_order(0, 0, sorted(&[0.7, 0.2]), sorted(&[5.0, 1.0]), &sm(), 0.0).unwrap();
        assert_eq!(e.tau, vec![0.2, 0.7]);
        assert_eq!(e.y, vec![1.0, 5.0]);
        assert_eq!(e.z0, vec![sm().apply(0.2), sm().apply(0.7)]);
        assert_eq!(e.zt, e.z0);
        let e1 = pair_in_order(0, 0, e.tau.clone(), e.y.clone(), &sm(), 1.0).unwrap();
        assert_eq!(e1.zt, e1.y);

        let cfg = FlowCriticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = couple_batch(0, 0, &[0.7, 0.2], &[5.0, 1.0], &sm(), &cfg, &mut rng).unwrap();
        assert_eq!((c.tau.clone(), c.y.clone()), (e.tau, e.y));
        assert!(c.is_monotone());
    }

    #[test]
    fn mismatched_lengths() {
        let cfg = FlowCriticConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(couple_batch(0, 0, &[0.1], &[1.0, 2.0], &sm(), &cfg, &mut rng).is_err());
    }

    fn tr(mask: bool, r: f64) -> Transition {
        Transition {
            s: 0,
            a: 0,
            r,
            s_next: 1,
            mask,
        }
    }

    #[test]
    fn bellman_target_examples() {
        let zero = FnField::new(|_: &VelocityQuery| 0.0);
        let wild = FnField::new(|q: &VelocityQuery| 1e3 * q.z.sin());
        let sched = TimeSchedule::uniform(4).unwrap();
        let cfg = FlowCriticConfig {
            k: 5,
            gamma: 0.9,
            ..FlowCriticConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = bellman_targets(&[tr(false, 2.0)], &[vec![0]], &wild, &sm(), &sched, &cfg, &mut rng).unwrap();
        assert_eq!(out[0].y, vec![2.0; 5]);

        let g0 = FlowCriticConfig { gamma: 0.0, ..cfg.clone() };
        let out = bellman_targets(&[tr(true, 2.0)], &[vec![0]], &wild, &sm(), &sched, &g0, &mut rng).unwrap();
        assert_eq!(out[0].y, vec![2.0; 5]);

        let out = bellman_targets(&[tr(true, 2.0)], &[vec![0]], &zero, &sm(), &sched, &cfg, &mut rng).unwrap();
        for (t, y) in out[0].tau_prime.iter().zip(&out[0].y) {
            assert!((y - (2.0 + 0.9 * sm().apply(*t))).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_are_seeded() {
        let f = FnField::new(|q: &VelocityQuery| q.tau - q.z * 0.1);
        let sched = TimeSchedule::uniform(3).unwrap();
        let cfg = FlowCriticConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            bellman_targets(&[tr(true, 1.0), tr(false, 0.0)], &[vec![0], vec![0]], &f, &sm(), &sched, &cfg, &mut rng).unwrap()
        };
        assert_eq!(run(11), run(11));
        assert_ne!(run(11), run(12));
    }
}
