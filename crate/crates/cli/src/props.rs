//! Quick property suite run by the `props` subcommand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wcrit_core::approx::{finite_difference_gradient, max_relative_error, Activation, NetParams};
use wcrit_core::dist1d::{brute_force_wasserstein, iqm, sorted, wasserstein_emp, EmpiricalDistribution};
use wcrit_core::env::{FixedPolicy, MdpBuilder, RewardSupport, TabularMdp};
use wcrit_core::flowcritic::{
    consistency_draws, couple_batch, knots_from_profile, pair_in_order, shortcut_one_step, shortcut_residuals,
    shortcut_two_steps, single_step_loss, single_step_outputs, uniform_knots, FlowCriticConfig, FnField, SourceMap,
    VelocityQuery,
};
use wcrit_core::trainers::contraction_study;

#[derive(Debug, Clone, PartialEq)]
pub struct PropResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> anyhow::Result<String>;

/// Runs every property; a check passes when it returns `Ok`.
pub fn run_props(seed: u64) -> Vec<PropResult> {
    let checks: [(&'static str, Check); 8] = [
        ("sorted_coupling_optimal", sorted_coupling_optimal),
        ("coupling_is_monotone", coupling_is_monotone),
        ("shortcut_zero_bias", shortcut_zero_bias),
        ("single_step_w2_identity", single_step_w2_identity),
        ("gradient_check", gradient_check),
        ("adaptive_constant_curvature", adaptive_constant_curvature),
        ("contraction_bound", contraction_bound),
        ("iqm_of_constant", iqm_of_constant),
    ];
    checks
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            match check(&mut rng) {
                Ok(detail) => PropResult { name, passed: true, detail },
                Err(e) => PropResult {
                    name,
                    passed: false,
                    detail: e.to_string(),
                },
            }
        })
        .collect()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> anyhow::Result<()> {
    if cond {
        Ok(())
    } else {
        Err(anyhow::anyhow!(msg()))
    }
}

fn samples(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
}

fn sorted_coupling_optimal(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let a = EmpiricalDistribution::new(samples(rng, n))?;
        let b = EmpiricalDistribution::new(samples(rng, n))?;
        for p in [1.0, 2.0] {
            worst = worst.max((wasserstein_emp(&a, &b, p)? - brute_force_wasserstein(&a, &b, p)?).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max gap {worst:e}"))?;
    Ok(format!("max gap {worst:e}"))
}

fn coupling_is_monotone(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let cfg = FlowCriticConfig::default();
    let sm = SourceMap::from_interval(-2.0, 3.0)?;
    for _ in 0..100 {
        let k = rng.random_range(1..=16);
        let tau: Vec<f64> = (0..k).map(|_| rng.random()).collect();
        let y = samples(rng, k);
        let e = couple_batch(0, 0, &tau, &y, &sm, &cfg, rng)?;
        ensure(e.is_monotone(), || format!("non-monotone coupling for {y:?}"))?;
    }
    Ok("100 batches".into())
}

fn shortcut_zero_bias(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let sm = SourceMap::from_interval(-1.0, 1.0)?;
    for _ in 0..100 {
        let c: f64 = rng.random_range(-10.0..10.0);
        let f = FnField::shortcut(move |_: &VelocityQuery| c);
        let k = rng.random_range(1..=8);
        let tau = sorted(&(0..k).map(|_| rng.random()).collect::<Vec<f64>>());
        let y = sorted(&samples(rng, k));
        let batch = vec![pair_in_order(0, 0, tau, y, &sm, rng.random())?];
        let draws = consistency_draws(&batch, &[0.5, 0.25, 0.125], rng);
        let r = shortcut_residuals(&f, &f, &batch, &draws)?;
        ensure(r.iter().all(|&x| x == 0.0), || format!("nonzero residual for c={c}"))?;
        let d = [0.5, 0.25, 0.125][rng.random_range(0..3)];
        let q = VelocityQuery {
            s: 0,
            a: 0,
            tau: rng.random(),
            z: rng.random_range(-5.0..5.0),
            t: rng.random_range(0.0..=1.0 - 2.0 * d),
            d,
        };
        let (one, two) = (shortcut_one_step(&f, &q, d)?, shortcut_two_steps(&f, &q, d)?);
        ensure(one.to_bits() == two.to_bits(), || format!("{one} != {two} for c={c}, d={d}"))?;
    }
    Ok("100 constant fields".into())
}

fn single_step_w2_identity(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (alpha, beta, slope) = (rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0), rng.random_range(-0.5..2.0));
        let f = FnField::shortcut(move |q: &VelocityQuery| alpha + beta * q.tau + slope * q.z);
        let lo: f64 = rng.random_range(-3.0..0.0);
        let sm = SourceMap::from_interval(lo, lo + rng.random_range(0.1..4.0))?;
        let k = rng.random_range(1..=16);
        let y = sorted(&samples(rng, k));
        let loss = single_step_loss(&f, 0, 0, &sm, &y)?;
        let out = EmpiricalDistribution::new(single_step_outputs(&f, 0, 0, &sm, k)?)?;
        let w = wasserstein_emp(&out, &EmpiricalDistribution::new(y)?, 2.0)?;
        worst = worst.max((loss - w * w).abs());
    }
    ensure(worst <= 1e-9, || format!("max gap {worst:e}"))?;
    Ok(format!("max gap {worst:e}"))
}

fn gradient_check(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let input = rng.random_range(1..=5);
        let mut dims = vec![input];
        dims.extend((0..rng.random_range(0..=2)).map(|_| rng.random_range(1..=6)));
        dims.push(rng.random_range(1..=3));
        let act = [Activation::Gelu, Activation::Tanh, Activation::Relu][rng.random_range(0..3)];
        let net = NetParams::new(&dims, act, Activation::Identity, rng)?;
        let rows = rng.random_range(1..=3);
        let x = wcrit_core::approx::matrix(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect());
        let w = wcrit_core::approx::matrix(rows, net.output_dim(), (0..rows * net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, cache) = net.forward(x.view())?;
        let (grads, _) = net.backward(&cache, w.view())?;
        let fd = finite_difference_gradient(&net, 1e-6, |p| (&p.predict(x.view()).unwrap() * &w).sum());
        worst = worst.max(max_relative_error(grads.as_slice(), &fd, 1e-5));
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:e}"))
}

fn adaptive_constant_curvature(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    for _ in 0..50 {
        let m = rng.random_range(1..=16);
        let bins = rng.random_range(1..=32);
        let c = rng.random_range(0.0..10.0);
        let knots = knots_from_profile(&vec![c; bins], 1e-3, m)?;
        let uniform = uniform_knots(m)?;
        let gap = knots.iter().zip(&uniform).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(gap <= 1e-9, || format!("gap {gap:e} at m={m}, bins={bins}"))?;
    }
    Ok("50 profiles".into())
}

/// Two recurrent states with stochastic rewards and a leaky exit.
pub fn recurrent_mdp(gamma: f64) -> wcrit_core::Result<TabularMdp> {
    MdpBuilder::new(3, 2, gamma)
        .terminal(2)
        .transition(0, 0, &[(0, 0.6), (1, 0.4)])
        .reward(0, 0, RewardSupport::new(vec![(-1.0, 0.5), (1.0, 0.5)])?)
        .transition(0, 1, &[(1, 0.9), (2, 0.1)])
        .reward(0, 1, RewardSupport::dirac(0.5))
        .transition(1, 0, &[(0, 1.0)])
        .reward(1, 0, RewardSupport::new(vec![(0.0, 0.7), (2.0, 0.3)])?)
        .transition(1, 1, &[(1, 0.5), (2, 0.5)])
        .reward(1, 1, RewardSupport::dirac(-0.5))
        .build()
}

fn contraction_bound(_: &mut ChaCha8Rng) -> anyhow::Result<String> {
    let mut worst_ratio: f64 = 0.0;
    for gamma in [0.5, 0.9, 0.99] {
        let mdp = recurrent_mdp(gamma)?;
        let rep = contraction_study(&mdp, &FixedPolicy::uniform(3, 2), 2.0, 30, 201)?;
        ensure(rep.bound_holds(), || format!("gamma={gamma}: violations at sweeps {:?}", rep.violations()))?;
        worst_ratio = rep.ratios.iter().skip(1).copied().fold(worst_ratio, f64::max);
    }
    Ok(format!("largest ratio past the first sweep {worst_ratio:.4}"))
}

fn iqm_of_constant(rng: &mut ChaCha8Rng) -> anyhow::Result<String> {
    for _ in 0..20 {
        let c: f64 = rng.random_range(-5.0..5.0);
        let n = rng.random_range(4..40);
        let v = iqm(&vec![c; n])?;
        ensure((v - c).abs() <= 1e-12, || format!("iqm of {n} copies of {c} is {v}"))?;
    }
    Ok("20 vectors".into())
}
