//! End-to-end acceptance checks. Each test writes one PASS/FAIL line to
//! stderr (bypassing the test harness capture) before asserting.

use std::io::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use wcrit_core::approx::{
    finite_difference_gradient, matrix, max_relative_error, Activation, AdamConfig, EmbeddingConfig, NetParams,
    ParamSet,
};
use wcrit_core::dist1d::{brute_force_wasserstein, sorted, trimmed_mean, wasserstein_emp, EmpiricalDistribution};
use wcrit_core::env::{bimodal_chain, mixed_walk, FixedPolicy, MdpBuilder, RewardSupport, TabularMdp};
use wcrit_core::flowcritic::{
    consistency_draws, couple_batch, flowiqn_loss_value, knots_from_profile, pair_in_order, shortcut_one_step,
    shortcut_residuals, shortcut_two_steps, single_step_loss, single_step_outputs, uniform_knots, FlowCritic,
    FlowCriticConfig, FnField, SourceMap, TargetSamples, VelocityModel, VelocityNet, VelocityNetConfig, VelocityQuery,
};
use wcrit_core::trainers::{
    contraction_study, train_fixed_policy, train_offline_rejection, CriticKind, EnvKind, NetSpec, RunConfig,
};

fn report(n: usize, name: &str, passed: bool, detail: &str, start: Instant) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    let line = format!(
        "acceptance {n:>2} {verdict} {name}: {detail} [{:.1}s]\n",
        start.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn emp(v: Vec<f64>) -> EmpiricalDistribution {
    EmpiricalDistribution::new(v).unwrap()
}

#[test]
fn c01_sorted_coupling_optimality() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=8);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        let (a, b) = (emp(a), emp(b));
        for p in [1.0, 2.0] {
            let gap = (wasserstein_emp(&a, &b, p).unwrap() - brute_force_wasserstein(&a, &b, p).unwrap()).abs();
            worst = worst.max(gap);
        }
    }
    let passed = worst <= 1e-12;
    report(1, "sorted coupling optimality", passed, &format!("200 pairs, max gap {worst:e}"), start);
    assert!(passed);
}

fn draw_target(kind: usize, rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random();
    let normal = |m: f64, s: f64, rng: &mut ChaCha8Rng| Normal::new(m, s).unwrap().sample(rng);
    match kind {
        0 => normal(if u < 0.5 { -2.0 } else { 2.0 }, 0.5, rng),
        1 => normal(if u < 0.3 { -1.0 } else { 1.5 }, 0.3, rng),
        2 => {
            if u < 0.5 {
                -1.0
            } else {
                3.0
            }
        }
        3 => {
            if u < 0.8 {
                0.0
            } else {
                5.0
            }
        }
        _ => 4.0 * u,
    }
}

const TARGET_NAMES: [&str; 5] = ["gaussian mixture", "skewed gaussian mixture", "symmetric atoms", "skewed atoms", "uniform"];

#[test]
fn c02_wasserstein_upper_bound() {
    let start = Instant::now();
    let steps = 5000;
    let mut lines = Vec::new();
    let mut passed = true;
    for (kind, name) in TARGET_NAMES.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + kind as u64);
        let reference: Vec<f64> = (0..4000).map(|_| draw_target(kind, &mut rng)).collect();
        let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sm = SourceMap::from_interval(lo, hi).unwrap();
        let cfg = FlowCriticConfig::default();
        let spec = NetSpec::default();
        let net_cfg = VelocityNetConfig {
            n_states: 1,
            n_actions: 1,
            embed: spec.embedding(&sm),
            embed_dim: spec.embed_dim,
            hidden: spec.hidden.clone(),
            activation: spec.activation,
            shortcut: cfg.shortcut_enabled,
        };
        let mut critic = FlowCritic::new(cfg.clone(), net_cfg, sm.clone(), AdamConfig::default(), 0.005, &mut rng).unwrap();
        let batch = 8;
        let fresh = |rng: &mut ChaCha8Rng| TargetSamples {
            tau_prime: (0..cfg.k).map(|_| rng.random()).collect(),
            y: (0..cfg.k).map(|_| draw_target(kind, rng)).collect(),
        };
        for _ in 0..steps {
            let samples: Vec<TargetSamples> = (0..batch).map(|_| fresh(&mut rng)).collect();
            critic.fit_samples(&vec![(0, 0); batch], &samples, &mut rng).unwrap();
        }
        let n_eval = 256;
        let mut loss = 0.0;
        for _ in 0..n_eval {
            let t = fresh(&mut rng);
            let e = couple_batch(0, 0, &t.tau_prime, &t.y, &sm, &cfg, &mut rng).unwrap();
            loss += flowiqn_loss_value(&vec![e], &critic.field(0).online).unwrap();
        }
        loss /= n_eval as f64;
        let model = critic.sample(0, 0, reference.len()).unwrap();
        let w = wasserstein_emp(&model, &emp(reference), 2.0).unwrap();
        let slack = 0.05 * sm.width().powi(2);
        let ok = w * w <= loss + slack;
        passed &= ok;
        lines.push(format!("{name} W2^2 {:.4} <= {:.4} + {:.4}: {ok}", w * w, loss, slack));
    }
    report(2, "flow-matching loss bounds W2", passed, &lines.join("; "), start);
    assert!(passed);
}

/// Two recurrent states with stochastic rewards and a leaky exit.
fn looping_mdp(gamma: f64) -> TabularMdp {
    MdpBuilder::new(3, 2, gamma)
        .terminal(2)
        .transition(0, 0, &[(0, 0.6), (1, 0.4)])
        .reward(0, 0, RewardSupport::new(vec![(-1.0, 0.5), (1.0, 0.5)]).unwrap())
        .transition(0, 1, &[(1, 0.9), (2, 0.1)])
        .reward(0, 1, RewardSupport::dirac(0.5))
        .transition(1, 0, &[(0, 1.0)])
        .reward(1, 0, RewardSupport::new(vec![(0.0, 0.7), (2.0, 0.3)]).unwrap())
        .transition(1, 1, &[(1, 0.5), (2, 0.5)])
        .reward(1, 1, RewardSupport::dirac(-0.5))
        .build()
        .unwrap()
}

#[test]
fn c03_contraction_of_projected_dp() {
    let start = Instant::now();
    let cases: Vec<(&str, TabularMdp)> = vec![
        ("bimodal chain", bimodal_chain(0.5).unwrap()),
        ("mixed walk", mixed_walk(0.9).unwrap()),
        ("looping mdp", looping_mdp(0.99)),
    ];
    let mut passed = true;
    let mut lines = Vec::new();
    for (name, mdp) in &cases {
        let pol = FixedPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let rep = contraction_study(mdp, &pol, 2.0, 100, 401).unwrap();
        let v = rep.violations();
        passed &= v.is_empty();
        let worst = rep.ratios.iter().skip(1).copied().fold(0.0, f64::max);
        lines.push(format!(
            "{name} gamma {} violations {} max ratio {worst:.4} atom width {:.4}",
            rep.gamma,
            v.len(),
            rep.atom_width
        ));
    }
    report(3, "projected DP contraction", passed, &lines.join("; "), start);
    assert!(passed);
}

#[test]
fn c04_zero_shortcut_bias() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sm = SourceMap::from_interval(-2.0, 2.0).unwrap();
    let mut failures = 0;
    for _ in 0..100 {
        let c: f64 = rng.random_range(-10.0..10.0);
        let field = FnField::shortcut(move |_: &VelocityQuery| c);
        let k = rng.random_range(1..=16);
        let tau = sorted(&(0..k).map(|_| rng.random()).collect::<Vec<f64>>());
        let y = sorted(&(0..k).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>());
        let batch = vec![pair_in_order(0, 0, tau, y, &sm, rng.random()).unwrap()];
        let draws = consistency_draws(&batch, &[0.5, 0.25, 0.125, 0.0625], &mut rng);
        let residual_zero = shortcut_residuals(&field, &field, &batch, &draws).unwrap().iter().all(|&r| r == 0.0);
        let d = [0.5, 0.25, 0.125, 0.0625][rng.random_range(0..4)];
        let q = VelocityQuery {
            s: 0,
            a: 0,
            tau: rng.random(),
            z: rng.random_range(-5.0..5.0),
            t: rng.random_range(0.0..=1.0 - 2.0 * d),
            d,
        };
        let one = shortcut_one_step(&field, &q, d).unwrap();
        let two = shortcut_two_steps(&field, &q, d).unwrap();
        if !residual_zero || one.to_bits() != two.to_bits() {
            failures += 1;
        }
    }
    let passed = failures == 0;
    report(4, "zero shortcut bias", passed, &format!("100 constant fields, {failures} failures"), start);
    assert!(passed);
}

#[test]
fn c05_single_step_loss_is_w2() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        // Monotone in tau for every z, so the outputs stay sorted.
        let (alpha, beta, slope) = (rng.random_range(-2.0..2.0), rng.random_range(0.0..3.0), rng.random_range(-0.5..2.0));
        let field = FnField::shortcut(move |q: &VelocityQuery| alpha + beta * q.tau + slope * q.z);
        let lo: f64 = rng.random_range(-3.0..0.0);
        let sm = SourceMap::from_interval(lo, lo + rng.random_range(0.1..4.0)).unwrap();
        let k = rng.random_range(1..=32);
        let y = sorted(&(0..k).map(|_| rng.random_range(-5.0..5.0)).collect::<Vec<f64>>());
        let loss = single_step_loss(&field, 0, 0, &sm, &y).unwrap();
        let out = emp(single_step_outputs(&field, 0, 0, &sm, k).unwrap());
        let w = wasserstein_emp(&out, &emp(y), 2.0).unwrap();
        worst = worst.max((loss - w * w).abs());
    }
    let passed = worst <= 1e-9;
    report(5, "single-step loss equals squared W2", passed, &format!("100 instances, max gap {worst:e}"), start);
    assert!(passed);
}

fn ablation_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        gamma: 0.9,
        seed,
        lr: 3e-4,
        gradient_steps: 20_000,
        eval_every: 20_000,
        ..RunConfig::default()
    };
    cfg.env.kind = EnvKind::BimodalChain;
    cfg.env.policy = "uniform".into();
    cfg
}

fn final_mean_w2(cfg: &RunConfig) -> f64 {
    let trace = train_fixed_policy(cfg).unwrap();
    assert!(trace.aborted.is_none(), "{:?}", trace.aborted);
    trace.last().unwrap().mean_w2
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[test]
fn c06_coupling_ablation() {
    let start = Instant::now();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in SEEDS {
        let flow = final_mean_w2(&ablation_config(seed));
        let cfm = final_mean_w2(&RunConfig {
            critic: CriticKind::IndependentCfm,
            ..ablation_config(seed)
        });
        wins += usize::from(flow < cfm);
        pairs.push(format!("{flow:.3}/{cfm:.3}"));
    }
    let passed = wins >= 4;
    let detail = format!("sorted/independent final mean W2 per seed {}; sorted lower in {wins} of 5", pairs.join(" "));
    report(6, "coupling ablation", passed, &detail, start);
    assert!(passed);
}

#[test]
fn c07_adaptive_schedule_ablation() {
    let start = Instant::now();
    let mut knot_gap: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let m = rng.random_range(1..=16);
        let c = rng.random_range(0.0..10.0);
        let knots = knots_from_profile(&vec![c; rng.random_range(1..=64)], 1e-3, m).unwrap();
        for (a, b) in knots.iter().zip(uniform_knots(m).unwrap()) {
            knot_gap = knot_gap.max((a - b).abs());
        }
    }
    let run = |seed, adaptive: bool| {
        let mut cfg = ablation_config(seed);
        cfg.set("critic.M", "4").unwrap();
        cfg.set("critic.schedule", if adaptive { "adaptive" } else { "uniform" }).unwrap();
        final_mean_w2(&cfg)
    };
    let adaptive: Vec<f64> = SEEDS.iter().map(|&s| run(s, true)).collect();
    let uniform: Vec<f64> = SEEDS.iter().map(|&s| run(s, false)).collect();
    let (ia, iu) = (trimmed_mean(&adaptive), trimmed_mean(&uniform));
    let passed = ia <= iu && knot_gap <= 1e-9;
    let detail = format!(
        "IQM final mean W2 at M=4 adaptive {ia:.4} vs uniform {iu:.4} (adaptive {adaptive:.3?}, uniform {uniform:.3?}); constant-curvature knot gap {knot_gap:e}"
    );
    report(7, "adaptive schedule ablation", passed, &detail, start);
    assert!(passed);
}

fn velocity_loss(net: &VelocityNet, queries: &[VelocityQuery], w: &[f64]) -> f64 {
    net.velocities(queries).unwrap().iter().zip(w).map(|(v, w)| v * w).sum()
}

#[test]
fn c08_gradient_integrity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let floor = 1e-5;
    let mut worst: f64 = 0.0;
    let acts = [Activation::Gelu, Activation::Tanh, Activation::Relu];
    for _ in 0..25 {
        let input = rng.random_range(1..=6);
        let mut dims = vec![input];
        dims.extend((0..rng.random_range(0..=3)).map(|_| rng.random_range(1..=8)));
        dims.push(rng.random_range(1..=3));
        let net = NetParams::new(&dims, acts[rng.random_range(0..3)], Activation::Identity, &mut rng).unwrap();
        let rows = rng.random_range(1..=4);
        let out = net.output_dim();
        let x = matrix(rows, input, (0..rows * input).map(|_| rng.random_range(-2.0..2.0)).collect());
        let w = matrix(rows, out, (0..rows * out).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, cache) = net.forward(x.view()).unwrap();
        let (g, _) = net.backward(&cache, w.view()).unwrap();
        let fd = finite_difference_gradient(&net, 1e-6, |p| (&p.predict(x.view()).unwrap() * &w).sum());
        worst = worst.max(max_relative_error(g.as_slice(), &fd, floor));
    }
    for _ in 0..25 {
        let shortcut = rng.random_bool(0.5);
        let net_cfg = VelocityNetConfig {
            n_states: rng.random_range(1..=4),
            n_actions: rng.random_range(1..=3),
            embed: EmbeddingConfig {
                cosine_basis: rng.random_range(1..=8),
                fourier_dim: rng.random_range(1..=6),
                fourier_freqs: rng.random_range(1..=4),
                hlgauss_bins: rng.random_range(2..=12),
                hlgauss_sigma: rng.random_range(0.2..2.0),
                hlgauss_range: (-3.0, 3.0),
                step_embed_dim: rng.random_range(1..=6),
            },
            embed_dim: rng.random_range(1..=8),
            hidden: (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=8)).collect(),
            activation: [Activation::Gelu, Activation::Tanh][rng.random_range(0..2)],
            shortcut,
        };
        let net = VelocityNet::new(net_cfg.clone(), &mut rng).unwrap();
        let queries: Vec<VelocityQuery> = (0..rng.random_range(1..=5))
            .map(|_| VelocityQuery {
                s: rng.random_range(0..net_cfg.n_states),
                a: rng.random_range(0..net_cfg.n_actions),
                tau: rng.random(),
                z: rng.random_range(-3.0..3.0),
                t: rng.random(),
                d: if shortcut { [0.125, 0.25, 0.5, 1.0][rng.random_range(0..4)] } else { 0.0 },
            })
            .collect();
        let w: Vec<f64> = queries.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, cache) = net.forward(&queries).unwrap();
        let grads = net.backward(&cache, &w).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();
        let fd = finite_difference_gradient(&net, 1e-6, |p| velocity_loss(p, &queries, &w));
        worst = worst.max(max_relative_error(&analytic, &fd, floor));
    }
    let passed = worst <= 1e-4;
    let detail = format!("25 MLPs and 25 velocity nets, max relative error {worst:e} (floor {floor:e})");
    report(8, "gradient integrity", passed, &detail, start);
    assert!(passed);
}

#[test]
fn c09_offline_sanity() {
    let start = Instant::now();
    let mut wins = 0;
    let mut zero_support = 0;
    let mut lines = Vec::new();
    for seed in SEEDS {
        let mut cfg = RunConfig {
            seed,
            gradient_steps: 5000,
            eval_every: 5000,
            j: 8,
            ..RunConfig::default()
        };
        cfg.env.kind = EnvKind::MixedWalk;
        let rep = train_offline_rejection(&cfg).unwrap();
        assert!(rep.trace.aborted.is_none(), "{:?}", rep.trace.aborted);
        wins += usize::from(rep.extraction_rollout >= rep.behaviour_rollout);
        zero_support += rep.zero_support_selections;
        lines.push(format!("{:.3}/{:.3}", rep.extraction_rollout, rep.behaviour_rollout));
    }
    let passed = wins >= 4 && zero_support == 0;
    let detail = format!(
        "extraction/behaviour rollout return per seed {}; extraction not worse in {wins} of 5; zero-support selections {zero_support}",
        lines.join(" ")
    );
    report(9, "offline sanity", passed, &detail, start);
    assert!(passed);
}

#[test]
fn c10_determinism() {
    let start = Instant::now();
    let mut same = true;
    let mut names = Vec::new();
    for kind in [CriticKind::FlowIqn, CriticKind::IndependentCfm, CriticKind::Iqn] {
        let mut cfg = RunConfig {
            critic: kind,
            seed: 10,
            gradient_steps: 300,
            eval_every: 100,
            ..RunConfig::default()
        };
        cfg.env.kind = EnvKind::BimodalChain;
        cfg.set("critic.schedule", "adaptive").unwrap();
        cfg.set("critic.sched_every", "50").unwrap();
        let a = train_fixed_policy(&cfg).unwrap().to_csv_string().unwrap();
        let b = train_fixed_policy(&cfg).unwrap().to_csv_string().unwrap();
        same &= a == b;
        names.push(kind.name());
    }
    let mut cfg = RunConfig {
        seed: 10,
        gradient_steps: 200,
        eval_every: 100,
        ..RunConfig::default()
    };
    cfg.env.kind = EnvKind::MixedWalk;
    let a = train_offline_rejection(&cfg).unwrap();
    let b = train_offline_rejection(&cfg).unwrap();
    same &= a.trace.to_csv_string().unwrap() == b.trace.to_csv_string().unwrap() && a.policy == b.policy;
    names.push("offline");
    report(10, "determinism", same, &format!("byte-identical CSV for {}", names.join(", ")), start);
    assert!(same);
}
