use proptest::collection::vec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wcrit_core::approx::{
    finite_difference_gradient, hl_gauss_embed, matrix, max_relative_error, Activation, EmbeddingConfig, NetParams,
    ParamSet, TargetParams,
};
use wcrit_core::dist1d::{
    brute_force_wasserstein, iqm, monotone_coupling, sorted, trimmed_mean, wasserstein_emp, EmpiricalDistribution,
};
use wcrit_core::env::{bimodal_chain, mixed_walk, DistributionalDp, FixedPolicy, TabularMdp};
use wcrit_core::flowcritic::{couple_batch, knots_from_profile, uniform_knots, CouplingMode, FlowCriticConfig, SourceMap};
use wcrit_core::trainers::RunConfig;

fn emp(v: Vec<f64>) -> EmpiricalDistribution {
    EmpiricalDistribution::new(v).unwrap()
}

fn pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (vec(-10.0..10.0f64, n), vec(-10.0..10.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sorted_matching_is_optimal((a, b) in pair(6), p in prop_oneof![Just(1.0), Just(2.0), 1.0..4.0f64]) {
        let (a, b) = (emp(a), emp(b));
        let fast = wasserstein_emp(&a, &b, p).unwrap();
        let brute = brute_force_wasserstein(&a, &b, p).unwrap();
        prop_assert!((fast - brute).abs() <= 1e-12 * brute.max(1.0), "{fast} vs {brute}");
    }

    #[test]
    fn wasserstein_is_a_metric((a, b) in pair(12), c in vec(-10.0..10.0f64, 12)) {
        let n = a.len();
        let (a, b, c) = (emp(a), emp(b), emp(c[..n].to_vec()));
        let d = |x: &EmpiricalDistribution, y: &EmpiricalDistribution| wasserstein_emp(x, y, 2.0).unwrap();
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!((d(&a, &b) - d(&b, &a)).abs() <= 1e-12);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
    }

    #[test]
    fn shifting_moves_w2_by_the_shift(a in vec(-10.0..10.0f64, 1..20), shift in -5.0..5.0f64) {
        let b: Vec<f64> = a.iter().map(|x| x + shift).collect();
        let w = wasserstein_emp(&emp(a), &emp(b), 2.0).unwrap();
        prop_assert!((w - shift.abs()).abs() <= 1e-9);
    }

    #[test]
    fn monotone_coupling_pairs_order_statistics((a, b) in pair(16)) {
        let c = monotone_coupling(&a, &b).unwrap();
        prop_assert!(c.is_monotone());
        let xs: Vec<f64> = c.pairs().iter().map(|p| p.0).collect();
        let ys: Vec<f64> = c.pairs().iter().map(|p| p.1).collect();
        prop_assert_eq!(xs, sorted(&a));
        prop_assert_eq!(ys, sorted(&b));
    }

    #[test]
    fn sorted_critic_coupling_is_monotone_and_keeps_targets(
        (tau, y) in (1..=16usize).prop_flat_map(|k| (vec(0.0..1.0f64, k), vec(-20.0..20.0f64, k))),
        seed in any::<u64>(),
    ) {
        let sm = SourceMap::from_interval(-3.0, 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = couple_batch(1, 0, &tau, &y, &sm, &FlowCriticConfig::default(), &mut rng).unwrap();
        prop_assert!(e.is_monotone());
        prop_assert_eq!(sorted(&e.y), sorted(&y));
        prop_assert_eq!(sorted(&e.tau), sorted(&tau));
        for (t, z) in e.tau.iter().zip(&e.z0) {
            prop_assert!((sm.apply(*t) - z).abs() <= 1e-12);
        }
    }

    #[test]
    fn independent_coupling_keeps_both_multisets(
        (tau, y) in (1..=16usize).prop_flat_map(|k| (vec(0.0..1.0f64, k), vec(-20.0..20.0f64, k))),
        seed in any::<u64>(),
    ) {
        let sm = SourceMap::from_interval(-3.0, 7.0).unwrap();
        let cfg = FlowCriticConfig { coupling_mode: CouplingMode::Independent, ..FlowCriticConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = couple_batch(0, 0, &tau, &y, &sm, &cfg, &mut rng).unwrap();
        prop_assert_eq!(sorted(&e.y), sorted(&y));
        prop_assert_eq!(sorted(&e.tau), sorted(&tau));
    }

    #[test]
    fn hl_gauss_is_a_probability_vector(
        z in -50.0..50.0f64,
        bins in 1..64usize,
        sigma in 1e-4..20.0f64,
        lo in -20.0..0.0f64,
        width in 0.1..30.0f64,
    ) {
        let cfg = EmbeddingConfig { hlgauss_bins: bins, hlgauss_sigma: sigma, hlgauss_range: (lo, lo + width), ..EmbeddingConfig::default() };
        let e = hl_gauss_embed(z, &cfg);
        prop_assert_eq!(e.len(), bins);
        prop_assert!(e.iter().all(|&p| p >= 0.0));
        prop_assert!((e.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ema_moves_the_shadow_by_rho(rho in 0.0..=1.0f64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = NetParams::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let b = NetParams::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
        let mut t = TargetParams::new(&a, rho).unwrap();
        t.ema_update(&b).unwrap();
        let flat = |p: &NetParams| p.tensors().concat();
        for ((s, x), y) in flat(t.params()).iter().zip(flat(&a)).zip(flat(&b)) {
            prop_assert!((s - ((1.0 - rho) * x + rho * y)).abs() <= 1e-12);
        }
        let mut fixed = TargetParams::new(&b, rho).unwrap();
        fixed.ema_update(&b).unwrap();
        prop_assert_eq!(flat(fixed.params()), flat(&b));
    }

    #[test]
    fn knots_partition_the_unit_interval(profile in vec(0.0..100.0f64, 0..40), m in 1..20usize, eps in 1e-6..1.0f64) {
        let k = knots_from_profile(&profile, eps, m).unwrap();
        prop_assert_eq!(k.len(), m + 1);
        prop_assert_eq!(k[0], 0.0);
        prop_assert_eq!(k[m], 1.0);
        prop_assert!(k.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn constant_profile_gives_uniform_knots(c in 0.0..100.0f64, bins in 1..40usize, m in 1..20usize) {
        let k = knots_from_profile(&vec![c; bins], 1e-3, m).unwrap();
        for (a, b) in k.iter().zip(uniform_knots(m).unwrap()) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn backward_matches_finite_differences(seed in any::<u64>(), act in 0..3usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let act = [Activation::Gelu, Activation::Tanh, Activation::Relu][act];
        let net = NetParams::new(&[3, 5, 4, 2], act, Activation::Identity, &mut rng).unwrap();
        let x = matrix(2, 3, vec![0.3, -1.2, 0.7, 1.1, 0.05, -0.4]);
        let w = matrix(2, 2, vec![0.5, -1.0, 0.25, 2.0]);
        let (_, cache) = net.forward(x.view()).unwrap();
        let (g, _) = net.backward(&cache, w.view()).unwrap();
        let fd = finite_difference_gradient(&net, 1e-6, |p| (&p.predict(x.view()).unwrap() * &w).sum());
        prop_assert!(max_relative_error(g.as_slice(), &fd, 1e-5) <= 1e-4);
    }

    #[test]
    fn iqm_lies_between_the_quartiles(v in vec(-100.0..100.0f64, 4..50)) {
        let m = iqm(&v).unwrap();
        let s = sorted(&v);
        prop_assert!(m >= s[v.len() / 4] - 1e-9 && m <= s[v.len() - 1 - v.len() / 4] + 1e-9);
        prop_assert_eq!(trimmed_mean(&v), m);
    }

    #[test]
    fn source_map_is_affine(l in -50.0..50.0f64, w in 0.0..50.0f64, tau in 0.0..=1.0f64) {
        let sm = SourceMap::from_interval(l, l + w).unwrap();
        prop_assert_eq!(sm.apply(0.0), sm.l);
        prop_assert!((sm.apply(1.0) - sm.u).abs() <= 1e-12 * sm.u.abs().max(1.0));
        prop_assert!(sm.apply(tau) >= sm.l - 1e-12 && sm.apply(tau) <= sm.u + 1e-9);
    }

    #[test]
    fn config_survives_a_round_trip(
        gamma in 0.0..0.999f64,
        seed in any::<u64>(),
        k in 1..64usize,
        m in 1..32usize,
        kappa in 0.01..=1.0f64,
        lr in 1e-6..1e-1f64,
        hidden in vec(1..128usize, 1..4),
    ) {
        let mut cfg = RunConfig { gamma, seed, lr, ..RunConfig::default() };
        cfg.flow.k = k;
        cfg.flow.m = m;
        cfg.flow.kappa = kappa;
        cfg.net.hidden = hidden;
        let mut back = RunConfig::default();
        for (key, v) in cfg.to_pairs() {
            back.set(&key, &v).unwrap();
        }
        prop_assert_eq!(back, cfg);
    }
}

#[test]
fn dp_tables_stay_normalized() {
    let mdps: Vec<TabularMdp> = [0.0, 0.5, 0.9, 0.99]
        .iter()
        .flat_map(|&g| [bimodal_chain(g).unwrap(), mixed_walk(g).unwrap()])
        .collect();
    for mdp in &mdps {
        let pol = FixedPolicy::uniform(mdp.n_states(), mdp.n_actions());
        let dp = DistributionalDp::new(mdp, &pol, 101).unwrap();
        let mut t = dp.zero_table();
        for _ in 0..20 {
            t = dp.sweep(&t);
            for row in &t {
                assert!(row.iter().all(|&p| p >= -1e-15));
                assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
