//! The conditional velocity network `v(t, z | s, a, tau)` and a trait that
//! lets losses and integrators run against analytic stand-in fields.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::approx::{
    cosine_embed_into, fourier_features_into, fourier_frequencies, hl_gauss_embed_into, Activation, EmbeddingConfig,
    ForwardCache, Gradients, NetParams, ParamSet,
};
use crate::error::{config_err, usage, Error, Result};

/// One velocity evaluation point. `d` is the shortcut step size and is
/// ignored by fields without step conditioning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocityQuery {
    pub s: usize,
    pub a: usize,
    pub tau: f64,
    pub z: f64,
    pub t: f64,
    pub d: f64,
}

/// Conditioning of one integrated trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowPoint {
    pub s: usize,
    pub a: usize,
    pub tau: f64,
}

/// Anything that can act as a velocity field.
pub trait VelocityModel {
    /// Whether the field is conditioned on a step size.
    fn shortcut(&self) -> bool;

    fn velocities(&self, queries: &[VelocityQuery]) -> Result<Vec<f64>>;

    /// Forward Euler over `knots` starting at `z0`. Shortcut fields are
    /// queried with the step size of each interval.
    fn integrate(&self, points: &[FlowPoint], z0: &[f64], knots: &[f64]) -> Result<Vec<f64>> {
        if points.len() != z0.len() {
            return Err(usage!("integrate: {} points but {} start values", points.len(), z0.len()));
        }
        let mut z = z0.to_vec();
        let mut queries: Vec<VelocityQuery> = points
            .iter()
            .map(|p| VelocityQuery {
                s: p.s,
                a: p.a,
                tau: p.tau,
                z: 0.0,
                t: 0.0,
                d: 0.0,
            })
            .collect();
        for (m, w) in knots.windows(2).enumerate() {
            let dt = w[1] - w[0];
            for (q, &zi) in queries.iter_mut().zip(&z) {
                q.z = zi;
                q.t = w[0];
                q.d = dt;
            }
            let v = self.velocities(&queries)?;
            for (zi, vi) in z.iter_mut().zip(v) {
                *zi += dt * vi;
            }
            check_finite(&z, m)?;
        }
        Ok(z)
    }
}

fn check_finite(z: &[f64], step: usize) -> Result<()> {
    if let Some(bad) = z.iter().find(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            step,
            what: format!("Euler iterate became {bad}"),
        });
    }
    Ok(())
}

/// Analytic velocity field backed by a closure.
pub struct FnField<F> {
    f: F,
    shortcut: bool,
}

impl<F: Fn(&VelocityQuery) -> f64> FnField<F> {
    pub fn new(f: F) -> Self {
        Self { f, shortcut: false }
    }

    pub fn shortcut(f: F) -> Self {
        Self { f, shortcut: true }
    }
}

impl<F: Fn(&VelocityQuery) -> f64> VelocityModel for FnField<F> {
    fn shortcut(&self) -> bool {
        self.shortcut
    }

    fn velocities(&self, queries: &[VelocityQuery]) -> Result<Vec<f64>> {
        Ok(queries.iter().map(&self.f).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNetConfig {
    pub n_states: usize,
    pub n_actions: usize,
    pub embed: EmbeddingConfig,
    /// Width of the shared state-action / quantile embedding.
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub shortcut: bool,
}

impl VelocityNetConfig {
    pub fn validate(&self) -> Result<()> {
        self.embed.validate()?;
        if self.n_states == 0 || self.n_actions == 0 {
            return Err(config_err!("velocity net needs at least one state and action"));
        }
        if self.embed_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(config_err!("velocity net widths must be positive"));
        }
        Ok(())
    }

    fn trunk_input(&self) -> usize {
        let step = if self.shortcut { self.embed.step_embed_dim } else { 0 };
        self.embed_dim + self.embed.hlgauss_bins + self.embed.fourier_dim + step
    }
}

/// State-action embedding multiplied by the cosine quantile embedding, then
/// concatenated with HL-Gauss value features, a learned projection of
/// Fourier time features and, for shortcut fields, a projection of Fourier
/// step-size features, followed by a dense trunk with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    cfg: VelocityNetConfig,
    sa: NetParams,
    tau: NetParams,
    time: NetParams,
    step: Option<NetParams>,
    trunk: NetParams,
    freqs: Vec<f64>,
}

/// Gradients of a [`VelocityNet`], in the same tensor order.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityGrads {
    pub sa: Gradients,
    pub tau: Gradients,
    pub time: Gradients,
    pub step: Option<Gradients>,
    pub trunk: Gradients,
}

impl VelocityGrads {
    pub fn add_assign(&mut self, other: &VelocityGrads, scale: f64) {
        self.sa.add_assign(&other.sa, scale);
        self.tau.add_assign(&other.tau, scale);
        self.time.add_assign(&other.time, scale);
        if let (Some(a), Some(b)) = (self.step.as_mut(), other.step.as_ref()) {
            a.add_assign(b, scale);
        }
        self.trunk.add_assign(&other.trunk, scale);
    }

    pub fn scale(&mut self, k: f64) {
        self.sa.scale(k);
        self.tau.scale(k);
        self.time.scale(k);
        if let Some(g) = self.step.as_mut() {
            g.scale(k);
        }
        self.trunk.scale(k);
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0))
    }
}

impl ParamSet for VelocityGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.sa.as_slice(), self.tau.as_slice(), self.time.as_slice()];
        if let Some(g) = &self.step {
            out.push(g.as_slice());
        }
        out.push(self.trunk.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.sa.tensors_mut());
        out.extend(self.tau.tensors_mut());
        out.extend(self.time.tensors_mut());
        if let Some(g) = self.step.as_mut() {
            out.extend(g.tensors_mut());
        }
        out.extend(self.trunk.tensors_mut());
        out
    }
}

impl ParamSet for VelocityNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.sa.as_slice(), self.tau.as_slice(), self.time.as_slice()];
        if let Some(n) = &self.step {
            out.push(n.as_slice());
        }
        out.push(self.trunk.as_slice());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.sa.tensors_mut());
        out.extend(self.tau.tensors_mut());
        out.extend(self.time.tensors_mut());
        if let Some(n) = self.step.as_mut() {
            out.extend(n.tensors_mut());
        }
        out.extend(self.trunk.tensors_mut());
        out
    }
}

/// Everything [`VelocityNet::backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct VelocityCache {
    sa_out: Array2<f64>,
    tau_out: Array2<f64>,
    sa_cache: ForwardCache,
    tau_cache: ForwardCache,
    time_cache: ForwardCache,
    step_cache: Option<ForwardCache>,
    trunk_cache: ForwardCache,
}

impl VelocityNet {
    pub fn new(cfg: VelocityNetConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let act = cfg.activation;
        let e = &cfg.embed;
        let sa = NetParams::new(&[cfg.n_states + cfg.n_actions, cfg.embed_dim], act, act, rng)?;
        let tau = NetParams::new(&[e.cosine_basis, cfg.embed_dim], act, act, rng)?;
        let time = NetParams::new(&[e.fourier_raw_dim(), e.fourier_dim], act, act, rng)?;
        let step = if cfg.shortcut {
            Some(NetParams::new(&[e.fourier_raw_dim(), e.step_embed_dim], act, act, rng)?)
        } else {
            None
        };
        let mut dims = vec![cfg.trunk_input()];
        dims.extend(&cfg.hidden);
        dims.push(1);
        let trunk = NetParams::new(&dims, act, Activation::Identity, rng)?;
        let freqs = fourier_frequencies(e.fourier_freqs);
        Ok(Self {
            cfg,
            sa,
            tau,
            time,
            step,
            trunk,
            freqs,
        })
    }

    pub fn config(&self) -> &VelocityNetConfig {
        &self.cfg
    }

    /// The sub-networks in checkpoint order: state-action, quantile, time,
    /// optional step, trunk.
    pub fn subnets(&self) -> Vec<&NetParams> {
        let mut out = vec![&self.sa, &self.tau, &self.time];
        if let Some(n) = &self.step {
            out.push(n);
        }
        out.push(&self.trunk);
        out
    }

    /// Rebuilds a network from sub-networks in [`Self::subnets`] order.
    pub fn from_subnets(cfg: VelocityNetConfig, nets: Vec<NetParams>) -> Result<Self> {
        cfg.validate()?;
        let expected = if cfg.shortcut { 5 } else { 4 };
        if nets.len() != expected {
            return Err(usage!("expected {expected} sub-networks, got {}", nets.len()));
        }
        let mut it = nets.into_iter();
        let sa = it.next().unwrap();
        let tau = it.next().unwrap();
        let time = it.next().unwrap();
        let step = if cfg.shortcut { it.next() } else { None };
        let trunk = it.next().unwrap();
        if sa.input_dim() != cfg.n_states + cfg.n_actions
            || tau.input_dim() != cfg.embed.cosine_basis
            || trunk.input_dim() != cfg.trunk_input()
            || trunk.output_dim() != 1
        {
            return Err(usage!("sub-network shapes do not match the velocity net config"));
        }
        let freqs = fourier_frequencies(cfg.embed.fourier_freqs);
        Ok(Self {
            cfg,
            sa,
            tau,
            time,
            step,
            trunk,
            freqs,
        })
    }

    pub fn zero_grads(&self) -> VelocityGrads {
        VelocityGrads {
            sa: self.sa.zero_gradients(),
            tau: self.tau.zero_gradients(),
            time: self.time.zero_gradients(),
            step: self.step.as_ref().map(NetParams::zero_gradients),
            trunk: self.trunk.zero_gradients(),
        }
    }

    fn check_point(&self, s: usize, a: usize) -> Result<()> {
        if s >= self.cfg.n_states || a >= self.cfg.n_actions {
            return Err(usage!(
                "state-action ({s},{a}) outside the net's {}x{} table",
                self.cfg.n_states,
                self.cfg.n_actions
            ));
        }
        Ok(())
    }

    fn sa_features(&self, points: impl Iterator<Item = (usize, usize)>, n: usize) -> Array2<f64> {
        let width = self.cfg.n_states + self.cfg.n_actions;
        let mut x = Array2::zeros((n, width));
        for (i, (s, a)) in points.enumerate() {
            x[[i, s]] = 1.0;
            x[[i, self.cfg.n_states + a]] = 1.0;
        }
        x
    }

    fn tau_features(&self, taus: impl Iterator<Item = f64>, n: usize) -> Array2<f64> {
        let width = self.cfg.embed.cosine_basis;
        let mut x = Array2::zeros((n, width));
        for (mut row, tau) in x.axis_iter_mut(Axis(0)).zip(taus) {
            cosine_embed_into(tau, row.as_slice_mut().expect("row-major"));
        }
        x
    }

    fn fourier_rows(&self, values: impl Iterator<Item = f64>, n: usize) -> Array2<f64> {
        let width = 2 * self.freqs.len();
        let mut x = Array2::zeros((n, width));
        for (mut row, v) in x.axis_iter_mut(Axis(0)).zip(values) {
            fourier_features_into(v, &self.freqs, row.as_slice_mut().expect("row-major"));
        }
        x
    }

    fn hl_rows(&self, z: impl Iterator<Item = f64>, n: usize) -> Array2<f64> {
        let mut x = Array2::zeros((n, self.cfg.embed.hlgauss_bins));
        for (mut row, zi) in x.axis_iter_mut(Axis(0)).zip(z) {
            hl_gauss_embed_into(zi, &self.cfg.embed, row.as_slice_mut().expect("row-major"));
        }
        x
    }

    /// Learned projection of the Fourier features of `t`.
    pub fn time_embedding(&self, t: f64) -> Vec<f64> {
        let x = self.fourier_rows(std::iter::once(t), 1);
        self.time.predict(x.view()).expect("time net shape").iter().copied().collect()
    }

    /// Full forward pass with a cache for [`Self::backward`].
    pub fn forward(&self, queries: &[VelocityQuery]) -> Result<(Vec<f64>, VelocityCache)> {
        let n = queries.len();
        for q in queries {
            self.check_point(q.s, q.a)?;
        }
        let sa_in = self.sa_features(queries.iter().map(|q| (q.s, q.a)), n);
        let (sa_out, sa_cache) = self.sa.forward(sa_in.view())?;
        let tau_in = self.tau_features(queries.iter().map(|q| q.tau), n);
        let (tau_out, tau_cache) = self.tau.forward(tau_in.view())?;
        let time_in = self.fourier_rows(queries.iter().map(|q| q.t), n);
        let (time_out, time_cache) = self.time.forward(time_in.view())?;
        let step = match &self.step {
            Some(net) => {
                let x = self.fourier_rows(queries.iter().map(|q| q.d), n);
                Some(net.forward(x.view())?)
            }
            None => None,
        };
        let hl = self.hl_rows(queries.iter().map(|q| q.z), n);

        let mut blocks: Vec<ArrayView2<'_, f64>> = Vec::with_capacity(4);
        let cond = &sa_out * &tau_out;
        blocks.push(cond.view());
        blocks.push(hl.view());
        blocks.push(time_out.view());
        if let Some((out, _)) = &step {
            blocks.push(out.view());
        }
        let trunk_in = ndarray::concatenate(Axis(1), &blocks).map_err(|e| usage!("{e}"))?;
        let (out, trunk_cache) = self.trunk.forward(trunk_in.view())?;
        Ok((
            out.iter().copied().collect(),
            VelocityCache {
                sa_out,
                tau_out,
                sa_cache,
                tau_cache,
                time_cache,
                step_cache: step.map(|(_, c)| c),
                trunk_cache,
            },
        ))
    }

    /// Gradients of `sum_i grad_out[i] * v_i`.
    pub fn backward(&self, cache: &VelocityCache, grad_out: &[f64]) -> Result<VelocityGrads> {
        let n = grad_out.len();
        let g = Array2::from_shape_vec((n, 1), grad_out.to_vec()).map_err(|e| usage!("{e}"))?;
        let (trunk, g_in) = self.trunk.backward(&cache.trunk_cache, g.view())?;
        let e = self.cfg.embed_dim;
        let bins = self.cfg.embed.hlgauss_bins;
        let fd = self.cfg.embed.fourier_dim;
        let g_cond = g_in.slice(s![.., 0..e]);
        let g_time = g_in.slice(s![.., e + bins..e + bins + fd]);
        let g_sa = &g_cond * &cache.tau_out;
        let g_tau = &g_cond * &cache.sa_out;
        let (sa, _) = self.sa.backward(&cache.sa_cache, g_sa.view())?;
        let (tau, _) = self.tau.backward(&cache.tau_cache, g_tau.view())?;
        let (time, _) = self.time.backward(&cache.time_cache, g_time)?;
        let step = match (&self.step, &cache.step_cache) {
            (Some(net), Some(c)) => {
                let g_step = g_in.slice(s![.., e + bins + fd..]);
                Some(net.backward(c, g_step)?.0)
            }
            _ => None,
        };
        Ok(VelocityGrads {
            sa,
            tau,
            time,
            step,
            trunk,
        })
    }

    /// Rows of the trunk's first weight matrix for one input block.
    fn first_block(&self, start: usize, len: usize) -> ArrayView2<'_, f64> {
        self.trunk.weight(0).slice_move(s![start..start + len, ..])
    }

    /// Constant part of the trunk's first pre-activation for each trajectory:
    /// the conditioning block times its weights, plus the bias.
    fn conditioning_preactivation(&self, points: &[FlowPoint]) -> Result<Array2<f64>> {
        let n = points.len();
        for p in points {
            self.check_point(p.s, p.a)?;
        }
        let sa_in = self.sa_features(points.iter().map(|p| (p.s, p.a)), n);
        let tau_in = self.tau_features(points.iter().map(|p| p.tau), n);
        let cond = self.sa.predict(sa_in.view())? * self.tau.predict(tau_in.view())?;
        let w = self.first_block(0, self.cfg.embed_dim);
        Ok(cond.dot(&w) + &self.trunk.bias(0))
    }

    /// Time (and step) contribution to the trunk's first pre-activation.
    fn shared_preactivation(&self, t: f64, d: f64) -> ndarray::Array1<f64> {
        let e = self.cfg.embed_dim;
        let bins = self.cfg.embed.hlgauss_bins;
        let fd = self.cfg.embed.fourier_dim;
        let time_emb = self.time.predict(self.fourier_rows(std::iter::once(t), 1).view()).expect("time net");
        let mut pre = time_emb.dot(&self.first_block(e + bins, fd)).row(0).to_owned();
        if let Some(net) = &self.step {
            let step_emb = net.predict(self.fourier_rows(std::iter::once(d), 1).view()).expect("step net");
            let sd = self.cfg.embed.step_embed_dim;
            pre += &step_emb.dot(&self.first_block(e + bins + fd, sd)).row(0);
        }
        pre
    }

    fn velocities_with_cond(&self, cond_pre: &Array2<f64>, z: &[f64], t: f64, d: f64) -> Vec<f64> {
        let e = self.cfg.embed_dim;
        let bins = self.cfg.embed.hlgauss_bins;
        let hl = self.hl_rows(z.iter().copied(), z.len());
        let mut pre = hl.dot(&self.first_block(e, bins));
        pre += cond_pre;
        pre += &self.shared_preactivation(t, d);
        self.trunk.predict_from_preactivation(pre).iter().copied().collect()
    }

    /// Velocities of many values at a common `(t, d)`.
    pub fn velocities_at(&self, points: &[FlowPoint], z: &[f64], t: f64, d: f64) -> Result<Vec<f64>> {
        let cond = self.conditioning_preactivation(points)?;
        Ok(self.velocities_with_cond(&cond, z, t, d))
    }
}

impl VelocityModel for VelocityNet {
    fn shortcut(&self) -> bool {
        self.cfg.shortcut
    }

    fn velocities(&self, queries: &[VelocityQuery]) -> Result<Vec<f64>> {
        Ok(self.forward(queries)?.0)
    }

    fn integrate(&self, points: &[FlowPoint], z0: &[f64], knots: &[f64]) -> Result<Vec<f64>> {
        if points.len() != z0.len() {
            return Err(usage!("integrate: {} points but {} start values", points.len(), z0.len()));
        }
        let cond = self.conditioning_preactivation(points)?;
        let mut z = z0.to_vec();
        for (m, w) in knots.windows(2).enumerate() {
            let dt = w[1] - w[0];
            let v = self.velocities_with_cond(&cond, &z, w[0], dt);
            for (zi, vi) in z.iter_mut().zip(v) {
                *zi += dt * vi;
            }
            check_finite(&z, m)?;
        }
        Ok(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config(shortcut: bool) -> VelocityNetConfig {
        VelocityNetConfig {
            n_states: 3,
            n_actions: 2,
            embed: EmbeddingConfig {
                cosine_basis: 8,
                fourier_dim: 6,
                fourier_freqs: 4,
                hlgauss_bins: 7,
                hlgauss_sigma: 0.5,
                hlgauss_range: (-3.0, 3.0),
                step_embed_dim: 5,
            },
            embed_dim: 6,
            hidden: vec![10, 8],
            activation: Activation::Gelu,
            shortcut,
        }
    }

    fn queries(rng: &mut impl Rng, n: usize) -> Vec<VelocityQuery> {
        (0..n)
            .map(|_| VelocityQuery {
                s: rng.random_range(0..3),
                a: rng.random_range(0..2),
                tau: rng.random(),
                z: rng.random_range(-2.0..2.0),
                t: rng.random(),
                d: rng.random_range(0.0..0.5),
            })
            .collect()
    }

    #[test]
    fn fast_paths_match_full_forward() {
        for shortcut in [false, true] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let net = VelocityNet::new(small_config(shortcut), &mut rng).unwrap();
            let qs = queries(&mut rng, 9);
            let full = net.velocities(&qs).unwrap();
            for (q, v) in qs.iter().zip(&full) {
                let p = [FlowPoint { s: q.s, a: q.a, tau: q.tau }];
                let fast = net.velocities_at(&p, &[q.z], q.t, q.d).unwrap()[0];
                assert!((fast - v).abs() < 1e-12, "{fast} vs {v}");
            }
            let points: Vec<FlowPoint> = qs.iter().map(|q| FlowPoint { s: q.s, a: q.a, tau: q.tau }).collect();
            let z0: Vec<f64> = qs.iter().map(|q| q.z).collect();
            let knots = [0.0, 0.1, 0.5, 1.0];
            let generic = {
                struct Slow<'a>(&'a VelocityNet);
                impl VelocityModel for Slow<'_> {
                    fn shortcut(&self) -> bool {
                        self.0.shortcut()
                    }
                    fn velocities(&self, q: &[VelocityQuery]) -> Result<Vec<f64>> {
                        self.0.velocities(q)
                    }
                }
                Slow(&net).integrate(&points, &z0, &knots).unwrap()
            };
            let fast = net.integrate(&points, &z0, &knots).unwrap();
            for (a, b) in generic.iter().zip(&fast) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_state_is_usage_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = VelocityNet::new(small_config(false), &mut rng).unwrap();
        let q = VelocityQuery { s: 7, a: 0, tau: 0.5, z: 0.0, t: 0.0, d: 0.0 };
        assert!(matches!(net.velocities(&[q]), Err(Error::Usage(_))));
    }

    #[test]
    fn subnets_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = VelocityNet::new(small_config(true), &mut rng).unwrap();
        let parts: Vec<NetParams> = net.subnets().into_iter().cloned().collect();
        let back = VelocityNet::from_subnets(small_config(true), parts).unwrap();
        assert_eq!(back.tensors(), net.tensors());
    }

    #[test]
    fn time_embedding_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = VelocityNet::new(small_config(false), &mut rng).unwrap();
        assert_eq!(net.time_embedding(0.3).len(), 6);
        assert_eq!(net.time_embedding(0.3), net.time_embedding(0.3));
    }
}
