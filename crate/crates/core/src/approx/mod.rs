//! A small differentiable function-approximation stack: dense networks with
//! exact reverse-mode gradients, fixed embeddings, Adam, and EMA targets.

mod checkpoint;
mod embed;
mod mlp;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use embed::{
    cosine_embed, cosine_embed_into, fourier_features, fourier_features_into, fourier_frequencies, hl_gauss_embed,
    hl_gauss_embed_into, EmbeddingConfig,
};
pub use mlp::{column, matrix, row_view, Activation, ForwardCache, Gradients, NetParams};

use crate::error::{usage, Result};

/// A collection of parameter tensors that optimizers can walk in order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

fn check_same_shape(a: &[&[f64]], b: &[&[f64]]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err(usage!("parameter and gradient shapes differ"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments for one [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &impl ParamSet, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut impl ParamSet, grads: &impl ParamSet) -> Result<()> {
        let grads = grads.tensors();
        {
            let p = params.tensors();
            check_same_shape(&p, &grads)?;
            let moments: Vec<&[f64]> = self.first.iter().map(Vec::as_slice).collect();
            check_same_shape(&p, &moments)?;
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Slowly tracking shadow copy of online parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetParams<P> {
    shadow: P,
    rho: f64,
}

impl<P: ParamSet + Clone> TargetParams<P> {
    pub fn new(online: &P, rho: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(usage!("smoothing coefficient {rho} must lie in [0, 1]"));
        }
        Ok(Self {
            shadow: online.clone(),
            rho,
        })
    }

    pub fn params(&self) -> &P {
        &self.shadow
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// `shadow <- (1 - rho) * shadow + rho * online`.
    pub fn ema_update(&mut self, online: &P) -> Result<()> {
        let src = online.tensors();
        check_same_shape(&self.shadow.tensors(), &src)?;
        let rho = self.rho;
        if rho == 0.0 {
            return Ok(());
        }
        for (dst, src) in self.shadow.tensors_mut().into_iter().zip(src) {
            if rho == 1.0 {
                dst.copy_from_slice(src);
                continue;
            }
            // Incremental form keeps a shadow equal to the online value fixed.
            for (d, s) in dst.iter_mut().zip(src) {
                *d += rho * (s - *d);
            }
        }
        Ok(())
    }
}

/// Central finite differences of `loss` with respect to every parameter,
/// flattened in [`ParamSet::tensors`] order.
pub fn finite_difference_gradient<P, F>(params: &P, h: f64, mut loss: F) -> Vec<f64>
where
    P: ParamSet + Clone,
    F: FnMut(&P) -> f64,
{
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let mut out = Vec::with_capacity(shapes.iter().sum());
    for (ti, &n) in shapes.iter().enumerate() {
        for i in 0..n {
            let x = probe.tensors()[ti][i];
            probe.tensors_mut()[ti][i] = x + h;
            let up = loss(&probe);
            probe.tensors_mut()[ti][i] = x - h;
            let down = loss(&probe);
            probe.tensors_mut()[ti][i] = x;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64) -> NetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetParams::new(&[3, 4, 1], Activation::Gelu, Activation::Identity, &mut rng).unwrap()
    }

    #[test]
    fn finite_differences_of_quadratic() {
        let p = NetParams::from_flat(&[2, 1], Activation::Identity, Activation::Identity, vec![1.0, -2.0, 0.5]).unwrap();
        let fd = finite_difference_gradient(&p, 1e-6, |q| q.as_slice().iter().map(|x| x * x).sum());
        let want: Vec<f64> = p.as_slice().iter().map(|x| 2.0 * x).collect();
        assert!(max_relative_error(&fd, &want, 1e-8) < 1e-8);
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.5, 0.0], 1e-8), 1.0 / 3.0);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = net(0);
        let before = p.clone();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let g = p.zero_gradients();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.as_slice(), before.as_slice());
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut p = NetParams::zeros(&[2, 1], Activation::Identity, Activation::Identity).unwrap();
        let cfg = AdamConfig::default();
        let mut adam = AdamState::new(&p, cfg.clone());
        let mut g = p.zero_gradients();
        g.tensors_mut()[0].copy_from_slice(&[0.5, -2.0, 1e-3]);
        adam.step(&mut p, &g).unwrap();
        for (x, gi) in p.as_slice().iter().zip(g.as_slice()) {
            let expected = -cfg.lr * gi / (gi.abs() + cfg.eps);
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
        }
    }

    #[test]
    fn adam_is_deterministic() {
        let mut a = net(1);
        let mut b = net(1);
        let mut g = a.zero_gradients();
        g.tensors_mut()[0].iter_mut().enumerate().for_each(|(i, x)| *x = (i as f64).sin());
        let mut sa = AdamState::new(&a, AdamConfig::default());
        let mut sb = sa.clone();
        sa.step(&mut a, &g).unwrap();
        sb.step(&mut b, &g).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(sa, sb);
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = net(2);
        let other = NetParams::zeros(&[2, 1], Activation::Identity, Activation::Identity).unwrap();
        let mut adam = AdamState::new(&p, AdamConfig::default());
        assert!(adam.step(&mut p, &other.zero_gradients()).is_err());
    }

    #[test]
    fn ema_limits() {
        let online = net(3);
        let start = net(4);
        let mut t = TargetParams::new(&start, 1.0).unwrap();
        t.ema_update(&online).unwrap();
        assert_eq!(t.params().as_slice(), online.as_slice());

        let mut t = TargetParams::new(&start, 0.0).unwrap();
        t.ema_update(&online).unwrap();
        assert_eq!(t.params().as_slice(), start.as_slice());

        let mut t = TargetParams::new(&online, 0.3).unwrap();
        t.ema_update(&online).unwrap();
        assert_eq!(t.params().as_slice(), online.as_slice());

        assert!(TargetParams::new(&online, 1.5).is_err());
    }
}
