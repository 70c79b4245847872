//! One-dimensional distributions and optimal transport.
//!
//! All quantile functions use the left-continuous generalized inverse
//! `F^{-1}(tau) = inf { x : F(x) >= tau }`, with `tau = 0` mapped to the
//! smallest support point carrying mass. Every module in the crate shares
//! this convention.

use std::cmp::Ordering;

use crate::error::{usage, Error, Result};

/// Largest sample count the exhaustive bijection oracle accepts.
pub const BRUTE_FORCE_MAX: usize = 8;

/// Probability vectors must sum to one within this tolerance.
pub const PROB_TOL: f64 = 1e-12;

/// Equal-weight sample set, stored in non-decreasing order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalDistribution {
    samples: Vec<f64>,
}

impl EmpiricalDistribution {
    /// Sorts `samples` (stable, total order) and wraps them.
    pub fn new(mut samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(usage!("empirical distribution needs at least one sample"));
        }
        if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
            return Err(usage!("empirical distribution sample {x} is not finite"));
        }
        samples.sort_by(f64::total_cmp);
        Ok(Self { samples })
    }

    pub fn dirac(x: f64) -> Self {
        Self { samples: vec![x] }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    pub fn quantile(&self, tau: f64) -> f64 {
        let n = self.samples.len();
        let idx = quantile_index(n, tau);
        self.samples[idx]
    }

    /// Quantiles on the `(k - 0.5) / n` midpoint grid.
    pub fn resample(&self, n: usize) -> Self {
        let samples = midpoint_grid(n).map(|tau| self.quantile(tau)).collect();
        Self { samples }
    }

    /// Equal-mass categorical view with duplicate samples merged.
    pub fn to_categorical(&self) -> CategoricalDistribution {
        let w = 1.0 / self.samples.len() as f64;
        let mut support: Vec<f64> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        for &x in &self.samples {
            match support.last() {
                Some(&last) if last == x => *probs.last_mut().unwrap() += w,
                _ => {
                    support.push(x);
                    probs.push(w);
                }
            }
        }
        CategoricalDistribution { support, probs }
    }
}

/// Index of the order statistic returned by the generalized inverse CDF.
fn quantile_index(n: usize, tau: f64) -> usize {
    let tau = tau.clamp(0.0, 1.0);
    // Absorb rounding in products such as 0.3 * 10 before taking the ceiling.
    let scaled = tau * n as f64;
    let k = (scaled - 1e-12 * scaled.max(1.0)).ceil();
    (k.max(1.0) as usize).min(n) - 1
}

/// The `(k - 0.5) / n` grid, `k = 1..=n`.
pub fn midpoint_grid(n: usize) -> impl Iterator<Item = f64> {
    (1..=n).map(move |k| (k as f64 - 0.5) / n as f64)
}

/// Distribution on a strictly increasing grid of atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(support: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != probs.len() {
            return Err(usage!(
                "categorical distribution needs matching non-empty support ({}) and probs ({})",
                support.len(),
                probs.len()
            ));
        }
        if support.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(usage!("categorical support must be strictly increasing"));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(usage!("categorical probabilities must be finite and non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(usage!("categorical probabilities sum to {total}, not 1"));
        }
        Ok(Self { support, probs })
    }

    pub fn dirac(x: f64) -> Self {
        Self {
            support: vec![x],
            probs: vec![1.0],
        }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support
            .iter()
            .zip(&self.probs)
            .map(|(x, p)| x * p)
            .sum()
    }

    pub fn quantile(&self, tau: f64) -> f64 {
        let tau = tau.clamp(0.0, 1.0);
        let mut cdf = 0.0;
        let mut last = None;
        for (&x, &p) in self.support.iter().zip(&self.probs) {
            if p <= 0.0 {
                continue;
            }
            cdf += p;
            last = Some(x);
            if cdf >= tau && tau > 0.0 {
                return x;
            }
            if tau == 0.0 {
                return x;
            }
        }
        // Rounding left the cumulative mass marginally below tau.
        last.unwrap_or(self.support[self.support.len() - 1])
    }

    /// `n` equal-mass samples at the `(k - 0.5) / n` quantiles.
    pub fn atomize(&self, n: usize) -> EmpiricalDistribution {
        let mut samples = Vec::with_capacity(n);
        let mut atoms = self
            .support
            .iter()
            .zip(&self.probs)
            .filter(|(_, &p)| p > 0.0)
            .peekable();
        let mut cdf = 0.0;
        let mut current = *atoms.peek().map(|(x, _)| *x).unwrap_or(&self.support[0]);
        for tau in midpoint_grid(n) {
            while cdf < tau {
                match atoms.next() {
                    Some((&x, &p)) => {
                        cdf += p;
                        current = x;
                    }
                    None => break,
                }
            }
            samples.push(current);
        }
        EmpiricalDistribution { samples }
    }

    /// Breakpoints of the quantile function: `(cumulative level, atom)`.
    fn steps(&self) -> Vec<(f64, f64)> {
        let mut cdf = 0.0;
        let mut out: Vec<(f64, f64)> = self
            .support
            .iter()
            .zip(&self.probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&x, &p)| {
                cdf += p;
                (cdf, x)
            })
            .collect();
        if let Some(last) = out.last_mut() {
            last.0 = 1.0;
        }
        out
    }
}

/// Pairs `(source, target)` forming a monotone coupling.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPairs {
    pairs: Vec<(f64, f64)>,
}

impl CoupledPairs {
    pub fn pairs(&self) -> &[(f64, f64)] {
        &self.pairs
    }

    pub fn is_monotone(&self) -> bool {
        self.pairs
            .windows(2)
            .all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1)
    }

    /// Mean `|source - target|^p` over the coupling.
    pub fn cost(&self, p: f64) -> f64 {
        self.pairs.iter().map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Stable argsort under the IEEE total order.
pub fn argsort(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    idx
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Pairs the k-th order statistic of `sources` with the k-th of `targets`.
pub fn monotone_coupling(sources: &[f64], targets: &[f64]) -> Result<CoupledPairs> {
    if sources.len() != targets.len() {
        return Err(usage!(
            "monotone coupling needs equal lengths, got {} and {}",
            sources.len(),
            targets.len()
        ));
    }
    let pairs = sorted(sources).into_iter().zip(sorted(targets)).collect();
    Ok(CoupledPairs { pairs })
}

fn check_order(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(usage!("wasserstein order must be a finite p >= 1, got {p}"));
    }
    Ok(())
}

/// `W_p` between equal-size empirical distributions via order statistics.
pub fn wasserstein_emp(a: &EmpiricalDistribution, b: &EmpiricalDistribution, p: f64) -> Result<f64> {
    check_order(p)?;
    if a.len() != b.len() {
        return Err(usage!(
            "wasserstein_emp needs equal sample counts ({} vs {}); use wasserstein_emp_resampled",
            a.len(),
            b.len()
        ));
    }
    let n = a.len() as f64;
    let cost: f64 = a
        .samples
        .iter()
        .zip(&b.samples)
        .map(|(x, y)| (x - y).abs().powf(p))
        .sum();
    Ok((cost / n).powf(1.0 / p))
}

/// `W_p` for arbitrary sample counts.
///
/// Both sides are resampled onto the common `(k - 0.5) / grid` midpoint grid.
/// With `grid = None` the least common multiple of the two counts is used
/// (capped at 2^20), which makes the result exact.
pub fn wasserstein_emp_resampled(
    a: &EmpiricalDistribution,
    b: &EmpiricalDistribution,
    p: f64,
    grid: Option<usize>,
) -> Result<f64> {
    let k = match grid {
        Some(0) => return Err(usage!("resampling grid must be positive")),
        Some(k) => k,
        None => lcm(a.len(), b.len()).min(1 << 20),
    };
    let (ra, rb) = (a.resample(k), b.resample(k));
    wasserstein_emp(&ra, &rb, p)
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            (a, b) = (b, a % b);
        }
        a
    }
    a / gcd(a, b) * b
}

/// Exact `W_p` between categorical distributions by merging CDF breakpoints.
pub fn wasserstein_cat(a: &CategoricalDistribution, b: &CategoricalDistribution, p: f64) -> Result<f64> {
    check_order(p)?;
    let (sa, sb) = (a.steps(), b.steps());
    let (mut i, mut j) = (0, 0);
    let mut level = 0.0;
    let mut cost = 0.0;
    while i < sa.len() && j < sb.len() {
        let (la, xa) = sa[i];
        let (lb, xb) = sb[j];
        let next = la.min(lb);
        cost += (next - level).max(0.0) * (xa - xb).abs().powf(p);
        level = next;
        match la.partial_cmp(&lb) {
            Some(Ordering::Less) => i += 1,
            Some(Ordering::Greater) => j += 1,
            _ => {
                i += 1;
                j += 1;
            }
        }
    }
    Ok(cost.powf(1.0 / p))
}

/// Minimum mean `|.|^p` cost over every bijection, raised to `1/p`.
///
/// Test oracle for [`wasserstein_emp`]; refuses more than
/// [`BRUTE_FORCE_MAX`] samples.
pub fn brute_force_wasserstein(a: &EmpiricalDistribution, b: &EmpiricalDistribution, p: f64) -> Result<f64> {
    check_order(p)?;
    let n = a.len();
    if n != b.len() {
        return Err(usage!("brute force needs equal sample counts"));
    }
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Refused(format!(
            "{n} samples means {n}! bijections; limit is {BRUTE_FORCE_MAX}"
        )));
    }
    let (xs, ys) = (a.samples(), b.samples());
    let mut perm: Vec<usize> = (0..n).collect();
    let cost_of = |perm: &[usize]| -> f64 {
        xs.iter()
            .zip(perm)
            .map(|(x, &j)| (x - ys[j]).abs().powf(p))
            .sum::<f64>()
    };
    let mut best = cost_of(&perm);
    // Heap's algorithm, iterative form.
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(cost_of(&perm));
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok((best / n as f64).powf(1.0 / p))
}

/// Inter-quartile mean: drops `floor(n/4)` values from each end.
pub fn iqm(values: &[f64]) -> Result<f64> {
    if values.len() < 4 {
        return Err(usage!("iqm needs at least 4 values, got {}", values.len()));
    }
    Ok(trimmed_mean(values))
}

/// The IQM trimming rule applied to any non-empty slice; for fewer than four
/// values nothing is trimmed and this is the plain mean.
pub fn trimmed_mean(values: &[f64]) -> f64 {
    let v = sorted(values);
    let drop = v.len() / 4;
    let kept = &v[drop..v.len() - drop];
    kept.iter().sum::<f64>() / kept.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emp(v: &[f64]) -> EmpiricalDistribution {
        EmpiricalDistribution::new(v.to_vec()).unwrap()
    }

    #[test]
    fn w2_small_example() {
        // Sorted pairing costs 1, the crossed pairing costs 5.
        let w = wasserstein_emp(&emp(&[1.0, 3.0]), &emp(&[2.0, 4.0]), 2.0).unwrap();
        assert!((w - 1.0).abs() < 1e-15);
        let bf = brute_force_wasserstein(&emp(&[1.0, 3.0]), &emp(&[2.0, 4.0]), 2.0).unwrap();
        assert!((bf - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w_identity_and_diracs() {
        let x = emp(&[0.3, -1.0, 2.5]);
        for p in [1.0, 2.0, 3.5] {
            assert_eq!(wasserstein_emp(&x, &x, p).unwrap(), 0.0);
        }
        let w = wasserstein_emp(&emp(&[0.0]), &emp(&[-2.5]), 1.0).unwrap();
        assert_eq!(w, 2.5);
        let bf = brute_force_wasserstein(&emp(&[1.0]), &emp(&[4.0]), 3.0).unwrap();
        assert!((bf - 3.0).abs() < 1e-12);
    }

    #[test]
    fn unequal_counts_need_resampling() {
        let a = emp(&[0.0, 1.0]);
        let b = emp(&[0.0, 1.0, 2.0]);
        assert!(matches!(wasserstein_emp(&a, &b, 1.0), Err(Error::Usage(_))));
        // Exact value via the categorical route.
        let exact = wasserstein_cat(&a.to_categorical(), &b.to_categorical(), 1.0).unwrap();
        let w = wasserstein_emp_resampled(&a, &b, 1.0, None).unwrap();
        assert!((w - exact).abs() < 1e-12, "{w} vs {exact}");
    }

    #[test]
    fn cat_dirac_vs_two_atoms() {
        let d = CategoricalDistribution::dirac(0.0);
        let u = CategoricalDistribution::new(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        assert!((wasserstein_cat(&d, &u, 1.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(wasserstein_cat(&u, &u, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn cat_agrees_with_emp_on_atomized_inputs() {
        let a = emp(&[0.1, 0.1, 0.7, 2.0, 3.0]);
        let b = emp(&[-1.0, 0.5, 0.5, 0.5, 4.0]);
        for p in [1.0, 2.0, 3.0] {
            let we = wasserstein_emp(&a, &b, p).unwrap();
            let wc = wasserstein_cat(&a.to_categorical(), &b.to_categorical(), p).unwrap();
            assert!((we - wc).abs() < 1e-9, "p={p}: {we} vs {wc}");
        }
    }

    #[test]
    fn coupling_sorts_both_sides() {
        let c = monotone_coupling(&[0.7, 0.2], &[5.0, 1.0]).unwrap();
        assert_eq!(c.pairs(), &[(0.2, 1.0), (0.7, 5.0)]);
        let c = monotone_coupling(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(c.pairs(), &[(1.0, 4.0), (2.0, 5.0), (3.0, 6.0)]);
        assert!(matches!(monotone_coupling(&[1.0], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn quantile_convention() {
        let d = emp(&[3.0, 1.0, 2.0]);
        assert_eq!(d.quantile(0.5), 2.0);
        assert_eq!(d.quantile(0.0), 1.0);
        assert_eq!(d.quantile(1.0), 3.0);
        assert_eq!(d.quantile(1.0 / 3.0), 1.0);
        let c = CategoricalDistribution::new(vec![-1.0, 0.0, 1.0], vec![0.5, 0.0, 0.5]).unwrap();
        assert_eq!(c.quantile(0.0), -1.0);
        assert_eq!(c.quantile(0.5), -1.0);
        assert_eq!(c.quantile(0.5000001), 1.0);
        assert_eq!(c.quantile(1.0), 1.0);
    }

    #[test]
    fn atomize_matches_grid_quantiles() {
        let c = CategoricalDistribution::new(vec![-1.0, 0.0, 2.0], vec![0.25, 0.25, 0.5]).unwrap();
        let a = c.atomize(8);
        let expected: Vec<f64> = midpoint_grid(8).map(|t| c.quantile(t)).collect();
        assert_eq!(a.samples(), expected.as_slice());
    }

    #[test]
    fn brute_force_refuses_large_inputs() {
        let x = emp(&[0.0; 9]);
        assert!(matches!(brute_force_wasserstein(&x, &x, 2.0), Err(Error::Refused(_))));
    }

    #[test]
    fn iqm_examples() {
        assert_eq!(iqm(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(iqm(&[0.0, 0.0, 0.0, 100.0]).unwrap(), 0.0);
        assert_eq!(iqm(&[7.5; 9]).unwrap(), 7.5);
        assert!(matches!(iqm(&[1.0, 2.0, 3.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn invalid_categoricals_rejected() {
        assert!(CategoricalDistribution::new(vec![0.0, 0.0], vec![0.5, 0.5]).is_err());
        assert!(CategoricalDistribution::new(vec![0.0, 1.0], vec![0.5, 0.4]).is_err());
        assert!(EmpiricalDistribution::new(vec![]).is_err());
    }
}
