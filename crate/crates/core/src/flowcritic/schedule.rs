use crate::error::{usage, Result};

use super::net::{FlowPoint, VelocityModel, VelocityQuery};
use super::source::SourceMap;

/// Finite-difference step for the time derivative of the velocity.
pub const CURVATURE_FD_STEP: f64 = 1e-3;

/// Euler knots `0 = t_0 < ... < t_M = 1` plus the smoothed per-bin
/// curvature profile that adaptive refreshes maintain.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSchedule {
    knots: Vec<f64>,
    curvature_ema: Vec<f64>,
    pub eps: f64,
    /// Weight of the previous estimate in the per-bin moving average.
    pub ema_decay: f64,
    refreshed: bool,
}

impl TimeSchedule {
    pub fn uniform(m: usize) -> Result<Self> {
        Self::from_knots(uniform_knots(m)?)
    }

    pub fn from_knots(knots: Vec<f64>) -> Result<Self> {
        validate_knots(&knots)?;
        Ok(Self {
            knots,
            curvature_ema: Vec::new(),
            eps: 1e-3,
            ema_decay: 0.8,
            refreshed: false,
        })
    }

    /// Uniform knots with an empty curvature profile of `bins` bins.
    pub fn adaptive(m: usize, bins: usize, eps: f64, ema_decay: f64) -> Result<Self> {
        if bins == 0 {
            return Err(usage!("curvature profile needs at least one bin"));
        }
        if !(eps >= 0.0) || !(0.0..1.0).contains(&ema_decay) {
            return Err(usage!("invalid schedule regularizer {eps} or decay {ema_decay}"));
        }
        let mut s = Self::uniform(m)?;
        s.curvature_ema = vec![0.0; bins];
        s.eps = eps;
        s.ema_decay = ema_decay;
        Ok(s)
    }

    /// Replaces the knots, keeping the curvature state.
    pub fn with_knots(mut self, knots: Vec<f64>) -> Result<Self> {
        validate_knots(&knots)?;
        self.knots = knots;
        Ok(self)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn curvature_ema(&self) -> &[f64] {
        &self.curvature_ema
    }

    /// Folds a fresh per-bin curvature measurement into the moving average
    /// and re-derives `m` knots from it.
    pub fn refresh(&mut self, measured: &[f64], m: usize) -> Result<()> {
        if measured.len() != self.curvature_ema.len() {
            return Err(usage!(
                "curvature measurement has {} bins, schedule tracks {}",
                measured.len(),
                self.curvature_ema.len()
            ));
        }
        if self.refreshed {
            let k = self.ema_decay;
            for (e, &c) in self.curvature_ema.iter_mut().zip(measured) {
                *e = k * *e + (1.0 - k) * c;
            }
        } else {
            self.curvature_ema.copy_from_slice(measured);
            self.refreshed = true;
        }
        self.knots = knots_from_profile(&self.curvature_ema, self.eps, m)?;
        Ok(())
    }
}

pub fn uniform_knots(m: usize) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(usage!("a schedule needs at least one Euler step"));
    }
    let mut k: Vec<f64> = (0..=m).map(|i| i as f64 / m as f64).collect();
    k[m] = 1.0;
    Ok(k)
}

fn validate_knots(knots: &[f64]) -> Result<()> {
    if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
        return Err(usage!("schedule knots must run from exactly 0 to exactly 1"));
    }
    if knots.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(usage!("schedule knots must be strictly increasing"));
    }
    Ok(())
}

/// Inverts the cumulative profile `C(t) ~ int_0^t sqrt(c + eps)` of a
/// piecewise-constant curvature on equal bins of `[0, 1]` at `m/M`.
pub fn knots_from_profile(curvature: &[f64], eps: f64, m: usize) -> Result<Vec<f64>> {
    let uniform = uniform_knots(m)?;
    let bins = curvature.len();
    if bins == 0 {
        return Ok(uniform);
    }
    let density: Vec<f64> = curvature
        .iter()
        .map(|&c| if c.is_finite() { (c.max(0.0) + eps).sqrt() } else { 0.0 })
        .collect();
    let mut cum = Vec::with_capacity(bins + 1);
    cum.push(0.0);
    for d in &density {
        cum.push(cum.last().unwrap() + d);
    }
    let total = cum[bins];
    if !(total > 0.0) || !total.is_finite() {
        return Ok(uniform);
    }
    let width = 1.0 / bins as f64;
    let mut knots = vec![0.0; m + 1];
    let mut j = 0;
    for (i, knot) in knots.iter_mut().enumerate().take(m).skip(1) {
        let target = total * i as f64 / m as f64;
        while j + 1 < bins && cum[j + 1] < target {
            j += 1;
        }
        let frac = if density[j] > 0.0 { (target - cum[j]) / density[j] } else { 0.0 };
        *knot = (j as f64 + frac.clamp(0.0, 1.0)) * width;
    }
    knots[m] = 1.0;
    // Profiles with empty bins can collapse neighbouring knots; fall back to
    // the uniform grid rather than emit a degenerate partition.
    if knots.windows(2).any(|w| !(w[0] < w[1])) {
        return Ok(uniform);
    }
    Ok(knots)
}

/// Mean `|dv/dt|` along Euler trajectories of the probes, one value per
/// equal time bin, measured at bin midpoints by central differences of
/// the velocity along the trajectory.
pub fn measure_curvature(
    model: &impl VelocityModel,
    probes: &[FlowPoint],
    sm: &SourceMap,
    bins: usize,
) -> Result<Vec<f64>> {
    if probes.is_empty() || bins == 0 {
        return Err(usage!("curvature measurement needs probes and bins"));
    }
    let h = CURVATURE_FD_STEP;
    let width = 1.0 / bins as f64;
    let mut z: Vec<f64> = probes.iter().map(|p| sm.apply(p.tau)).collect();
    let mut out = Vec::with_capacity(bins);
    let query = |z: &[f64], t: f64| -> Vec<VelocityQuery> {
        probes
            .iter()
            .zip(z)
            .map(|(p, &z)| VelocityQuery {
                s: p.s,
                a: p.a,
                tau: p.tau,
                z,
                t,
                d: 0.0,
            })
            .collect()
    };
    for j in 0..bins {
        let t0 = j as f64 * width;
        let v0 = model.velocities(&query(&z, t0))?;
        let tc = t0 + 0.5 * width;
        let zc: Vec<f64> = z.iter().zip(&v0).map(|(z, v)| z + 0.5 * width * v).collect();
        let vc = model.velocities(&query(&zc, tc))?;
        let zp: Vec<f64> = zc.iter().zip(&vc).map(|(z, v)| z + h * v).collect();
        let zm: Vec<f64> = zc.iter().zip(&vc).map(|(z, v)| z - h * v).collect();
        let vp = model.velocities(&query(&zp, tc + h))?;
        let vm = model.velocities(&query(&zm, tc - h))?;
        let c = vp.iter().zip(&vm).map(|(p, m)| ((p - m) / (2.0 * h)).abs()).sum::<f64>() / probes.len() as f64;
        out.push(c);
        for (zi, vi) in z.iter_mut().zip(&vc) {
            *zi += width * vi;
        }
    }
    Ok(out)
}

/// Measures curvature on the probes and returns the refreshed schedule.
pub fn update_schedule(
    model: &impl VelocityModel,
    probes: &[FlowPoint],
    sm: &SourceMap,
    schedule: &TimeSchedule,
    m: usize,
) -> Result<TimeSchedule> {
    let bins = schedule.curvature_ema().len();
    if bins == 0 {
        return Err(usage!("schedule was not created in adaptive mode"));
    }
    let measured = measure_curvature(model, probes, sm, bins)?;
    let mut next = schedule.clone();
    next.refresh(&measured, m)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowcritic::net::FnField;

    #[test]
    fn constant_curvature_is_uniform() {
        for m in [1, 3, 4, 8] {
            let k = knots_from_profile(&[2.5; 16], 0.0, m).unwrap();
            for (i, x) in k.iter().enumerate() {
                assert!((x - i as f64 / m as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_level_profile() {
        let k = knots_from_profile(&[4.0, 1.0], 0.0, 2).unwrap();
        assert!((k[1] - 0.375).abs() < 1e-12, "{k:?}");
    }

    #[test]
    fn zero_curvature_without_eps_is_uniform() {
        assert_eq!(knots_from_profile(&[0.0; 8], 0.0, 4).unwrap(), uniform_knots(4).unwrap());
    }

    #[test]
    fn sparse_profile_stays_valid() {
        let mut c = vec![0.0; 10];
        c[3] = 5.0;
        let k = knots_from_profile(&c, 0.0, 6).unwrap();
        assert!(k.windows(2).all(|w| w[0] < w[1]));
        assert_eq!((k[0], k[6]), (0.0, 1.0));
    }

    #[test]
    fn from_knots_validates() {
        assert!(TimeSchedule::from_knots(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeSchedule::from_knots(vec![0.1, 1.0]).is_err());
        assert!(TimeSchedule::uniform(0).is_err());
    }

    #[test]
    fn curvature_of_quadratic_time_field() {
        // v = t^2 has dv/dt = 2t, so the bin-midpoint estimates are 2 t_c.
        let f = FnField::new(|q: &VelocityQuery| q.t * q.t);
        let sm = SourceMap::from_interval(0.0, 1.0).unwrap();
        let probes = [FlowPoint { s: 0, a: 0, tau: 0.3 }];
        let c = measure_curvature(&f, &probes, &sm, 4).unwrap();
        for (j, cj) in c.iter().enumerate() {
            let tc = (j as f64 + 0.5) / 4.0;
            assert!((cj - 2.0 * tc).abs() < 1e-6, "{cj}");
        }
        let mut s = TimeSchedule::adaptive(4, 4, 0.0, 0.5).unwrap();
        s = update_schedule(&f, &probes, &sm, &s, 4).unwrap();
        assert!(s.knots()[1] > 0.25, "low-curvature start gets a wider first step");
    }
}
