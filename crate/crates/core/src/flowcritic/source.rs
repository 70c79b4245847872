use crate::error::{config_err, Result};

/// Affine map from quantile fractions into the return interval `[l, u]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceMap {
    pub kappa: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub l: f64,
    pub u: f64,
}

impl SourceMap {
    /// A map over an explicit interval, used when no reward range exists
    /// (synthetic targets).
    pub fn from_interval(l: f64, u: f64) -> Result<Self> {
        if !(l <= u) || !l.is_finite() || !u.is_finite() {
            return Err(config_err!("source interval [{l}, {u}] is invalid"));
        }
        let (l, u) = widen(l, u);
        Ok(Self {
            kappa: 1.0,
            q_min: l,
            q_max: u,
            l,
            u,
        })
    }

    pub fn width(&self) -> f64 {
        self.u - self.l
    }

    pub fn apply(&self, tau: f64) -> f64 {
        self.l + tau * (self.u - self.l)
    }
}

fn widen(l: f64, u: f64) -> (f64, f64) {
    if l < u {
        (l, u)
    } else {
        (u - 1e-6 * u.abs().max(1.0), u)
    }
}

/// `u = r_max / (1 - gamma)`, `l = u - kappa (u - r_min / (1 - gamma))`.
///
/// A zero-width interval is widened downwards by `1e-6 max(1, |u|)`.
pub fn compute_bounds(r_min: f64, r_max: f64, gamma: f64, kappa: f64) -> Result<SourceMap> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(config_err!("discount {gamma} must lie in [0, 1)"));
    }
    if !(kappa > 0.0 && kappa <= 1.0) {
        return Err(config_err!("source scale kappa {kappa} must lie in (0, 1]"));
    }
    if !(r_min <= r_max) || !r_min.is_finite() || !r_max.is_finite() {
        return Err(config_err!("reward range [{r_min}, {r_max}] is invalid"));
    }
    let q_max = r_max / (1.0 - gamma);
    let q_min = r_min / (1.0 - gamma);
    let (l, u) = widen(q_max - kappa * (q_max - q_min), q_max);
    Ok(SourceMap {
        kappa,
        q_min,
        q_max,
        l,
        u,
    })
}

pub fn source_map(sm: &SourceMap, tau: f64) -> f64 {
    sm.apply(tau)
}
