//! FlowIQN critic: a velocity field transporting quantile fractions, mapped
//! into a return interval, onto return samples, trained against sorted
//! Bellman targets.

mod coupling;
mod critic;
mod distill;
mod loss;
mod net;
mod schedule;
mod source;

pub use coupling::{bellman_targets, check_next_actions, couple_batch, next_action, pair_in_order, CoupledBatch, CoupledEntry, TargetSamples};
pub use critic::{
    integrate, integrate_many, sample_return_distribution, scalarize, scalarize_many, sidecar_path, FlowCritic,
    VelocityField,
};
pub use distill::{distill_student, QuantileStudent};
pub use loss::{
    combined_loss, consistency_draws, flowiqn_loss, flowiqn_loss_value, shortcut_consistency_loss,
    shortcut_consistency_value, shortcut_one_step, shortcut_residuals, shortcut_two_steps, single_step_loss,
    single_step_outputs, ConsistencyDraw,
};
pub use net::{FlowPoint, FnField, VelocityCache, VelocityGrads, VelocityModel, VelocityNet, VelocityNetConfig, VelocityQuery};
pub use schedule::{
    knots_from_profile, measure_curvature, uniform_knots, update_schedule, TimeSchedule, CURVATURE_FD_STEP,
};
pub use source::{compute_bounds, source_map, SourceMap};

use crate::error::{config_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Uniform,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CouplingMode {
    /// Pair order statistics of sources and targets.
    Sorted,
    /// Pair sources and targets through an independent random permutation.
    Independent,
}

/// Where the source fractions of a coupled pair come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TauMode {
    /// The fractions that generated the Bellman targets.
    Reuse,
    /// A fresh uniform draw.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleAgg {
    Mean,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Random,
    Grid,
}

macro_rules! named_enum {
    ($ty:ty { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn name(self) -> &'static str {
                match self { $(Self::$variant => $name),+ }
            }

            pub fn from_name(s: &str) -> Option<Self> {
                match s { $($name => Some(Self::$variant),)+ _ => None }
            }
        }
    };
}

named_enum!(ScheduleMode { Uniform => "uniform", Adaptive => "adaptive" });
named_enum!(CouplingMode { Sorted => "sorted", Independent => "independent" });
named_enum!(TauMode { Reuse => "reuse", Fresh => "fresh" });
named_enum!(EnsembleAgg { Mean => "mean", Min => "min" });
named_enum!(SampleMode { Random => "random", Grid => "grid" });

#[derive(Debug, Clone, PartialEq)]
pub struct FlowCriticConfig {
    /// Target samples per transition.
    pub k: usize,
    /// Euler steps.
    pub m: usize,
    pub kappa: f64,
    pub gamma: f64,
    pub lambda_c: f64,
    pub shortcut_enabled: bool,
    pub shortcut_step_sizes: Vec<f64>,
    pub schedule_mode: ScheduleMode,
    pub ensemble_size: usize,
    pub ensemble_agg: EnsembleAgg,
    pub coupling_mode: CouplingMode,
    pub tau_reuse: TauMode,
    /// Gradient steps between adaptive schedule refreshes.
    pub sched_every: usize,
    pub sched_eps: f64,
    pub sched_bins: usize,
    pub sched_ema: f64,
    /// Fractions per scalarization.
    pub k_grid: usize,
}

impl Default for FlowCriticConfig {
    fn default() -> Self {
        Self {
            k: 16,
            m: 8,
            kappa: 0.1,
            gamma: 0.99,
            lambda_c: 0.3,
            shortcut_enabled: false,
            shortcut_step_sizes: vec![0.5, 0.25, 0.125],
            schedule_mode: ScheduleMode::Uniform,
            ensemble_size: 1,
            ensemble_agg: EnsembleAgg::Mean,
            coupling_mode: CouplingMode::Sorted,
            tau_reuse: TauMode::Reuse,
            sched_every: 1000,
            sched_eps: 1e-3,
            sched_bins: 16,
            sched_ema: 0.8,
            k_grid: 16,
        }
    }
}

impl FlowCriticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.k_grid == 0 || self.ensemble_size == 0 {
            return Err(config_err!("K, M, k_grid and ensemble size must be at least 1"));
        }
        if !(self.kappa > 0.0 && self.kappa <= 1.0) {
            return Err(config_err!("kappa {} must lie in (0, 1]", self.kappa));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(config_err!("gamma {} must lie in [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda_c) {
            return Err(config_err!("lambda_c {} must lie in [0, 1]", self.lambda_c));
        }
        if self.shortcut_step_sizes.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(config_err!("shortcut step sizes must lie in (0, 1]"));
        }
        if self.schedule_mode == ScheduleMode::Adaptive {
            if self.sched_every == 0 || self.sched_bins == 0 {
                return Err(config_err!("adaptive schedules need sched_every and sched_bins of at least 1"));
            }
            if !(self.sched_eps >= 0.0) || !(0.0..1.0).contains(&self.sched_ema) {
                return Err(config_err!("invalid schedule regularizer or decay"));
            }
        }
        Ok(())
    }

    /// The schedule a fresh critic starts from.
    pub fn initial_schedule(&self) -> Result<TimeSchedule> {
        match self.schedule_mode {
            ScheduleMode::Uniform => TimeSchedule::uniform(self.m),
            ScheduleMode::Adaptive => TimeSchedule::adaptive(self.m, self.sched_bins, self.sched_eps, self.sched_ema),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
}

fn parse_named<T>(key: &str, value: &str, f: fn(&str) -> Option<T>) -> std::result::Result<T, String> {
    f(value.trim()).ok_or_else(|| format!("{key}: unknown value {value:?}"))
}

impl FlowCriticConfig {
    /// Keys accepted by [`Self::set`], in the order [`Self::to_pairs`] emits
    /// them.
    pub const KEYS: &'static [&'static str] = &[
        "K",
        "M",
        "kappa",
        "gamma",
        "lambda_c",
        "shortcut",
        "step_sizes",
        "schedule",
        "ensemble",
        "ensemble_agg",
        "coupling",
        "tau_reuse",
        "sched_every",
        "sched_eps",
        "sched_bins",
        "sched_ema",
        "k_grid",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "K" => self.k = parse_value(key, value)?,
            "M" => self.m = parse_value(key, value)?,
            "kappa" => self.kappa = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "lambda_c" => self.lambda_c = parse_value(key, value)?,
            "shortcut" => self.shortcut_enabled = parse_value(key, value)?,
            "step_sizes" => {
                self.shortcut_step_sizes = value
                    .split(',')
                    .map(|v| parse_value(key, v))
                    .collect::<std::result::Result<_, _>>()?
            }
            "schedule" => self.schedule_mode = parse_named(key, value, ScheduleMode::from_name)?,
            "ensemble" => self.ensemble_size = parse_value(key, value)?,
            "ensemble_agg" => self.ensemble_agg = parse_named(key, value, EnsembleAgg::from_name)?,
            "coupling" => self.coupling_mode = parse_named(key, value, CouplingMode::from_name)?,
            "tau_reuse" => self.tau_reuse = parse_named(key, value, TauMode::from_name)?,
            "sched_every" => self.sched_every = parse_value(key, value)?,
            "sched_eps" => self.sched_eps = parse_value(key, value)?,
            "sched_bins" => self.sched_bins = parse_value(key, value)?,
            "sched_ema" => self.sched_ema = parse_value(key, value)?,
            "k_grid" => self.k_grid = parse_value(key, value)?,
            _ => return Err(format!("unknown critic key {key:?}")),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let steps: Vec<String> = self.shortcut_step_sizes.iter().map(|d| d.to_string()).collect();
        vec![
            ("K", self.k.to_string()),
            ("M", self.m.to_string()),
            ("kappa", self.kappa.to_string()),
            ("gamma", self.gamma.to_string()),
            ("lambda_c", self.lambda_c.to_string()),
            ("shortcut", self.shortcut_enabled.to_string()),
            ("step_sizes", steps.join(",")),
            ("schedule", self.schedule_mode.name().to_string()),
            ("ensemble", self.ensemble_size.to_string()),
            ("ensemble_agg", self.ensemble_agg.name().to_string()),
            ("coupling", self.coupling_mode.name().to_string()),
            ("tau_reuse", self.tau_reuse.name().to_string()),
            ("sched_every", self.sched_every.to_string()),
            ("sched_eps", self.sched_eps.to_string()),
            ("sched_bins", self.sched_bins.to_string()),
            ("sched_ema", self.sched_ema.to_string()),
            ("k_grid", self.k_grid.to_string()),
        ]
    }
}
