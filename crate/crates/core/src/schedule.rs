//! Linear variance schedule and the per-timestep coefficient tables derived
//! from it.
//!
//! Timesteps are 1-based everywhere in the public API (`t` in `1..=T`); the
//! tables are stored 0-based. `alpha_bar(0)` is defined as 1, which makes the
//! posterior variance at `t = 1` exactly zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const DEFAULT_TIMESTEPS: usize = 1000;

/// Scale of the noise added by a reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReverseVariance {
    /// `sigma_t = sqrt(posterior_variance[t])`.
    #[default]
    Posterior,
    /// `sigma_t = posterior_variance[t]`, the square root omitted. Kept only to
    /// compare against that literal reading of the update rule.
    LegacyUnrooted,
}

/// Parameters that fully determine a schedule; stored in checkpoint headers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus_alpha_bar: Vec<f64>,
    posterior_variance: Vec<f64>,
}

/// `beta_t` rising linearly from 1e-4 at `t = 1` to 0.02 at `t = T`.
pub fn linear_schedule(timesteps: usize) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleSpec {
        timesteps,
        beta_start: BETA_START,
        beta_end: BETA_END,
    })
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        let n = spec.timesteps;
        if n < 2 {
            return Err(Error::InvalidTimesteps(n));
        }
        let (b0, b1) = (spec.beta_start, spec.beta_end);
        if !(b0 > 0.0 && b0 < b1 && b1 < 1.0) {
            return Err(Error::config(
                "schedule",
                format!("need 0 < beta_start < beta_end < 1, got {b0} and {b1}"),
            ));
        }
        // Interpolating as a weighted sum keeps both endpoints exact.
        let beta: Vec<f64> = (0..n)
            .map(|i| {
                let s = i as f64 / (n - 1) as f64;
                b0 * (1.0 - s) + b1 * s
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(n);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a| a.sqrt()).collect();
        let sqrt_one_minus_alpha_bar = alpha_bar.iter().map(|a| (1.0 - a).sqrt()).collect();
        let posterior_variance = (0..n)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]
            })
            .collect();
        Ok(Self {
            spec,
            beta,
            alpha,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus_alpha_bar,
            posterior_variance,
        })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    /// Number of timesteps `T`.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::InvalidTimestep { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    // Accessors below take 1-based `t` and panic outside `1..=T`.

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `alpha_bar(t - 1)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t - 1]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus_alpha_bar[t - 1]
    }

    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variance[t - 1]
    }

    pub fn sigma(&self, t: usize, mode: ReverseVariance) -> f64 {
        match mode {
            ReverseVariance::Posterior => self.posterior_variance(t).sqrt(),
            ReverseVariance::LegacyUnrooted => self.posterior_variance(t),
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}
