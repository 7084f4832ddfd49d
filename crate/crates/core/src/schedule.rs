//! Discrete variance-preserving noise schedules and the fixed forward process.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sample::Sample;

/// Terminal signal level for the cosine family. Keeps `alpha_T` strictly
/// positive so the clean-sample estimate never divides by zero.
pub const COSINE_ALPHA_FLOOR: f64 = 0.0065;
/// Offset of the cosine family that keeps the first steps from being too small.
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleFamily {
    Cosine,
    Linear,
}

impl std::str::FromStr for ScheduleFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::config(format!("unknown schedule family `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScheduleFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Linear => "linear",
        })
    }
}

/// Serializable identity of a schedule; the arrays are rebuilt from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
pub struct ScheduleDescriptor {
    pub family: ScheduleFamily,
    pub steps: usize,
}

/// Signal levels `alpha_0..alpha_T` and noise variances `sigma2_0..sigma2_T`.
///
/// `alpha_0 = 1`, `sigma2_0 = 0`, alpha strictly decreasing, sigma2 strictly
/// increasing, and `alpha_t^2 + sigma2_t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    family: ScheduleFamily,
    alpha: Vec<f64>,
    sigma2: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, family: ScheduleFamily) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        let alpha = match family {
            ScheduleFamily::Cosine => cosine_alphas(steps),
            ScheduleFamily::Linear => linear_alphas(steps),
        };
        let sigma2: Vec<f64> = alpha.iter().map(|a| 1.0 - a * a).collect();
        let sigma = sigma2.iter().map(|s| s.sqrt()).collect();
        Ok(Self {
            family,
            alpha,
            sigma2,
            sigma,
        })
    }

    pub fn from_descriptor(d: ScheduleDescriptor) -> Result<Self> {
        Self::new(d.steps, d.family)
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            family: self.family,
            steps: self.steps(),
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn family(&self) -> ScheduleFamily {
        self.family
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.sigma2[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigma2s(&self) -> &[f64] {
        &self.sigma2
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::config(format!(
                "step {t} outside schedule of {} steps",
                self.steps()
            )));
        }
        Ok(())
    }

    /// Parameters of `q(x_t | x_s)`: `(alpha_t / alpha_s, sigma2_t - alpha_{t|s}^2 sigma2_s)`.
    pub fn transition_params(&self, t: usize, s: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        if s >= t {
            return Err(Error::config(format!(
                "transition needs s < t, got s = {s}, t = {t}"
            )));
        }
        let alpha_ts = self.alpha[t] / self.alpha[s];
        let sigma2_ts = self.sigma2[t] - alpha_ts * alpha_ts * self.sigma2[s];
        Ok((alpha_ts, sigma2_ts))
    }

    /// `x_t = alpha_t x0 + sigma_t eps`.
    pub fn forward_diffuse(&self, x0: &Sample, t: usize, eps: &Sample) -> Result<Sample> {
        self.check_step(t)?;
        x0.ensure_same_shape(eps)?;
        Ok(x0.lincomb(self.alpha[t], eps, self.sigma[t]))
    }

    /// Variance of the reverse posterior `q(x_s | x_t, x_0)`.
    pub fn posterior_variance(&self, t: usize, s: usize) -> Result<f64> {
        let (_, sigma2_ts) = self.transition_params(t, s)?;
        Ok(sigma2_ts * self.sigma2[s] / self.sigma2[t])
    }
}

fn cosine_alphas(steps: usize) -> Vec<f64> {
    let phase = |t: usize| (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
    let c0 = phase(0).cos();
    (0..=steps)
        .map(|t| {
            if t == 0 {
                1.0
            } else {
                let c = (phase(t).cos() / c0).max(0.0);
                COSINE_ALPHA_FLOOR + (1.0 - COSINE_ALPHA_FLOOR) * c
            }
        })
        .collect()
}

/// Linear beta ramp, rescaled so that short schedules cover the same noise range.
fn linear_alphas(steps: usize) -> Vec<f64> {
    let scale = 1000.0 / steps as f64;
    let start = (1e-4 * scale).min(0.999);
    let end = (0.02 * scale).min(0.999);
    let mut alpha2 = 1.0;
    let mut out = Vec::with_capacity(steps + 1);
    out.push(1.0);
    for i in 0..steps {
        let beta = if steps == 1 {
            end
        } else {
            start + (end - start) * i as f64 / (steps - 1) as f64
        };
        alpha2 *= 1.0 - beta;
        out.push(f64::sqrt(alpha2));
    }
    out
}
