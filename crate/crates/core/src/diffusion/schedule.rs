//! Noise schedule and the closed-form forward diffusion.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use serde::{Deserialize, Serialize};

/// Linear beta schedule parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

/// Precomputed betas and cumulative alpha products for timesteps 1..=T, with
/// the alpha_bar(0) = 1 convention.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    timesteps: usize,
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(config: &ScheduleConfig) -> Result<Self> {
        let t = config.timesteps;
        if t == 0 {
            return Err(Error::config("schedule requires T >= 1"));
        }
        if !(config.beta_start > 0.0 && config.beta_start <= config.beta_end && config.beta_end < 1.0)
        {
            return Err(Error::config(format!(
                "invalid beta range [{}, {}]",
                config.beta_start, config.beta_end
            )));
        }
        let betas: Vec<f64> = (0..t)
            .map(|i| {
                if t == 1 {
                    config.beta_start
                } else {
                    config.beta_start
                        + (config.beta_end - config.beta_start) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alphas_cumprod = Vec::with_capacity(t);
        let mut acc = 1.0f64;
        for &b in &betas {
            acc *= 1.0 - b;
            alphas_cumprod.push(acc);
        }
        let schedule = NoiseSchedule { timesteps: t, betas, alphas_cumprod };
        schedule.validate()?;
        Ok(schedule)
    }

    fn validate(&self) -> Result<()> {
        for w in self.betas.windows(2) {
            if w[0] > w[1] {
                return Err(Error::config("betas must be non-decreasing"));
            }
        }
        for w in self.alphas_cumprod.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config("alpha_bar must be strictly decreasing"));
            }
        }
        Ok(())
    }

    pub fn t_max(&self) -> usize {
        self.timesteps
    }

    /// beta_t for t in 1..=T.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of alphas up to t, with alpha_bar(0) = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alphas_cumprod[t - 1]
        }
    }
}

/// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps.
pub fn forward_diffuse<T: Real>(
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 || t > schedule.t_max() {
        return Err(Error::input(format!("timestep {t} outside [1, {}]", schedule.t_max())));
    }
    if z0.shape() != eps.shape() {
        return Err(Error::shape("forward_diffuse: eps shape differs from z0"));
    }
    let ab = schedule.alpha_bar(t);
    let signal = T::from_f64(ab.sqrt());
    let noise = T::from_f64((1.0 - ab).sqrt());
    z0.scale(signal).add(&eps.scale(noise))
}

/// Ascending DDIM sub-schedule of `steps` distinct timesteps in [1, t_max],
/// ending at t_max. With steps == t_max, every timestep appears exactly once.
pub fn ddim_timesteps(t_max: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > t_max {
        return Err(Error::config(format!("sampling steps {steps} outside [1, {t_max}]")));
    }
    let mut ts: Vec<usize> = (1..=steps)
        .map(|i| ((i as f64) * (t_max as f64) / (steps as f64)).round() as usize)
        .map(|t| t.clamp(1, t_max))
        .collect();
    ts.dedup();
    if ts.len() != steps {
        return Err(Error::config("degenerate DDIM sub-schedule"));
    }
    Ok(ts)
}
