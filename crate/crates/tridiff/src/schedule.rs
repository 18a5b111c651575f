//! Noise schedule for the uniform categorical diffusion process.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid schedule argument: {0}")]
    BadArgument(String),
}

/// Hyperparameters from which a schedule is rebuilt; stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub s: f64,
    pub beta_clip: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            timesteps: 1000,
            s: 0.008,
            beta_clip: 0.999,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, ScheduleError> {
        cosine_schedule(self.timesteps, self.s, self.beta_clip)
    }
}

/// Per-timestep corruption probabilities β_t and the cumulative keep
/// probabilities ᾱ_t = ∏_{s≤t}(1-β_s), with ᾱ_0 = 1.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step corruption probabilities;
    /// ᾱ is the running product of (1-β).
    pub fn from_betas(beta: Vec<f64>) -> Result<Self, ScheduleError> {
        if beta.is_empty() {
            return Err(ScheduleError::BadArgument("empty beta vector".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len() + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for &b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let schedule = NoiseSchedule { beta, alpha_bar };
        validate(&schedule)?;
        Ok(schedule)
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    /// β_t for t in [1, T].
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// ᾱ_t for t in [0, T].
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// Cosine schedule: ᾱ_t = f(t)/f(0) with f(t) = cos²(((t/T + s)/(1+s))·π/2);
/// β_t = 1 - ᾱ_t/ᾱ_{t-1} clipped to `beta_clip`, and ᾱ recomputed from the
/// clipped β so the pair stays self-consistent.
pub fn cosine_schedule(timesteps: usize, s: f64, beta_clip: f64) -> Result<NoiseSchedule, ScheduleError> {
    if timesteps == 0 {
        return Err(ScheduleError::BadArgument("timesteps must be >= 1".into()));
    }
    if s <= 0.0 {
        return Err(ScheduleError::BadArgument("offset s must be > 0".into()));
    }
    if !(0.0 < beta_clip && beta_clip < 1.0) {
        return Err(ScheduleError::BadArgument("beta_clip must lie in (0, 1)".into()));
    }

    let t_max = timesteps as f64;
    let f = |t: f64| {
        let x = ((t / t_max + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);

    let mut beta = Vec::with_capacity(timesteps);
    let mut prev = 1.0;
    for t in 1..=timesteps {
        let ab = f(t as f64) / f0;
        let b = (1.0 - ab / prev).min(beta_clip);
        beta.push(b);
        prev = ab;
    }
    NoiseSchedule::from_betas(beta)
}

fn validate(s: &NoiseSchedule) -> Result<(), ScheduleError> {
    for (i, &b) in s.beta.iter().enumerate() {
        if !(0.0 < b && b < 1.0) {
            return Err(ScheduleError::BadArgument(format!(
                "beta_{} = {b} outside (0, 1)",
                i + 1
            )));
        }
    }
    for w in s.alpha_bar.windows(2) {
        if w[1] >= w[0] {
            return Err(ScheduleError::BadArgument("alpha_bar is not strictly decreasing".into()));
        }
    }
    Ok(())
}
