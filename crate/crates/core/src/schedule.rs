//! DDPM noise schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal fractions `alpha_bar_t = prod_{s <= t} (1 - beta_s)` for
/// timesteps `0..T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end`.
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Betas whose square roots are spaced linearly (the latent diffusion
    /// "scaled_linear" schedule).
    pub fn scaled_linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        let root = Self::linear(beta_start.sqrt(), beta_end.sqrt(), steps)?;
        Self::from_betas(root.betas.iter().map(|b| b * b).collect())
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    /// Builds a schedule from an explicit cumulative table, which must be
    /// non-increasing and inside `(0, 1]`.
    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.is_empty() {
            return Err(Error::config("schedule needs at least one timestep"));
        }
        if alphas_cumprod.iter().any(|a| !(*a > 0.0 && *a <= 1.0))
            || alphas_cumprod.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::config(
                "alpha_bar must be non-increasing and inside (0, 1]",
            ));
        }
        let mut prev = 1.0;
        let betas = alphas_cumprod
            .iter()
            .map(|a| {
                let b = 1.0 - a / prev;
                prev = *a;
                b
            })
            .collect();
        Ok(Self {
            betas,
            alphas_cumprod,
        })
    }

    pub fn len(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas_cumprod.is_empty()
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn check(&self, timestep: usize) -> Result<()> {
        if timestep >= self.len() {
            return Err(Error::config(format!(
                "timestep {timestep} outside [0, {})",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn alpha_bar(&self, timestep: usize) -> Result<f64> {
        self.check(timestep)?;
        Ok(self.alphas_cumprod[timestep])
    }
}
