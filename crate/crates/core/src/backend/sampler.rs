//! Ancestral DDPM sampling with classifier-free guidance.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::Denoiser;
use crate::error::{Error, Result};
use crate::fusion::standard_normal;
use crate::rng;
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    /// Clamp the predicted clean latent to `[-c, c]` at every step.
    pub clip_sample: Option<f64>,
    /// Images generated per denoiser call.
    pub batch: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance_scale: 7.5,
            clip_sample: None,
            batch: 1,
        }
    }
}

/// Runs the full reverse chain for each `(cond, seed)` pair and returns the
/// final latents stacked as `B x C x H x W`.
///
/// Each image draws its initial latent and per-step noise from its own seeded
/// stream, so an image does not depend on what it was batched with beyond
/// floating-point summation order.
pub fn ddpm_sample(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    latent_shape: (usize, usize, usize),
    conds: &[Tensor],
    uncond: &Tensor,
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Tensor> {
    if conds.len() != seeds.len() {
        return Err(Error::contract("one seed per conditioning required"));
    }
    let mut chunks = Vec::new();
    let batch = config.batch.max(1);
    for (cond_chunk, seed_chunk) in conds.chunks(batch).zip(seeds.chunks(batch)) {
        chunks.push(sample_chunk(
            denoiser,
            schedule,
            latent_shape,
            cond_chunk,
            uncond,
            seed_chunk,
            config,
        )?);
    }
    if chunks.is_empty() {
        let (c, h, w) = latent_shape;
        return Ok(Tensor::zeros(
            (0, c, h, w),
            uncond.dtype(),
            uncond.device(),
        )?);
    }
    Ok(Tensor::cat(&chunks, 0)?)
}

fn sample_chunk(
    denoiser: &dyn Denoiser,
    schedule: &NoiseSchedule,
    (c, h, w): (usize, usize, usize),
    conds: &[Tensor],
    uncond: &Tensor,
    seeds: &[u64],
    config: &SamplerConfig,
) -> Result<Tensor> {
    let b = conds.len();
    let mut streams: Vec<_> = seeds.iter().map(|s| rng::stream(*s, "sample", 0)).collect();
    let draw = |streams: &mut Vec<rng::Rng>| -> Result<Tensor> {
        let parts = streams
            .iter_mut()
            .map(|r| standard_normal(&[1, c, h, w], uncond, r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };
    let cond = Tensor::stack(conds, 0)?;
    let (l, d) = uncond.dims2()?;
    let uncond_b = uncond.unsqueeze(0)?.broadcast_as((b, l, d))?;
    let both = Tensor::cat(&[&cond, &uncond_b], 0)?.contiguous()?;

    let ab = schedule.alphas_cumprod();
    let betas = schedule.betas();
    let mut x = draw(&mut streams)?;
    for t in (0..schedule.len()).rev() {
        let eps_both = denoiser.predict_noise(&Tensor::cat(&[&x, &x], 0)?, t, &both)?;
        let eps_c = eps_both.narrow(0, 0, b)?;
        let eps_u = eps_both.narrow(0, b, b)?;
        let eps = (&eps_u + ((eps_c - &eps_u)? * config.guidance_scale)?)?;

        let abar = ab[t];
        let abar_prev = if t == 0 { 1.0 } else { ab[t - 1] };
        let mut x0 = ((&x - (eps * (1.0 - abar).sqrt())?)? / abar.sqrt())?;
        if let Some(clip) = config.clip_sample {
            x0 = x0.clamp(-clip, clip)?;
        }
        if t == 0 {
            x = x0;
            break;
        }
        let beta = betas[t];
        let coef_x0 = beta * abar_prev.sqrt() / (1.0 - abar);
        let coef_xt = (1.0 - abar_prev) * (1.0 - beta).sqrt() / (1.0 - abar);
        let mean = ((x0 * coef_x0)? + (&x * coef_xt)?)?;
        let var = beta * (1.0 - abar_prev) / (1.0 - abar);
        x = (mean + (draw(&mut streams)? * var.sqrt())?)?;
    }
    Ok(x)
}
