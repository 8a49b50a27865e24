//! The diffusion stack seen by the trainer and the evaluator.
//!
//! A backend bundles a text encoder, an image-to-latent encoder, a noise
//! schedule and a denoiser architecture with its pretrained weights. Two
//! implementations exist: the self-contained [`toy`] world used for desk-scale
//! verification, and adapters to external pretrained latent diffusion models
//! (in a separate crate).

use candle_core::{DType, Device, Tensor};
use image::DynamicImage;

use crate::error::{Error, Result};
use crate::manifold::{TextEncoder, NORM_EPS};
use crate::nn::{layer_norm, FrozenParams, ParamSource, ParamStore};
use crate::schedule::NoiseSchedule;

pub mod sampler;
pub mod toy;

pub use sampler::SamplerConfig;

/// Predicts the noise in a latent.
pub trait Denoiser {
    /// `latent` is `B x C x H x W`, `cond` is `B x L x d`; the result has the
    /// latent's shape.
    fn predict_noise(&self, latent: &Tensor, timestep: usize, cond: &Tensor) -> Result<Tensor>;
}

/// A denoiser whose weights live in a trainable store.
pub struct TrainableDenoiser {
    pub params: ParamStore,
    pub net: Box<dyn Denoiser>,
}

pub trait DiffusionBackend {
    /// Locator string this backend was loaded from.
    fn locator(&self) -> String;

    fn device(&self) -> &Device;

    fn dtype(&self) -> DType;

    fn text_encoder(&self) -> &dyn TextEncoder;

    /// Encodes one image to a `C x H x W` latent.
    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor>;

    /// Decodes a `B x C x H x W` batch of latents.
    fn decode_latents(&self, latents: &Tensor) -> Result<Vec<DynamicImage>>;

    /// `(C, H, W)` of the latent space.
    fn latent_shape(&self) -> (usize, usize, usize);

    fn schedule(&self) -> &NoiseSchedule;

    /// Pretrained denoiser weights.
    fn pretrained(&self) -> &FrozenParams;

    /// Instantiates the denoiser architecture over the given parameters.
    fn build_denoiser(&self, params: &mut dyn ParamSource) -> Result<Box<dyn Denoiser>>;

    fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig::default()
    }

    /// Whether a denoiser parameter belongs to the text-conditioning
    /// (cross-attention) path.
    fn is_conditioning_param(&self, name: &str) -> bool {
        name.contains("attn2")
    }

    /// Frozen copy of the pretrained denoiser. Later trainable updates never
    /// reach it.
    fn snapshot(&self) -> Result<Box<dyn Denoiser>> {
        let mut params = self.pretrained().clone();
        self.build_denoiser(&mut params)
    }

    /// Trainable copy of the pretrained denoiser.
    fn trainable(&self) -> Result<TrainableDenoiser> {
        let mut params = self.pretrained().to_store()?;
        let net = self.build_denoiser(&mut params)?;
        Ok(TrainableDenoiser { params, net })
    }

    /// Normalized `(L, d)` conditioning for a prompt, prepared the same way as
    /// prompt-bank entries.
    fn condition(&self, prompt: &str) -> Result<Tensor> {
        layer_norm(&self.text_encoder().encode(prompt)?, NORM_EPS)
    }

    /// Generates one image per `(prompt, seed)` pair with `denoiser`.
    fn sample(
        &self,
        denoiser: &dyn Denoiser,
        prompts: &[String],
        seeds: &[u64],
    ) -> Result<Vec<DynamicImage>> {
        if prompts.len() != seeds.len() {
            return Err(Error::contract("one seed per prompt required"));
        }
        let uncond = self.condition("")?;
        let conds = prompts
            .iter()
            .map(|p| self.condition(p))
            .collect::<Result<Vec<_>>>()?;
        let latents = sampler::ddpm_sample(
            denoiser,
            self.schedule(),
            self.latent_shape(),
            &conds,
            &uncond,
            seeds,
            &self.sampler_config(),
        )?;
        self.decode_latents(&latents)
    }
}

/// Shape and schedule checks every backend must pass.
pub fn check_contract(backend: &dyn DiffusionBackend, prompts: &[&str]) -> Result<()> {
    let ab = backend.schedule().alphas_cumprod();
    if ab.is_empty() || ab.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
        return Err(Error::Backend("schedule entries must lie in (0, 1]".into()));
    }
    if ab.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Backend("schedule must be non-increasing".into()));
    }
    let mut shape = None;
    for p in prompts {
        let e = backend.text_encoder().encode(p)?;
        if *shape.get_or_insert_with(|| e.dims().to_vec()) != e.dims() {
            return Err(Error::EncoderContract(format!(
                "text embedding shape for {p:?} is {:?}, expected {:?}",
                e.dims(),
                shape
            )));
        }
    }
    let (c, h, w) = backend.latent_shape();
    let latent = Tensor::zeros((1, c, h, w), backend.dtype(), backend.device())?;
    let cond = backend
        .condition(prompts.first().copied().unwrap_or(""))?
        .unsqueeze(0)?;
    let frozen = backend.snapshot()?;
    let out = frozen.predict_noise(&latent, 0, &cond)?;
    if out.dims() != latent.dims() {
        return Err(Error::Backend(format!(
            "denoiser output {:?} differs from latent {:?}",
            out.dims(),
            latent.dims()
        )));
    }
    Ok(())
}
