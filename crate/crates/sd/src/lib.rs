//! Stable Diffusion behind the eraser backend contract.
//!
//! A locator names a diffusers-layout model directory, optionally prefixed
//! with the architecture version:
//!
//! ```text
//! sd1.5:/models/stable-diffusion-v1-5
//! sd1.4:/models/stable-diffusion-v1-4
//! sd2.0-base:/models/stable-diffusion-2-base
//! /models/stable-diffusion-v1-5          (same as sd1.5:)
//! ```
//!
//! The directory must contain `tokenizer/tokenizer.json`,
//! `text_encoder/model.safetensors`, `vae/diffusion_pytorch_model.safetensors`
//! and `unet/diffusion_pytorch_model.safetensors`. `scheduler/scheduler_config.json`
//! is optional; without it the usual scaled-linear schedule (0.00085 to 0.012
//! over 1000 steps) is used. Only epsilon-prediction models are supported.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{self, ClipTextTransformer};
use candle_transformers::models::stable_diffusion::vae::{AutoEncoderKL, AutoEncoderKLConfig};
use eraser_core::backend::{Denoiser, DiffusionBackend, SamplerConfig};
use eraser_core::manifold::TextEncoder;
use eraser_core::nn::{FrozenParams, Init, ParamSource};
use eraser_core::schedule::NoiseSchedule;
use eraser_core::{Error, Result};
use image::{imageops::FilterType, DynamicImage, RgbImage};
use serde::Deserialize;

pub mod unet;

use unet::{BlockConfig, UNet2DConditionModel, UNet2DConditionModelConfig};

/// Latent scaling used by every Stable Diffusion 1.x/2.x autoencoder.
pub const LATENT_SCALE: f64 = 0.18215;

const TOKENIZER: &str = "tokenizer/tokenizer.json";
const TEXT_ENCODER: &str = "text_encoder/model.safetensors";
const VAE: &str = "vae/diffusion_pytorch_model.safetensors";
const UNET: &str = "unet/diffusion_pytorch_model.safetensors";
const SCHEDULER: &str = "scheduler/scheduler_config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdVersion {
    V1_4,
    V1_5,
    V2_0Base,
}

impl SdVersion {
    pub fn prefix(self) -> &'static str {
        match self {
            SdVersion::V1_4 => "sd1.4",
            SdVersion::V1_5 => "sd1.5",
            SdVersion::V2_0Base => "sd2.0-base",
        }
    }

    fn clip_config(self) -> clip::Config {
        match self {
            SdVersion::V1_4 | SdVersion::V1_5 => clip::Config::v1_5(),
            SdVersion::V2_0Base => clip::Config::v2_1(),
        }
    }

    pub fn unet_config(self) -> UNet2DConditionModelConfig {
        let bc = |out_channels, use_cross_attn, attention_head_dim| BlockConfig {
            out_channels,
            use_cross_attn,
            attention_head_dim,
        };
        let (heads, cross_attention_dim, use_linear_projection) = match self {
            SdVersion::V1_4 | SdVersion::V1_5 => ([8, 8, 8, 8], 768, false),
            SdVersion::V2_0Base => ([5, 10, 20, 20], 1024, true),
        };
        UNet2DConditionModelConfig {
            blocks: vec![
                bc(320, Some(1), heads[0]),
                bc(640, Some(1), heads[1]),
                bc(1280, Some(1), heads[2]),
                bc(1280, None, heads[3]),
            ],
            center_input_sample: false,
            cross_attention_dim,
            downsample_padding: 1,
            flip_sin_to_cos: true,
            freq_shift: 0.,
            layers_per_block: 2,
            mid_block_scale_factor: 1.,
            norm_eps: 1e-5,
            norm_num_groups: 32,
            sliced_attention_size: None,
            use_linear_projection,
        }
    }

    pub fn vae_config(self) -> AutoEncoderKLConfig {
        AutoEncoderKLConfig {
            block_out_channels: vec![128, 256, 512, 512],
            layers_per_block: 2,
            latent_channels: 4,
            norm_num_groups: 32,
            use_quant_conv: true,
            use_post_quant_conv: true,
        }
    }
}

/// Splits a locator into version and model directory.
pub fn parse_locator(locator: &str) -> Result<(SdVersion, PathBuf)> {
    let locator = locator.trim();
    if locator.is_empty() {
        return Err(Error::Load("empty model locator".into()));
    }
    if locator.starts_with("toy:") {
        return Err(Error::Load(format!(
            "{locator:?} is a toy locator, not a Stable Diffusion model"
        )));
    }
    for version in [SdVersion::V1_4, SdVersion::V1_5, SdVersion::V2_0Base] {
        if let Some(rest) = locator
            .strip_prefix(version.prefix())
            .and_then(|r| r.strip_prefix(':'))
        {
            if rest.is_empty() {
                return Err(Error::Load(format!(
                    "locator {locator:?} names no directory"
                )));
            }
            return Ok((version, PathBuf::from(rest)));
        }
    }
    if let Some((prefix, _)) = locator.split_once(':') {
        if prefix.starts_with("sd") {
            return Err(Error::Load(format!(
                "unknown model version {prefix:?}; expected sd1.4, sd1.5 or sd2.0-base"
            )));
        }
    }
    Ok((SdVersion::V1_5, PathBuf::from(locator)))
}

#[derive(Debug, Deserialize)]
struct SchedulerFile {
    #[serde(default = "default_train_steps")]
    num_train_timesteps: usize,
    #[serde(default = "default_beta_start")]
    beta_start: f64,
    #[serde(default = "default_beta_end")]
    beta_end: f64,
    #[serde(default = "default_beta_schedule")]
    beta_schedule: String,
    #[serde(default = "default_prediction")]
    prediction_type: String,
}

fn default_train_steps() -> usize {
    1000
}
fn default_beta_start() -> f64 {
    0.00085
}
fn default_beta_end() -> f64 {
    0.012
}
fn default_beta_schedule() -> String {
    "scaled_linear".into()
}
fn default_prediction() -> String {
    "epsilon".into()
}

/// Builds the training noise schedule from a diffusers scheduler config.
pub fn schedule_from_json(text: &str) -> Result<NoiseSchedule> {
    let file: SchedulerFile = serde_json::from_str(text)?;
    if file.prediction_type != "epsilon" {
        return Err(Error::Load(format!(
            "prediction type {:?} is not supported; the erasure objective needs epsilon prediction",
            file.prediction_type
        )));
    }
    match file.beta_schedule.as_str() {
        "scaled_linear" => {
            NoiseSchedule::scaled_linear(file.beta_start, file.beta_end, file.num_train_timesteps)
        }
        "linear" => NoiseSchedule::linear(file.beta_start, file.beta_end, file.num_train_timesteps),
        other => Err(Error::Load(format!("unsupported beta schedule {other:?}"))),
    }
}

fn load_err(what: &str, path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Load(format!("{what} at {}: {e}", path.display()))
}

/// CLIP text encoder with its tokenizer, padded to the full context length.
pub struct ClipEncoder {
    tokenizer: tokenizers::Tokenizer,
    model: ClipTextTransformer,
    pad_id: u32,
    max_len: usize,
    device: Device,
    dtype: DType,
}

impl ClipEncoder {
    fn load(
        version: SdVersion,
        tokenizer: &Path,
        weights: &Path,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let config = version.clip_config();
        let tokenizer = tokenizers::Tokenizer::from_file(tokenizer)
            .map_err(|e| load_err("tokenizer", tokenizer, e))?;
        let pad = config
            .pad_with
            .clone()
            .unwrap_or_else(|| "<|endoftext|>".into());
        let pad_id = *tokenizer
            .get_vocab(true)
            .get(pad.as_str())
            .ok_or_else(|| Error::Load(format!("tokenizer has no padding token {pad:?}")))?;
        // SAFETY: the weights file is not modified while mapped.
        let vb = unsafe { VarBuilder::from_mmaped_safetensors(&[weights], dtype, device) }
            .map_err(|e| load_err("text encoder", weights, e))?;
        let model = ClipTextTransformer::new(vb, &config)
            .map_err(|e| load_err("text encoder", weights, e))?;
        Ok(Self {
            tokenizer,
            model,
            pad_id,
            max_len: config.max_position_embeddings,
            device: device.clone(),
            dtype,
        })
    }
}

impl TextEncoder for ClipEncoder {
    fn encode(&self, prompt: &str) -> Result<Tensor> {
        let encoding = self
            .tokenizer
            .encode(prompt, true)
            .map_err(|e| Error::Backend(format!("tokenizing {prompt:?}: {e}")))?;
        let mut ids = encoding.get_ids().to_vec();
        ids.truncate(self.max_len);
        ids.resize(self.max_len, self.pad_id);
        let ids = Tensor::new(ids.as_slice(), &self.device)?.unsqueeze(0)?;
        Ok(self.model.forward(&ids)?.squeeze(0)?.to_dtype(self.dtype)?)
    }
}

/// Builds the autoencoder so that encoding returns the posterior mean.
///
/// The posterior's log-variance channels are pinned to a large negative value,
/// which makes its `sample()` (drawn from candle's unseeded RNG) collapse to the
/// mean exactly.
pub fn deterministic_vae(
    mut tensors: HashMap<String, Tensor>,
    config: AutoEncoderKLConfig,
    dtype: DType,
    device: &Device,
) -> Result<AutoEncoderKL> {
    if !config.use_quant_conv {
        return Err(Error::Load(
            "autoencoders without quant_conv are not supported".into(),
        ));
    }
    let c = config.latent_channels;
    let weight = tensors
        .get("quant_conv.weight")
        .ok_or_else(|| Error::Load("autoencoder is missing quant_conv.weight".into()))?;
    let bias = tensors
        .get("quant_conv.bias")
        .ok_or_else(|| Error::Load("autoencoder is missing quant_conv.bias".into()))?;
    let weight = Tensor::cat(
        &[
            weight.narrow(0, 0, c)?,
            weight.narrow(0, c, c)?.zeros_like()?,
        ],
        0,
    )?;
    let bias = Tensor::cat(
        &[
            bias.narrow(0, 0, c)?,
            (bias.narrow(0, c, c)?.zeros_like()? - 1e4)?,
        ],
        0,
    )?;
    tensors.insert("quant_conv.weight".into(), weight);
    tensors.insert("quant_conv.bias".into(), bias);
    let tensors = tensors
        .into_iter()
        .map(|(k, v)| Ok((k, v.to_dtype(dtype)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    let vb = VarBuilder::from_tensors(tensors, dtype, device);
    Ok(AutoEncoderKL::new(vb, 3, 3, config)?)
}

/// The UNet over parameters pulled from a [`ParamSource`].
pub struct SdDenoiser {
    unet: UNet2DConditionModel,
}

impl SdDenoiser {
    /// `shapes` lists every tensor the UNet may request.
    pub fn build(
        config: &UNet2DConditionModelConfig,
        shapes: &BTreeMap<String, Vec<usize>>,
        params: &mut dyn ParamSource,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let mut tensors = HashMap::with_capacity(shapes.len());
        for (name, shape) in shapes {
            tensors.insert(name.clone(), params.param(name, shape, Init::Zeros)?);
        }
        let vb = VarBuilder::from_tensors(tensors, dtype, device);
        let in_channels = shapes
            .get("conv_in.weight")
            .and_then(|s| s.get(1).copied())
            .ok_or_else(|| Error::Load("denoiser is missing conv_in.weight".into()))?;
        let unet = UNet2DConditionModel::new(vb, in_channels, in_channels, false, config.clone())
            .map_err(|e| {
            Error::Load(format!(
                "denoiser weights do not match the architecture: {e}"
            ))
        })?;
        Ok(Self { unet })
    }
}

impl Denoiser for SdDenoiser {
    fn predict_noise(&self, latent: &Tensor, timestep: usize, cond: &Tensor) -> Result<Tensor> {
        Ok(self.unet.forward(latent, timestep as f64, cond)?)
    }
}

/// Everything a Stable Diffusion backend is made of, already loaded.
pub struct SdComponents {
    pub locator: String,
    pub text_encoder: Box<dyn TextEncoder + Send + Sync>,
    pub vae: AutoEncoderKL,
    pub unet_config: UNet2DConditionModelConfig,
    pub unet_weights: BTreeMap<String, Tensor>,
    pub schedule: NoiseSchedule,
    /// Side length of generated and encoded images, a multiple of the
    /// autoencoder's downsampling factor.
    pub image_size: usize,
    pub sampler: SamplerConfig,
    pub dtype: DType,
    pub device: Device,
}

pub struct SdBackend {
    parts: SdComponents,
    pretrained: FrozenParams,
    shapes: BTreeMap<String, Vec<usize>>,
    latent_channels: usize,
    downsample: usize,
}

impl SdBackend {
    /// Wraps loaded components. Fails if the UNet cannot be built from the
    /// given weights.
    pub fn from_components(mut parts: SdComponents) -> Result<Self> {
        let downsample = 1 << parts.vae.config.block_out_channels.len().saturating_sub(1);
        if parts.image_size == 0 || !parts.image_size.is_multiple_of(downsample) {
            return Err(Error::config(format!(
                "image size {} is not a positive multiple of {downsample}",
                parts.image_size
            )));
        }
        let unet_weights = std::mem::take(&mut parts.unet_weights)
            .into_iter()
            .map(|(k, v)| Ok((k, v.to_dtype(parts.dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let shapes = unet_weights
            .iter()
            .map(|(k, v)| (k.clone(), v.dims().to_vec()))
            .collect();
        let mut pretrained = FrozenParams::from_tensors(unet_weights);
        let probe = SdDenoiser::build(
            &parts.unet_config,
            &shapes,
            &mut pretrained,
            parts.dtype,
            &parts.device,
        )?;
        drop(probe);
        let latent_channels = parts.vae.config.latent_channels;
        Ok(Self {
            parts,
            pretrained,
            shapes,
            latent_channels,
            downsample,
        })
    }

    pub fn image_size(&self) -> usize {
        self.parts.image_size
    }

    fn image_tensor(&self, image: &DynamicImage) -> Result<Tensor> {
        let s = self.parts.image_size as u32;
        let rgb = image.resize_exact(s, s, FilterType::Triangle).to_rgb8();
        let data: Vec<f32> = rgb
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 127.5 - 1.0)
            .collect();
        let t = Tensor::from_vec(data, (s as usize, s as usize, 3), &self.parts.device)?
            .permute((2, 0, 1))?
            .unsqueeze(0)?
            .to_dtype(self.parts.dtype)?;
        Ok(t)
    }
}

/// Loads a Stable Diffusion model from a locator.
///
/// Every component is checked before anything is loaded, and either the whole
/// backend is returned or an error naming what is missing or malformed.
pub fn adapter_load(locator: &str) -> Result<SdBackend> {
    let (version, dir) = parse_locator(locator)?;
    if !dir.is_dir() {
        return Err(Error::Load(format!(
            "model directory {} does not exist",
            dir.display()
        )));
    }
    let missing: Vec<&str> = [TOKENIZER, TEXT_ENCODER, VAE, UNET]
        .into_iter()
        .filter(|p| !dir.join(p).is_file())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Load(format!(
            "model directory {} is missing {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let schedule = match std::fs::read_to_string(dir.join(SCHEDULER)) {
        Ok(text) => schedule_from_json(&text)
            .map_err(|e| load_err("scheduler config", &dir.join(SCHEDULER), e))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            NoiseSchedule::scaled_linear(0.00085, 0.012, 1000)?
        }
        Err(e) => return Err(Error::io(dir.join(SCHEDULER), e)),
    };
    let device = Device::Cpu;
    let dtype = DType::F32;
    let text_encoder = ClipEncoder::load(
        version,
        &dir.join(TOKENIZER),
        &dir.join(TEXT_ENCODER),
        dtype,
        &device,
    )?;
    let vae_path = dir.join(VAE);
    let vae_tensors = candle_core::safetensors::load(&vae_path, &device)
        .map_err(|e| load_err("autoencoder", &vae_path, e))?;
    let vae = deterministic_vae(vae_tensors, version.vae_config(), dtype, &device)
        .map_err(|e| load_err("autoencoder", &vae_path, e))?;
    let unet_path = dir.join(UNET);
    let unet_weights = candle_core::safetensors::load(&unet_path, &device)
        .map_err(|e| load_err("denoiser", &unet_path, e))?
        .into_iter()
        .collect();
    SdBackend::from_components(SdComponents {
        locator: format!("{}:{}", version.prefix(), dir.display()),
        text_encoder: Box::new(text_encoder),
        vae,
        unet_config: version.unet_config(),
        unet_weights,
        schedule,
        image_size: 512,
        sampler: SamplerConfig::default(),
        dtype,
        device,
    })
}

impl DiffusionBackend for SdBackend {
    fn locator(&self) -> String {
        self.parts.locator.clone()
    }

    fn device(&self) -> &Device {
        &self.parts.device
    }

    fn dtype(&self) -> DType {
        self.parts.dtype
    }

    fn text_encoder(&self) -> &dyn TextEncoder {
        self.parts.text_encoder.as_ref()
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor> {
        let x = self.image_tensor(image)?;
        let latent = self.parts.vae.encode(&x)?.sample()?;
        Ok((latent * LATENT_SCALE)?.squeeze(0)?)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<Vec<DynamicImage>> {
        let x = self.parts.vae.decode(&(latents / LATENT_SCALE)?)?;
        let x = ((x + 1.0)? * 127.5)?.clamp(0.0, 255.0)?.round()?;
        let (b, _, h, w) = x.dims4()?;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let pixels: Vec<u8> = x
                .get(i)?
                .permute((1, 2, 0))?
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .into_iter()
                .map(|v| v as u8)
                .collect();
            let img = RgbImage::from_raw(w as u32, h as u32, pixels)
                .ok_or_else(|| Error::Backend("decoded image has the wrong size".into()))?;
            out.push(DynamicImage::ImageRgb8(img));
        }
        Ok(out)
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.parts.image_size / self.downsample;
        (self.latent_channels, s, s)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.parts.schedule
    }

    fn pretrained(&self) -> &FrozenParams {
        &self.pretrained
    }

    fn build_denoiser(&self, params: &mut dyn ParamSource) -> Result<Box<dyn Denoiser>> {
        Ok(Box::new(SdDenoiser::build(
            &self.parts.unet_config,
            &self.shapes,
            params,
            self.parts.dtype,
            &self.parts.device,
        )?))
    }

    fn sampler_config(&self) -> SamplerConfig {
        self.parts.sampler.clone()
    }
}
