//! A miniature, fully deterministic diffusion world.
//!
//! Images are 16x16 grayscale renders of simple shapes ("square", "circle",
//! "triangle"). The "VAE" is a fixed 2x2 average pool to a `1 x 8 x 8` latent
//! with a nearest-neighbour decoder. The text encoder maps words to fixed
//! pseudo-random vectors. The denoiser is a small convolutional network with
//! one cross-attention layer over the prompt tokens, trained here from
//! scratch by [`pretrain_toy`].

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, GrayImage, Luma};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Denoiser, DiffusionBackend, SamplerConfig};
use crate::error::{Error, Result};
use crate::eval::{verdict, ConceptClassifier};
use crate::fusion::standard_normal;
use crate::manifold::TextEncoder;
use crate::nn::{
    layer_norm, linear, load_tensors, save_tensors, softmax_last, FrozenParams, Init, Initializer,
    ParamSource, ParamStore,
};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, derive_seed, Rng};
use crate::schedule::NoiseSchedule;

pub const IMAGE_SIZE: usize = 16;
pub const LATENT_SIZE: usize = 8;
pub const TIMESTEPS: usize = 50;
pub const CONCEPTS: [&str; 3] = ["square", "circle", "triangle"];
pub const BLANK: &str = "blank";

const TOKENS: usize = 8;
const EMBED_DIM: usize = 64;
const TIME_DIM: usize = 16;
const CONTEXT_GAIN: f64 = 1.5;
const ATTN_DIM: usize = 32;

/// Linear betas over 50 steps. The endpoints are the usual 1e-4 / 0.02 scaled
/// by 1000 / T so that the chain ends close to pure noise.
pub fn toy_schedule() -> NoiseSchedule {
    let scale = 1000.0 / TIMESTEPS as f64;
    NoiseSchedule::linear(1e-4 * scale, 0.02 * scale, TIMESTEPS).expect("valid toy schedule")
}

// ---------------------------------------------------------------------------
// Text

fn tokenize(prompt: &str) -> Vec<String> {
    prompt
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn gaussian_vector(tag: &str, dim: usize, std: f64) -> Vec<f64> {
    let mut rng = rng::stream(0x7e57, tag, 0);
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..dim).map(|_| normal.sample(&mut rng)).collect()
}

/// Word-hash text encoder: `<bos> words.. <eos> <pad>..`, eight tokens of
/// width 64. Token `i` is a fixed Gaussian vector for its word, plus a
/// position vector, plus a causal context term (the sum of the content word
/// vectors up to `i`, scaled by 1.5 over the square root of their count),
/// normalized per token. The context term plays the role of causal
/// self-attention: trailing `<eos>`/`<pad>` tokens carry the whole prompt.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    device: Device,
}

impl ToyTextEncoder {
    pub fn new(device: &Device) -> Self {
        Self {
            device: device.clone(),
        }
    }
}

impl TextEncoder for ToyTextEncoder {
    fn encode(&self, prompt: &str) -> Result<Tensor> {
        let mut words = vec!["<bos>".to_string()];
        words.extend(tokenize(prompt).into_iter().take(TOKENS - 2));
        words.push("<eos>".to_string());
        while words.len() < TOKENS {
            words.push("<pad>".to_string());
        }
        let p = gaussian_vector("position", EMBED_DIM * TOKENS, 0.3);
        let mut values = Vec::with_capacity(TOKENS * EMBED_DIM);
        let mut context = vec![0.0; EMBED_DIM];
        let mut seen = 0usize;
        for (pos, word) in words.iter().enumerate() {
            let w = gaussian_vector(&format!("word:{word}"), EMBED_DIM, 1.0);
            if !word.starts_with('<') {
                for (c, wi) in context.iter_mut().zip(&w) {
                    *c += wi;
                }
                seen += 1;
            }
            let scale = CONTEXT_GAIN / (seen.max(1) as f64).sqrt();
            values
                .extend((0..EMBED_DIM).map(|i| w[i] + scale * context[i] + p[pos * EMBED_DIM + i]));
        }
        let t = Tensor::from_vec(values, (TOKENS, EMBED_DIM), &self.device)?;
        layer_norm(&t, 1e-5)
    }
}

/// Prompt variations the toy model is trained on.
pub fn prompt_templates() -> &'static [&'static str] {
    &[
        "a {}",
        "{}",
        "a photo of a {}",
        "a drawing of a {}",
        "an image of a {}",
        "a simple {}",
        "a {} shape",
        "a white {}",
        "a picture of a {}",
        "a small {}",
        "a large {}",
        "a centered {}",
    ]
}

pub fn concept_prompts(concept: &str) -> Vec<String> {
    prompt_templates()
        .iter()
        .map(|t| t.replace("{}", concept))
        .collect()
}

// ---------------------------------------------------------------------------
// Images

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "square" => Some(Shape::Square),
            "circle" => Some(Shape::Circle),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    fn contains(&self, x: f64, y: f64, p: &ShapeParams) -> bool {
        let (dx, dy) = (x - p.cx, y - p.cy);
        match self {
            Shape::Square => dx.abs().max(dy.abs()) <= 0.85 * p.radius,
            Shape::Circle => dx.hypot(dy) <= p.radius,
            Shape::Triangle => {
                let top = -1.1 * p.radius;
                let base = 0.9 * p.radius;
                dy >= top && dy <= base && dx.abs() <= 1.1 * p.radius * (dy - top) / (base - top)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeParams {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
}

impl ShapeParams {
    pub fn random(rng: &mut Rng) -> Self {
        let c = IMAGE_SIZE as f64 / 2.0;
        Self {
            cx: c + rng.gen_range(-1.0..1.0),
            cy: c + rng.gen_range(-1.0..1.0),
            radius: rng.gen_range(4.5..6.0),
        }
    }

    /// The 27 grid variants used as classifier templates.
    pub fn grid() -> Vec<Self> {
        let c = IMAGE_SIZE as f64 / 2.0;
        let mut out = Vec::new();
        for dy in [-1.0, 0.0, 1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                for radius in [4.5, 5.25, 6.0] {
                    out.push(Self {
                        cx: c + dx,
                        cy: c + dy,
                        radius,
                    });
                }
            }
        }
        out
    }
}

/// Row-major 16x16 render in `[-1, 1]` with 4x4 supersampled coverage.
pub fn render(shape: Shape, params: &ShapeParams) -> Vec<f64> {
    const SS: usize = 4;
    let mut out = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for py in 0..IMAGE_SIZE {
        for px in 0..IMAGE_SIZE {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if shape.contains(x, y, params) {
                        hits += 1;
                    }
                }
            }
            out.push(-1.0 + 2.0 * hits as f64 / (SS * SS) as f64);
        }
    }
    out
}

pub fn to_gray_image(values: &[f64], size: usize) -> DynamicImage {
    let img = GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let v = values[y as usize * size + x as usize].clamp(-1.0, 1.0);
        Luma([((v + 1.0) * 127.5).round() as u8])
    });
    DynamicImage::ImageLuma8(img)
}

pub fn from_gray_image(image: &DynamicImage) -> Result<Vec<f64>> {
    let g = image.to_luma8();
    if g.width() as usize != IMAGE_SIZE || g.height() as usize != IMAGE_SIZE {
        return Err(Error::Backend(format!(
            "toy images are {IMAGE_SIZE}x{IMAGE_SIZE}, got {}x{}",
            g.width(),
            g.height()
        )));
    }
    Ok(g.pixels().map(|p| p.0[0] as f64 / 127.5 - 1.0).collect())
}

/// 2x2 average pool of a 16x16 image to the 8x8 latent grid.
pub fn pool_to_latent(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; LATENT_SIZE * LATENT_SIZE];
    for y in 0..LATENT_SIZE {
        for x in 0..LATENT_SIZE {
            let mut acc = 0.0;
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                acc += values[(2 * y + dy) * IMAGE_SIZE + 2 * x + dx];
            }
            out[y * LATENT_SIZE + x] = acc / 4.0;
        }
    }
    out
}

pub fn unpool_from_latent(values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            out[y * IMAGE_SIZE + x] = values[(y / 2) * LATENT_SIZE + x / 2];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Classifier

/// Nearest-template classifier on the pooled 8x8 grid. A label's logit is
/// `-min_template MSE / temperature`; "blank" is an empty canvas.
#[derive(Debug, Clone)]
pub struct ToyClassifier {
    templates: Vec<(String, Vec<Vec<f64>>)>,
    temperature: f64,
}

impl Default for ToyClassifier {
    fn default() -> Self {
        let mut templates: Vec<(String, Vec<Vec<f64>>)> = CONCEPTS
            .iter()
            .map(|c| {
                let shape = Shape::from_name(c).expect("known concept");
                let renders = ShapeParams::grid()
                    .iter()
                    .map(|p| pool_to_latent(&render(shape, p)))
                    .collect();
                (c.to_string(), renders)
            })
            .collect();
        templates.push((
            BLANK.to_string(),
            vec![vec![-1.0; LATENT_SIZE * LATENT_SIZE]],
        ));
        Self {
            templates,
            temperature: 0.01,
        }
    }
}

impl ToyClassifier {
    pub fn labels(&self) -> Vec<String> {
        self.templates.iter().map(|(l, _)| l.clone()).collect()
    }

    /// Every other label, used as the distractor set for `concept`.
    pub fn distractors(&self, concept: &str) -> Vec<String> {
        self.labels().into_iter().filter(|l| l != concept).collect()
    }

    pub fn predict(&self, image: &DynamicImage) -> Result<String> {
        let labels = self.labels();
        let scores = self.scores(image, &labels)?;
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
        Ok(labels[best].clone())
    }
}

impl ConceptClassifier for ToyClassifier {
    fn id(&self) -> String {
        "toy-nearest-template".into()
    }

    fn scores(&self, image: &DynamicImage, labels: &[String]) -> Result<Vec<f64>> {
        let pooled = pool_to_latent(&from_gray_image(image)?);
        labels
            .iter()
            .map(|label| {
                let (_, renders) =
                    self.templates
                        .iter()
                        .find(|(l, _)| l == label)
                        .ok_or_else(|| {
                            Error::config(format!("toy classifier has no label {label:?}"))
                        })?;
                let best = renders
                    .iter()
                    .map(|r| {
                        r.iter()
                            .zip(&pooled)
                            .map(|(a, b)| (a - b).powi(2))
                            .sum::<f64>()
                            / r.len() as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                Ok(-best / self.temperature)
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Denoiser

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyDenoiserConfig {
    pub hidden: usize,
}

impl Default for ToyDenoiserConfig {
    fn default() -> Self {
        Self { hidden: 32 }
    }
}

/// Small convolutional noise predictor in the shape of one latent-diffusion
/// U-Net block: an input convolution plus a learned position map, timestep
/// FiLM, cross-attention from every latent position to the prompt tokens,
/// and two output convolutions.
pub struct ToyDenoiser {
    hidden: usize,
    pos: Tensor,
    time: (Tensor, Tensor),
    conv_in: (Tensor, Tensor),
    to_q: Tensor,
    to_k: Tensor,
    to_v: Tensor,
    to_out: (Tensor, Tensor),
    conv_mid: (Tensor, Tensor),
    conv_out: (Tensor, Tensor),
}

fn fan_in(n: usize) -> Init {
    Init::Uniform(1.0 / (n as f64).sqrt())
}

fn pair(
    src: &mut dyn ParamSource,
    name: &str,
    shape: &[usize],
    fan: usize,
) -> Result<(Tensor, Tensor)> {
    Ok((
        src.param(&format!("{name}.weight"), shape, fan_in(fan))?,
        src.param(&format!("{name}.bias"), &[shape[0]], Init::Zeros)?,
    ))
}

pub fn timestep_embedding(timesteps: &[usize], dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let tt = t as f64 * 1000.0 / TIMESTEPS as f64;
        for ch in 0..dim {
            let i = (ch / 2) as f64;
            let angle = tt / 10000f64.powf(2.0 * i / dim as f64);
            out.push(if ch % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            });
        }
    }
    out
}

impl ToyDenoiser {
    pub fn build(config: &ToyDenoiserConfig, src: &mut dyn ParamSource) -> Result<Self> {
        let h = config.hidden;
        let hw = LATENT_SIZE * LATENT_SIZE;
        Ok(Self {
            hidden: h,
            pos: src.param("pos", &[h, hw], Init::Normal(0.1))?,
            time: pair(src, "time", &[2 * h, TIME_DIM], TIME_DIM)?,
            conv_in: pair(src, "conv_in", &[h, 1, 3, 3], 9)?,
            to_q: src.param("attn2.to_q.weight", &[ATTN_DIM, h], fan_in(h))?,
            to_k: src.param(
                "attn2.to_k.weight",
                &[ATTN_DIM, EMBED_DIM],
                fan_in(EMBED_DIM),
            )?,
            to_v: src.param("attn2.to_v.weight", &[h, EMBED_DIM], fan_in(EMBED_DIM))?,
            to_out: pair(src, "attn2.to_out", &[h, h], h)?,
            conv_mid: pair(src, "conv_mid", &[h, h, 3, 3], 9 * h)?,
            conv_out: pair(src, "conv_out", &[1, h, 3, 3], 9 * h)?,
        })
    }

    fn conv(x: &Tensor, (w, b): &(Tensor, Tensor)) -> Result<Tensor> {
        let out = x.conv2d(w, 1, 1, 1, 1)?;
        Ok(out.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)
    }

    /// Noise prediction with a separate timestep per batch element.
    pub fn forward(&self, latent: &Tensor, timesteps: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, hh, ww) = latent.dims4()?;
        if c != 1 || hh != LATENT_SIZE || ww != LATENT_SIZE {
            return Err(Error::contract(format!(
                "toy denoiser expects B x 1 x 8 x 8 latents, got {:?}",
                latent.dims()
            )));
        }
        if timesteps.len() != b || cond.dims() != [b, TOKENS, EMBED_DIM] {
            return Err(Error::contract(format!(
                "{} timesteps and conditioning {:?} for batch {b}",
                timesteps.len(),
                cond.dims()
            )));
        }
        let h = self.hidden;
        let temb = Tensor::from_vec(
            timestep_embedding(timesteps, TIME_DIM),
            (b, TIME_DIM),
            latent.device(),
        )?
        .to_dtype(latent.dtype())?;
        let film = linear(&temb, &self.time.0, Some(&self.time.1))?;
        let scale = film.narrow(1, 0, h)?.reshape((b, h, 1))?;
        let shift = film.narrow(1, h, h)?.reshape((b, h, 1))?;

        let x = Self::conv(latent, &self.conv_in)?.reshape((b, h, hh * ww))?;
        let x = x.broadcast_add(&self.pos)?;
        let x = x
            .broadcast_mul(&(scale + 1.0)?)?
            .broadcast_add(&shift)?
            .silu()?;

        // Cross-attention: latent positions attend over prompt tokens.
        let xt = x.transpose(1, 2)?.contiguous()?;
        let q = linear(&xt, &self.to_q, None)?;
        let k = linear(cond, &self.to_k, None)?;
        let v = linear(cond, &self.to_v, None)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (ATTN_DIM as f64).sqrt())?;
        let mixed = softmax_last(&scores)?.matmul(&v)?;
        let attn = linear(&mixed, &self.to_out.0, Some(&self.to_out.1))?;
        let x = (xt + attn)?.transpose(1, 2)?.reshape((b, h, hh, ww))?;

        let x = Self::conv(&x, &self.conv_mid)?.silu()?;
        Self::conv(&x, &self.conv_out)
    }
}

impl Denoiser for ToyDenoiser {
    fn predict_noise(&self, latent: &Tensor, timestep: usize, cond: &Tensor) -> Result<Tensor> {
        let b = latent.dim(0)?;
        self.forward(latent, &vec![timestep; b], cond)
    }
}

// ---------------------------------------------------------------------------
// Backend

/// Seed of a `toy:<seed>` locator, or `None` for any other locator.
pub fn parse_locator(locator: &str) -> Option<Result<u64>> {
    let seed = locator.strip_prefix("toy:")?;
    Some(seed.trim().parse().map_err(|_| {
        Error::config(format!(
            "bad toy locator {locator:?}: seed must be an integer"
        ))
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyPretrainConfig {
    pub denoiser: ToyDenoiserConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt with the empty prompt.
    pub uncond_prob: f64,
    pub sampler: SamplerConfig,
    /// Conditional samples per concept checked after training.
    pub gate_samples: usize,
    pub gate_accuracy: f64,
}

impl Default for ToyPretrainConfig {
    fn default() -> Self {
        Self {
            denoiser: ToyDenoiserConfig::default(),
            steps: 1200,
            batch: 24,
            lr: 3e-3,
            uncond_prob: 0.15,
            sampler: SamplerConfig {
                guidance_scale: 3.0,
                clip_sample: Some(1.0),
                batch: 64,
            },
            gate_samples: 100,
            gate_accuracy: 0.9,
        }
    }
}

impl ToyPretrainConfig {
    fn cache_key(&self, seed: u64) -> String {
        let mut hasher = Sha256::new();
        hasher.update(b"toy-v7");
        hasher.update(seed.to_le_bytes());
        hasher.update(serde_json::to_vec(self).expect("serializable config"));
        hex::encode(&hasher.finalize()[..8])
    }
}

/// Per-concept outcome of the post-training sampling gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub accuracy: Vec<(String, f64)>,
    pub samples_per_concept: usize,
}

pub struct ToyBackend {
    seed: u64,
    device: Device,
    encoder: ToyTextEncoder,
    schedule: NoiseSchedule,
    config: ToyPretrainConfig,
    params: FrozenParams,
}

impl ToyBackend {
    /// Untrained backend with freshly initialized denoiser weights.
    pub fn untrained(seed: u64, config: &ToyPretrainConfig) -> Result<Self> {
        let device = Device::Cpu;
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "toy-init", 0);
        ToyDenoiser::build(
            &config.denoiser,
            &mut Initializer {
                store: &mut store,
                rng: &mut rng,
                dtype: DType::F64,
                device: device.clone(),
            },
        )?;
        Ok(Self {
            seed,
            encoder: ToyTextEncoder::new(&device),
            device,
            schedule: toy_schedule(),
            config: config.clone(),
            params: store.frozen()?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn pretrain_config(&self) -> &ToyPretrainConfig {
        &self.config
    }

    pub fn classifier(&self) -> ToyClassifier {
        ToyClassifier::default()
    }

    pub fn cache_path(dir: &Path, seed: u64, config: &ToyPretrainConfig) -> PathBuf {
        dir.join(format!("toy-{}.safetensors", config.cache_key(seed)))
    }

    fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut meta = HashMap::new();
        meta.insert("seed".to_string(), self.seed.to_string());
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        // Write-then-rename so concurrent readers never see a partial file.
        let tmp = path.with_extension("partial");
        save_tensors(self.params.tensors(), Some(meta), &tmp)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    fn load(seed: u64, config: &ToyPretrainConfig, path: &Path) -> Result<Self> {
        let loaded = load_tensors(path, DType::F64, &Device::Cpu)?;
        let backend = Self::untrained(seed, config)?;
        let store = backend.params.to_store()?;
        store.assign_from(&loaded.tensors)?;
        Ok(Self {
            params: store.frozen()?,
            ..backend
        })
    }

    /// Conditional sampling accuracy per concept under the toy classifier.
    pub fn gate(&self, samples: usize, seed: u64) -> Result<GateReport> {
        let classifier = self.classifier();
        let net = self.snapshot()?;
        let mut accuracy = Vec::new();
        for (ci, concept) in CONCEPTS.iter().enumerate() {
            let prompts = vec![format!("a photo of a {concept}"); samples];
            let seeds: Vec<u64> = (0..samples as u64)
                .map(|i| derive_seed(seed, "toy-gate", ci as u64 * 1_000_000 + i))
                .collect();
            let images = self.sample(net.as_ref(), &prompts, &seeds)?;
            let mut hits = 0;
            for (i, img) in images.iter().enumerate() {
                let v = verdict(
                    &classifier,
                    &i.to_string(),
                    img,
                    concept,
                    &classifier.distractors(concept),
                )?;
                hits += v.concept_present as usize;
            }
            accuracy.push((concept.to_string(), hits as f64 / samples.max(1) as f64));
        }
        Ok(GateReport {
            accuracy,
            samples_per_concept: samples,
        })
    }
}

/// Trains the toy denoiser from `seed` and checks the sampling gate. With a
/// cache directory, a previous result for the same seed and configuration is
/// reused and new results are stored under a content-hash file name.
pub fn pretrain_toy(
    seed: u64,
    config: &ToyPretrainConfig,
    cache_dir: Option<&Path>,
) -> Result<ToyBackend> {
    if let Some(dir) = cache_dir {
        let path = ToyBackend::cache_path(dir, seed, config);
        if path.exists() {
            log::info!("loading cached toy backend from {}", path.display());
            return ToyBackend::load(seed, config, &path);
        }
    }
    let mut backend = ToyBackend::untrained(seed, config)?;
    let trained = train_denoiser(&backend, config, seed)?;
    backend.params = trained.frozen()?;

    let report = backend.gate(config.gate_samples, seed)?;
    log::info!("toy gate: {:?}", report.accuracy);
    if let Some((concept, acc)) = report
        .accuracy
        .iter()
        .find(|(_, a)| *a < config.gate_accuracy)
    {
        return Err(Error::PretrainGate(format!(
            "conditional accuracy for {concept} is {acc:.3} < {} ({:?})",
            config.gate_accuracy, report.accuracy
        )));
    }
    if let Some(dir) = cache_dir {
        backend.save(&ToyBackend::cache_path(dir, seed, config))?;
    }
    Ok(backend)
}

fn train_denoiser(
    backend: &ToyBackend,
    config: &ToyPretrainConfig,
    seed: u64,
) -> Result<ParamStore> {
    let mut store = backend.params.to_store()?;
    let net = ToyDenoiser::build(&config.denoiser, &mut store)?;
    let mut rng = rng::stream(seed, "toy-pretrain", 0);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let device = backend.device.clone();

    let mut conds: Vec<(usize, Tensor)> = Vec::new();
    for (ci, concept) in CONCEPTS.iter().enumerate() {
        for p in concept_prompts(concept) {
            conds.push((ci, backend.condition(&p)?));
        }
    }
    let uncond = backend.condition("")?;
    let shapes = [Shape::Square, Shape::Circle, Shape::Triangle];
    let ab = backend.schedule.alphas_cumprod().to_vec();
    let like = Tensor::zeros(1, DType::F64, &device)?;

    for step in 0..config.steps {
        let mut latents = Vec::with_capacity(config.batch * 64);
        let mut batch_conds = Vec::with_capacity(config.batch);
        let mut timesteps = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let (ci, cond) = conds.choose(&mut rng).expect("nonempty prompts");
            let params = ShapeParams::random(&mut rng);
            latents.extend(pool_to_latent(&render(shapes[*ci], &params)));
            let drop = rng.gen_bool(config.uncond_prob);
            batch_conds.push(if drop { uncond.clone() } else { cond.clone() });
            timesteps.push(rng.gen_range(0..TIMESTEPS));
        }
        let b = config.batch;
        let x0 = Tensor::from_vec(latents, (b, 1, LATENT_SIZE, LATENT_SIZE), &device)?;
        let eps = standard_normal(&[b, 1, LATENT_SIZE, LATENT_SIZE], &like, &mut rng)?;
        let sa: Vec<f64> = timesteps.iter().map(|t| ab[*t].sqrt()).collect();
        let sn: Vec<f64> = timesteps.iter().map(|t| (1.0 - ab[*t]).sqrt()).collect();
        let sa = Tensor::from_vec(sa, (b, 1, 1, 1), &device)?;
        let sn = Tensor::from_vec(sn, (b, 1, 1, 1), &device)?;
        let xt = (x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sn)?)?;
        let cond = Tensor::stack(&batch_conds, 0)?;
        let pred = net.forward(&xt, &timesteps, &cond)?;
        let loss = (pred - &eps)?.sqr()?.mean_all()?;
        // Linear warm-down over the last fifth of training.
        let tail = config.steps / 5;
        adam.config.lr = if tail > 0 && step >= config.steps - tail {
            config.lr * (config.steps - step) as f64 / tail as f64
        } else {
            config.lr
        };
        let grads = loss.backward()?;
        adam.step(store.iter().map(|(k, v)| (k.as_str(), v)), &grads)?;
        if step % 500 == 0 {
            log::debug!(
                "toy pretrain step {step}: loss {:.5}",
                loss.to_scalar::<f64>()?
            );
        }
    }
    Ok(store)
}

impl DiffusionBackend for ToyBackend {
    fn locator(&self) -> String {
        format!("toy:{}", self.seed)
    }

    fn device(&self) -> &Device {
        &self.device
    }

    fn dtype(&self) -> DType {
        DType::F64
    }

    fn text_encoder(&self) -> &dyn TextEncoder {
        &self.encoder
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor> {
        let pooled = pool_to_latent(&from_gray_image(image)?);
        Ok(Tensor::from_vec(
            pooled,
            (1, LATENT_SIZE, LATENT_SIZE),
            &self.device,
        )?)
    }

    fn decode_latents(&self, latents: &Tensor) -> Result<Vec<DynamicImage>> {
        let (b, _, _, _) = latents.dims4()?;
        (0..b)
            .map(|i| {
                let v = crate::nn::to_vec(&latents.get(i)?)?;
                Ok(to_gray_image(&unpool_from_latent(&v), IMAGE_SIZE))
            })
            .collect()
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        (1, LATENT_SIZE, LATENT_SIZE)
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn pretrained(&self) -> &FrozenParams {
        &self.params
    }

    fn build_denoiser(&self, params: &mut dyn ParamSource) -> Result<Box<dyn Denoiser>> {
        Ok(Box::new(ToyDenoiser::build(&self.config.denoiser, params)?))
    }

    fn sampler_config(&self) -> SamplerConfig {
        self.config.sampler.clone()
    }
}

/// Renders a clean toy image of `concept` with random placement.
pub fn clean_sample(concept: &str, rng: &mut Rng) -> Result<DynamicImage> {
    let shape = Shape::from_name(concept)
        .ok_or_else(|| Error::config(format!("unknown toy concept {concept:?}")))?;
    Ok(to_gray_image(
        &render(shape, &ShapeParams::random(rng)),
        IMAGE_SIZE,
    ))
}
