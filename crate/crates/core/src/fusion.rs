//! Multi-scale visual fusion of a noised reference latent.
//!
//! The latent is resized to each scale in a [`ScaleSet`], every scale is
//! flattened row-major into tokens of width `C`, and the scales are
//! concatenated with full resolution first. After sinusoidal positions are
//! added, a small transformer encoder mixes the sequence; the first `H * W`
//! output tokens are reshaped back to `C x H x W` and merged residually:
//! `z_fused = z + lambda * fused`.

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    layer_norm_affine, linear, softmax_last, Init, Initializer, ParamSource, ParamStore,
};
use crate::rng::{self, Rng};
use crate::schedule::NoiseSchedule;

/// A (possibly noised) image latent of shape `B x C x H x W`.
#[derive(Debug, Clone)]
pub struct LatentGrid {
    pub values: Tensor,
    pub timestep: usize,
    pub source_id: String,
}

impl LatentGrid {
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.values.dims4()?)
    }
}

/// Ordered resize factors; the first is always `1.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ScaleSet {
    scales: Vec<f64>,
}

impl ScaleSet {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        if scales.first() != Some(&1.0) {
            return Err(Error::config("scale set must start with 1.0"));
        }
        if scales.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(Error::config("scales must lie in (0, 1]"));
        }
        if scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::config("scales must be strictly decreasing"));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// `(H_s, W_s)` per scale, `round(H * s)` with ties away from zero.
    pub fn grid_sizes(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        self.scales
            .iter()
            .map(|s| {
                let hs = (h as f64 * s).round() as usize;
                let ws = (w as f64 * s).round() as usize;
                if hs < 1 || ws < 1 {
                    Err(Error::config(format!(
                        "scale {s} maps {h}x{w} to an empty grid"
                    )))
                } else {
                    Ok((hs, ws))
                }
            })
            .collect()
    }

    pub fn sequence_length(&self, h: usize, w: usize) -> Result<usize> {
        Ok(self.grid_sizes(h, w)?.iter().map(|(a, b)| a * b).sum())
    }
}

impl Default for ScaleSet {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 0.75, 0.5],
        }
    }
}

impl TryFrom<Vec<f64>> for ScaleSet {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<f64> {
    fn from(s: ScaleSet) -> Self {
        s.scales
    }
}

/// Concatenated multi-scale tokens, `B x N x C`.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub per_scale_lengths: Vec<usize>,
    pub positional_added: bool,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.per_scale_lengths.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct FusedLatent {
    pub values: Tensor,
    pub lambda_used: f64,
}

/// `(out, in)` bilinear resampling matrix with half-pixel centers and edge
/// clamping, no antialiasing.
pub fn bilinear_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of a `B x C x H x W` tensor to `(out_h, out_w)`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rw =
        Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), x.device())?.to_dtype(x.dtype())?;
    let rh =
        Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), x.device())?.to_dtype(x.dtype())?;
    let x = x.broadcast_matmul(&rw.t()?)?;
    Ok(rh.broadcast_matmul(&x)?)
}

pub fn make_multiscale_tokens(z: &LatentGrid, scales: &ScaleSet) -> Result<TokenSequence> {
    let (b, c, h, w) = z.dims4()?;
    let sizes = scales.grid_sizes(h, w)?;
    let mut parts = Vec::with_capacity(sizes.len());
    let mut lengths = Vec::with_capacity(sizes.len());
    for (hs, ws) in sizes {
        let resized = resize_bilinear(&z.values, hs, ws)?;
        parts.push(resized.reshape((b, c, hs * ws))?.transpose(1, 2)?);
        lengths.push(hs * ws);
    }
    Ok(TokenSequence {
        tokens: Tensor::cat(&parts, 1)?.contiguous()?,
        per_scale_lengths: lengths,
        positional_added: false,
    })
}

/// Interleaved sinusoid table `(N, C)`: channel `2i` holds
/// `sin(pos / 10000^(2i/C))`, channel `2i+1` the matching cosine.
pub fn sinusoidal_table(n: usize, c: usize) -> Vec<f64> {
    let mut table = vec![0.0; n * c];
    for pos in 0..n {
        for ch in 0..c {
            let i = (ch / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / c as f64);
            table[pos * c + ch] = if ch % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            };
        }
    }
    table
}

pub fn add_positional(tokens: &TokenSequence) -> Result<TokenSequence> {
    if tokens.positional_added {
        return Err(Error::contract("positional embeddings already added"));
    }
    let (_, n, c) = tokens.tokens.dims3()?;
    let table = Tensor::from_vec(sinusoidal_table(n, c), (1, n, c), tokens.tokens.device())?
        .to_dtype(tokens.tokens.dtype())?;
    Ok(TokenSequence {
        tokens: tokens.tokens.broadcast_add(&table)?,
        per_scale_lengths: tokens.per_scale_lengths.clone(),
        positional_added: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_ratio: f64,
    /// Internal width; tokens are lifted from `C` channels to this width and
    /// projected back.
    pub width: usize,
    /// Zero the output projection so a fresh transformer contributes nothing.
    pub zero_init_output: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            heads: 4,
            ffn_ratio: 4.0,
            width: 32,
            zero_init_output: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.heads == 0 || self.width == 0 {
            return Err(Error::config(
                "fusion depth, heads and width must be positive",
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "fusion width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.ffn_ratio > 0.0) {
            return Err(Error::config("ffn_ratio must be positive"));
        }
        Ok(())
    }

    fn hidden(&self) -> usize {
        ((self.width as f64 * self.ffn_ratio).round() as usize).max(1)
    }
}

struct Block {
    ln1: (Tensor, Tensor),
    qkv: (Tensor, Tensor),
    attn_out: (Tensor, Tensor),
    ln2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
}

/// Pre-norm transformer encoder over `B x N x C` token sequences.
pub struct FusionTransformer {
    config: FusionConfig,
    channels: usize,
    in_proj: (Tensor, Tensor),
    blocks: Vec<Block>,
    final_ln: (Tensor, Tensor),
    out_proj: (Tensor, Tensor),
}

fn dense(
    src: &mut dyn ParamSource,
    name: &str,
    out: usize,
    inp: usize,
    init: Init,
) -> Result<(Tensor, Tensor)> {
    Ok((
        src.param(&format!("{name}.weight"), &[out, inp], init)?,
        src.param(&format!("{name}.bias"), &[out], Init::Zeros)?,
    ))
}

fn norm(src: &mut dyn ParamSource, name: &str, dim: usize) -> Result<(Tensor, Tensor)> {
    Ok((
        src.param(&format!("{name}.gain"), &[dim], Init::Ones)?,
        src.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
    ))
}

fn fan_in(n: usize) -> Init {
    Init::Uniform(1.0 / (n as f64).sqrt())
}

impl FusionTransformer {
    pub fn build(
        config: &FusionConfig,
        channels: usize,
        src: &mut dyn ParamSource,
    ) -> Result<Self> {
        config.validate()?;
        if channels == 0 {
            return Err(Error::config("latent must have at least one channel"));
        }
        let w = config.width;
        let hidden = config.hidden();
        let in_proj = dense(src, "in_proj", w, channels, fan_in(channels))?;
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                ln1: norm(src, &format!("{p}.ln1"), w)?,
                qkv: dense(src, &format!("{p}.attn.qkv"), 3 * w, w, fan_in(w))?,
                attn_out: dense(src, &format!("{p}.attn.out"), w, w, fan_in(w))?,
                ln2: norm(src, &format!("{p}.ln2"), w)?,
                fc1: dense(src, &format!("{p}.ffn.fc1"), hidden, w, fan_in(w))?,
                fc2: dense(src, &format!("{p}.ffn.fc2"), w, hidden, fan_in(hidden))?,
            });
        }
        let final_ln = norm(src, "final_ln", w)?;
        let out_init = if config.zero_init_output {
            Init::Zeros
        } else {
            fan_in(w)
        };
        let out_proj = dense(src, "out_proj", channels, w, out_init)?;
        Ok(Self {
            config: config.clone(),
            channels,
            in_proj,
            blocks,
            final_ln,
            out_proj,
        })
    }

    /// Fresh transformer with its own trainable parameter store.
    pub fn init(
        config: &FusionConfig,
        channels: usize,
        seed: u64,
        dtype: DType,
        device: &Device,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "fusion-init", 0);
        let model = {
            let mut init = Initializer {
                store: &mut store,
                rng: &mut rng,
                dtype,
                device: device.clone(),
            };
            Self::build(config, channels, &mut init)?
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn attention(&self, block: &Block, x: &Tensor) -> Result<Tensor> {
        let (b, n, w) = x.dims3()?;
        let heads = self.config.heads;
        let hd = w / heads;
        let qkv = linear(x, &block.qkv.0, Some(&block.qkv.1))?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * w, w)?
                .reshape((b, n, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        let mixed = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, w))?;
        linear(&mixed, &block.attn_out.0, Some(&block.attn_out.1))
    }

    /// Maps `B x N x C` to `B x N x C`; the sequence length is unchanged.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, _, c) = tokens.dims3()?;
        if c != self.channels {
            return Err(Error::contract(format!(
                "tokens have {c} channels, transformer expects {}",
                self.channels
            )));
        }
        let mut h = linear(tokens, &self.in_proj.0, Some(&self.in_proj.1))?;
        for block in &self.blocks {
            let a = layer_norm_affine(&h, &block.ln1.0, &block.ln1.1, 1e-5)?;
            h = (&h + self.attention(block, &a)?)?;
            let f = layer_norm_affine(&h, &block.ln2.0, &block.ln2.1, 1e-5)?;
            let f = linear(&f, &block.fc1.0, Some(&block.fc1.1))?.silu()?;
            h = (&h + linear(&f, &block.fc2.0, Some(&block.fc2.1))?)?;
        }
        let h = layer_norm_affine(&h, &self.final_ln.0, &self.final_ln.1, 1e-5)?;
        linear(&h, &self.out_proj.0, Some(&self.out_proj.1))
    }
}

/// Runs the transformer, keeps the full-resolution block and merges it into
/// the latent: `z + lambda * fused`.
pub fn fuse(
    z: &LatentGrid,
    tokens: &TokenSequence,
    transformer: &FusionTransformer,
    lambda: f64,
) -> Result<FusedLatent> {
    if !tokens.positional_added {
        return Err(Error::contract(
            "positional embeddings must be added before fusion",
        ));
    }
    let (b, c, h, w) = z.dims4()?;
    if transformer.channels() != c {
        return Err(Error::contract(format!(
            "transformer width {} does not match latent channels {c}",
            transformer.channels()
        )));
    }
    let n = tokens.tokens.dim(1)?;
    if n < h * w {
        return Err(Error::contract(format!(
            "sequence of {n} tokens is shorter than the {h}x{w} grid"
        )));
    }
    let out = transformer.forward(&tokens.tokens)?;
    let head = out
        .narrow(1, 0, h * w)?
        .transpose(1, 2)?
        .reshape((b, c, h, w))?;
    Ok(FusedLatent {
        values: (&z.values + (head * lambda)?)?,
        lambda_used: lambda,
    })
}

/// `z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps`, `eps ~ N(0, I)` drawn from
/// `rng` in row-major order.
pub fn noise_latent(
    clean_latent: &Tensor,
    timestep: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<LatentGrid> {
    let ab = schedule.alpha_bar(timestep)?;
    let eps = standard_normal(clean_latent.dims(), clean_latent, rng)?;
    let values = ((clean_latent * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?;
    Ok(LatentGrid {
        values,
        timestep,
        source_id: String::new(),
    })
}

/// Standard normal tensor with the dtype and device of `like`.
pub fn standard_normal(shape: &[usize], like: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, like.device())?.to_dtype(like.dtype())?)
}
