//! The Stable Diffusion UNet, adapted from candle-transformers (MIT/Apache-2.0).
//!
//! The only functional change is in cross-attention: the fused
//! `softmax_last_dim` kernel is replaced by the composed softmax so that the
//! trainer can backpropagate through the denoiser. The VAE-only blocks and
//! the flash-attention path are dropped.

#[allow(dead_code)]
mod attention;
mod unet_2d;
#[allow(dead_code)]
mod unet_2d_blocks;

pub use unet_2d::{BlockConfig, UNet2DConditionModel, UNet2DConditionModelConfig};
