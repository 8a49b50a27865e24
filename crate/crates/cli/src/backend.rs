//! Opening backends from locator strings.

use std::path::Path;

use anyhow::{Context, Result};
use candle_core::Device;
use eraser_core::backend::toy::{
    self, pretrain_toy, ToyBackend, ToyClassifier, ToyPretrainConfig, ToyTextEncoder,
};
use eraser_core::backend::DiffusionBackend;
use eraser_core::manifold::TextEncoder;
use eraser_sd::SdBackend;

use crate::config_error;

pub enum Backend {
    Toy(ToyBackend),
    Sd(Box<SdBackend>),
}

impl Backend {
    /// `toy:<seed>` pretrains (or loads from `cache_dir`) the toy world;
    /// anything else is handed to the Stable Diffusion adapter.
    pub fn open(locator: &str, cache_dir: &Path) -> Result<Self> {
        match toy::parse_locator(locator) {
            Some(seed) => {
                let seed = seed?;
                let backend = pretrain_toy(seed, &ToyPretrainConfig::default(), Some(cache_dir))
                    .with_context(|| format!("opening {locator}"))?;
                Ok(Backend::Toy(backend))
            }
            None => Ok(Backend::Sd(Box::new(
                eraser_sd::adapter_load(locator).with_context(|| format!("opening {locator}"))?,
            ))),
        }
    }

    pub fn get(&self) -> &dyn DiffusionBackend {
        match self {
            Backend::Toy(b) => b,
            Backend::Sd(b) => b.as_ref(),
        }
    }

    /// Concept classifier for ASR/MCP and reference filtering. Only the toy
    /// world ships one.
    pub fn classifier(&self) -> Option<ToyClassifier> {
        match self {
            Backend::Toy(b) => Some(b.classifier()),
            Backend::Sd(_) => None,
        }
    }

    pub fn require_classifier(&self, what: &str) -> Result<ToyClassifier> {
        self.classifier().ok_or_else(|| {
            config_error(format!(
                "{what} needs a concept classifier, and {} has no built-in one",
                self.get().locator()
            ))
        })
    }
}

/// Just the text encoder, without pretraining the toy denoiser.
pub fn open_text_encoder(locator: &str) -> Result<Box<dyn TextEncoder>> {
    match toy::parse_locator(locator) {
        Some(seed) => {
            seed?;
            Ok(Box::new(ToyTextEncoder::new(&Device::Cpu)))
        }
        None => Ok(Box::new(TextEncoderOf(
            eraser_sd::adapter_load(locator).with_context(|| format!("opening {locator}"))?,
        ))),
    }
}

struct TextEncoderOf(SdBackend);

impl TextEncoder for TextEncoderOf {
    fn encode(&self, prompt: &str) -> eraser_core::Result<candle_core::Tensor> {
        self.0.text_encoder().encode(prompt)
    }
}
