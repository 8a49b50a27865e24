//! The joint erasure loop.
//!
//! Each step picks reference images, noises them at a random timestep, fuses
//! their multi-scale view back into the latent, samples a conditioning
//! embedding from the concept manifold and regresses the trainable
//! denoiser's prediction onto a negative-guidance target computed by a frozen
//! snapshot. One Adam step then updates the denoiser and the fusion
//! transformer together.
//!
//! All per-step randomness (image choice, timestep, noise, manifold draw)
//! comes from one run-level stream, `rng::stream(seed, "erase", 0)`, whose
//! position is stored in every checkpoint.

use std::collections::BTreeSet;
use std::io::Write;

use candle_core::{Tensor, Var};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backend::{Denoiser, DiffusionBackend};
use crate::error::{Error, Result};
use crate::fusion::{
    add_positional, fuse, make_multiscale_tokens, noise_latent, FusionTransformer, LatentGrid,
};
use crate::manifold::{
    build_prompt_bank, read_prompt_file, sample_concept_embedding, DirichletSpec, PromptBank,
};
use crate::nn::{to_scalar, FrozenParams, ParamStore};
use crate::objective::{build_target, erasure_loss, GuidanceSpec};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{self, Rng, RngState};

pub mod checkpoint;
pub mod config;
pub mod refs;

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_FORMAT};
pub use config::{ErasureConfig, TrainScope};
pub use refs::{
    generate_reference_set, AcceptAll, ClassifierFilter, ReferenceEntry, ReferenceFilter,
    ReferenceManifest, ReferenceRequest,
};

const DENOISER_GROUP: &str = "denoiser.";
const FUSION_GROUP: &str = "fusion.";

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// `null` in the diagnostic record of an aborted run.
    pub loss: Option<f64>,
    pub timestep: usize,
    pub images: Vec<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything random about one training step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub images: Vec<String>,
    pub timestep: usize,
    /// Noised latents, `B x C x H x W`.
    pub noised: LatentGrid,
    /// `(L, d)` manifold sample.
    pub embedding: Tensor,
}

/// Per-step tensors, kept for inspection.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: Tensor,
    pub target: Tensor,
}

pub struct Trainer<'a> {
    config: ErasureConfig,
    backend: &'a dyn DiffusionBackend,
    bank: PromptBank,
    dirichlet: DirichletSpec,
    references: Vec<(String, Tensor)>,
    guidance: GuidanceSpec,
    frozen_params: FrozenParams,
    base_hash: String,
    /// Hash of the denoiser weights this stage started from.
    start_hash: String,
    frozen: Box<dyn Denoiser>,
    denoiser_params: ParamStore,
    denoiser: Box<dyn Denoiser>,
    fusion_params: ParamStore,
    fusion: FusionTransformer,
    /// Denoiser parameter names that receive updates.
    scope: BTreeSet<String>,
    /// Denoiser parameter names written to checkpoints.
    saved: BTreeSet<String>,
    erased_before: Vec<String>,
    adam: Adam,
    rng: Rng,
    step: usize,
}

impl<'a> Trainer<'a> {
    /// Loads the prompt bank and reference set named in `config`.
    pub fn new(
        config: &ErasureConfig,
        backend: &'a dyn DiffusionBackend,
        base: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if !config.prompt_bank_path.exists() {
            return Err(Error::config(format!(
                "prompt bank {} not found",
                config.prompt_bank_path.display()
            )));
        }
        let prompts = read_prompt_file(&config.prompt_bank_path)?;
        let dir = &config.reference_set_path;
        let manifest = ReferenceManifest::load(dir)?;
        if manifest.entries.len() != config.n_reference_images {
            log::warn!(
                "reference set has {} images, config asks for {}",
                manifest.entries.len(),
                config.n_reference_images
            );
        }
        let images = manifest.images(dir)?;
        let mut references = Vec::with_capacity(images.len());
        for (id, img) in images.into_iter().take(config.n_reference_images) {
            references.push((id, backend.encode_image(&img)?));
        }
        Self::from_parts(config, backend, &prompts, references, base)
    }

    /// Like [`Trainer::new`] with the bank prompts and encoded `C x H x W`
    /// reference latents given directly.
    pub fn from_parts(
        config: &ErasureConfig,
        backend: &'a dyn DiffusionBackend,
        prompts: &[String],
        references: Vec<(String, Tensor)>,
        base: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        if references.is_empty() {
            return Err(Error::config("reference set is empty"));
        }
        let bank = build_prompt_bank(&config.concept_name, prompts, backend.text_encoder())?;
        let dirichlet = DirichletSpec::new(config.tau)?;
        let guidance = GuidanceSpec {
            gamma: config.gamma,
            uncond_embedding: backend.condition("")?,
        };

        let pretrained = backend.pretrained();
        let base_hash = pretrained.content_hash()?;
        let frozen_params = pretrained.clone();
        let frozen = {
            let mut src = frozen_params.clone();
            backend.build_denoiser(&mut src)?
        };
        let mut denoiser_params = pretrained.to_store()?;
        let mut saved = BTreeSet::new();
        let mut erased_before = Vec::new();
        if let Some(prev) = base {
            if prev.meta.base_hash != base_hash {
                return Err(Error::config(
                    "base checkpoint was trained on a different pretrained model",
                ));
            }
            denoiser_params.overlay(&prev.denoiser)?;
            saved.extend(prev.denoiser.keys().cloned());
            erased_before = prev.meta.erased_before.clone();
            erased_before.push(prev.meta.config.concept_name.clone());
        }
        let start_hash = denoiser_params.content_hash()?;
        let denoiser = backend.build_denoiser(&mut denoiser_params)?;
        let scope: BTreeSet<String> = denoiser_params
            .names()
            .filter(|n| match config.train_scope {
                TrainScope::All => true,
                TrainScope::Conditioning => backend.is_conditioning_param(n),
            })
            .cloned()
            .collect();
        if scope.is_empty() {
            return Err(Error::config(
                "training scope selects no denoiser parameters",
            ));
        }
        saved.extend(scope.iter().cloned());

        let (channels, _, _) = backend.latent_shape();
        let (fusion, fusion_params) = FusionTransformer::init(
            &config.fusion(),
            channels,
            config.seed,
            backend.dtype(),
            backend.device(),
        )?;

        Ok(Self {
            config: config.clone(),
            backend,
            bank,
            dirichlet,
            references,
            guidance,
            frozen_params,
            base_hash,
            start_hash,
            frozen,
            denoiser_params,
            denoiser,
            fusion_params,
            fusion,
            scope,
            saved,
            erased_before,
            adam: Adam::new(AdamConfig::with_lr(config.learning_rate)),
            rng: rng::stream(config.seed, "erase", 0),
            step: 0,
        })
    }

    /// Continues from `ckpt`, which must come from the same configuration
    /// and frozen snapshot.
    pub fn resume_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let meta = &ckpt.meta;
        if meta.config_hash != self.config.config_hash() {
            return Err(Error::config(
                "checkpoint was written with a different configuration",
            ));
        }
        if meta.base_hash != self.base_hash || meta.start_hash != self.start_hash {
            return Err(Error::config(
                "checkpoint was trained from different starting weights",
            ));
        }
        self.denoiser_params.overlay(&ckpt.denoiser)?;
        self.fusion_params.overlay(&ckpt.fusion)?;
        let optimizer = ckpt
            .optimizer
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        self.adam = Adam::restore(self.adam.config, meta.optimizer_step, &optimizer, "")?;
        self.rng = meta.rng_state.restore()?;
        self.step = meta.step;
        self.erased_before = meta.erased_before.clone();
        Ok(())
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &ErasureConfig {
        &self.config
    }

    pub fn frozen_params(&self) -> &FrozenParams {
        &self.frozen_params
    }

    pub fn frozen(&self) -> &dyn Denoiser {
        self.frozen.as_ref()
    }

    pub fn denoiser(&self) -> &dyn Denoiser {
        self.denoiser.as_ref()
    }

    pub fn denoiser_params(&self) -> &ParamStore {
        &self.denoiser_params
    }

    pub fn fusion(&self) -> &FusionTransformer {
        &self.fusion
    }

    pub fn fusion_params(&self) -> &ParamStore {
        &self.fusion_params
    }

    /// Parameters updated by the optimizer, with group prefixes.
    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        let denoiser = self
            .denoiser_params
            .iter()
            .filter(|(k, _)| self.scope.contains(*k))
            .map(|(k, v)| (format!("{DENOISER_GROUP}{k}"), v.clone()));
        let fusion = self
            .fusion_params
            .iter()
            .map(|(k, v)| (format!("{FUSION_GROUP}{k}"), v.clone()));
        denoiser.chain(fusion).collect()
    }

    /// Draws the random inputs of one step from `rng`.
    pub fn draw_inputs(&self, rng: &mut Rng) -> Result<StepInputs> {
        let mut images = Vec::with_capacity(self.config.batch_size);
        let mut latents = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (id, latent) = &self.references[rng.gen_range(0..self.references.len())];
            images.push(id.clone());
            latents.push(latent.clone());
        }
        let timestep = rng.gen_range(0..self.backend.schedule().len());
        let clean = Tensor::stack(&latents, 0)?;
        let mut noised = noise_latent(&clean, timestep, self.backend.schedule(), rng)?;
        noised.source_id = images.join(",");
        let embedding =
            sample_concept_embedding(&self.bank, &self.dirichlet, self.config.noise_std, rng)?
                .values;
        Ok(StepInputs {
            images,
            timestep,
            noised,
            embedding,
        })
    }

    /// Loss and target for fixed inputs, with a live graph to every
    /// trainable parameter.
    pub fn forward(&self, inputs: &StepInputs) -> Result<StepOutput> {
        let tokens = add_positional(&make_multiscale_tokens(
            &inputs.noised,
            &self.config.scales,
        )?)?;
        let fused = fuse(&inputs.noised, &tokens, &self.fusion, self.config.lambda)?;
        let target = build_target(
            self.frozen.as_ref(),
            &fused,
            inputs.timestep,
            &inputs.embedding,
            &self.guidance,
        )?;
        let loss = erasure_loss(
            self.denoiser.as_ref(),
            &fused,
            inputs.timestep,
            &inputs.embedding,
            &target,
            self.config.reduction,
        )?;
        Ok(StepOutput { loss, target })
    }

    /// Mean loss over `inputs` without updating anything.
    pub fn evaluate(&self, inputs: &[StepInputs]) -> Result<f64> {
        let mut total = 0.0;
        for x in inputs {
            total += to_scalar(&self.forward(x)?.loss)?;
        }
        Ok(total / inputs.len().max(1) as f64)
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let mut rng = self.rng.clone();
        let inputs = self.draw_inputs(&mut rng)?;
        self.rng = rng;
        let out = self.forward(&inputs)?;
        let loss = to_scalar(&out.loss)?;
        let mut record = StepRecord {
            step: self.step,
            loss: Some(loss),
            timestep: inputs.timestep,
            images: inputs.images,
            seed: self.config.seed,
            error: None,
        };
        if !loss.is_finite() {
            record.loss = None;
            record.error = Some(format!("non-finite loss {loss}"));
            return Ok(record);
        }
        let grads = out.loss.backward()?;
        let vars = self.trainable_vars();
        self.adam
            .step(vars.iter().map(|(k, v)| (k.as_str(), v)), &grads)?;
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let denoiser = self
            .denoiser_params
            .iter()
            .filter(|(k, _)| self.saved.contains(*k))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        let fusion = self
            .fusion_params
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            denoiser,
            fusion,
            optimizer: self.adam.state_tensors(""),
            meta: CheckpointMeta {
                format: CHECKPOINT_FORMAT,
                config: self.config.clone(),
                config_hash: self.config.config_hash(),
                step: self.step,
                rng_state: RngState::capture(&self.rng),
                optimizer_step: self.adam.steps_taken(),
                backend: self.backend.locator(),
                base_hash: self.base_hash.clone(),
                start_hash: self.start_hash.clone(),
                erased_before: self.erased_before.clone(),
            },
        })
    }
}

#[derive(Default)]
pub struct EraseOptions<'a> {
    /// Continue from a checkpoint of the same run.
    pub resume: Option<&'a Checkpoint>,
    /// Earlier chain stage whose weights this stage starts from.
    pub base: Option<&'a Checkpoint>,
    /// Stop after this many total steps instead of `config.steps`.
    pub stop_at: Option<usize>,
}

/// Checkpoint plus the log records written during this invocation.
#[derive(Debug, Clone)]
pub struct ErasureRun {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

/// Runs (or continues) erasure of `config.concept_name` on `backend`,
/// writing one JSON line per step to `log`.
pub fn erase(
    config: &ErasureConfig,
    backend: &dyn DiffusionBackend,
    options: EraseOptions<'_>,
    log: Option<&mut dyn Write>,
) -> Result<ErasureRun> {
    let mut trainer = Trainer::new(config, backend, options.base)?;
    if let Some(ckpt) = options.resume {
        trainer.resume_from(ckpt)?;
    }
    run(&mut trainer, options.stop_at, log)
}

/// Drives an already constructed trainer to `stop_at` (default
/// `config.steps`).
pub fn run(
    trainer: &mut Trainer<'_>,
    stop_at: Option<usize>,
    mut log: Option<&mut dyn Write>,
) -> Result<ErasureRun> {
    let end = stop_at
        .unwrap_or(trainer.config.steps)
        .min(trainer.config.steps);
    let frozen_before = trainer.frozen_params.content_hash()?;
    let mut records = Vec::new();
    while trainer.step < end {
        let record = trainer.train_step()?;
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<training log>", e))?;
        }
        if record.error.is_some() {
            return Err(Error::NonFiniteLoss {
                step: record.step as u64,
                timestep: record.timestep,
                loss: f64::NAN,
            });
        }
        records.push(record);
    }
    if trainer.frozen_params.content_hash()? != frozen_before {
        return Err(Error::contract("frozen snapshot changed during training"));
    }
    Ok(ErasureRun {
        checkpoint: trainer.checkpoint()?,
        records,
    })
}

/// Erases the concepts of `configs` one after another. Each stage starts
/// from the previous stage's weights; every stage builds its target from the
/// original pretrained model.
pub fn multi_concept_erase(
    configs: &[ErasureConfig],
    backend: &dyn DiffusionBackend,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<ErasureRun>> {
    if configs.is_empty() {
        return Err(Error::config("chain needs at least one configuration"));
    }
    let mut stages: Vec<ErasureRun> = Vec::with_capacity(configs.len());
    for config in configs {
        let options = EraseOptions {
            base: stages.last().map(|s| &s.checkpoint),
            ..Default::default()
        };
        let stage_log = log.as_mut().map(|w| &mut **w as &mut dyn Write);
        let run = erase(config, backend, options, stage_log)?;
        stages.push(run);
    }
    Ok(stages)
}

/// The erased denoiser stored in `ckpt`, on top of the backend's weights.
pub fn load_erased(backend: &dyn DiffusionBackend, ckpt: &Checkpoint) -> Result<Box<dyn Denoiser>> {
    if ckpt.meta.base_hash != backend.pretrained().content_hash()? {
        return Err(Error::config(format!(
            "checkpoint was trained on {}, which does not match the loaded backend",
            ckpt.meta.backend
        )));
    }
    let store = backend.pretrained().to_store()?;
    store.overlay(&ckpt.denoiser)?;
    let mut frozen = store.frozen()?;
    backend.build_denoiser(&mut frozen)
}
