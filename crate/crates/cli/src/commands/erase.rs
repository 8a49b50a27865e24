use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eraser_core::rng::derive_seed;
use eraser_core::trainer::refs::MANIFEST_FILE as REFERENCE_MANIFEST;
use eraser_core::trainer::{self, Checkpoint, EraseOptions, ErasureConfig};

use crate::backend::Backend;
use crate::manifest::Run;
use crate::{config_error, Globals};

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Flags that override values of the configuration file.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut ErasureConfig) {
        if let Some(b) = &self.backend {
            config.backend = b.clone();
        }
        if let Some(s) = self.steps {
            config.steps = s;
        }
        if let Some(t) = self.tau {
            config.tau = t;
        }
        if let Some(lr) = self.learning_rate {
            config.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            config.batch_size = b;
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct EraseArgs {
    /// Erasure configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to `runs/<concept>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint of the same configuration.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Start the trainable weights from an earlier erasure checkpoint.
    #[arg(long, conflicts_with = "resume")]
    base: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, clap::Args)]
pub struct ChainArgs {
    /// One configuration per concept, erased in the given order.
    #[arg(long, num_args = 1.., required = true)]
    configs: Vec<PathBuf>,
    /// Output directory; defaults to `runs/chain`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn load_config(path: &Path, overrides: &Overrides, seed: Option<u64>) -> Result<ErasureConfig> {
    if !path.is_file() {
        return Err(config_error(format!(
            "configuration {} not found",
            path.display()
        )));
    }
    let mut config = ErasureConfig::load(path)?;
    overrides.apply(&mut config);
    if let Some(seed) = seed {
        config.seed = seed;
    }
    config
        .validate()
        .with_context(|| format!("{} after command-line overrides", path.display()))?;
    let refs = config.reference_set_path.join(REFERENCE_MANIFEST);
    if !refs.is_file() {
        return Err(config_error(format!(
            "no reference set at {}; run gen-refs first",
            config.reference_set_path.display()
        )));
    }
    Ok(config)
}

fn open_log(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn load_checkpoint(path: &Path, backend: &Backend) -> Result<Checkpoint> {
    let b = backend.get();
    Ok(Checkpoint::load(path, b.dtype(), b.device())?)
}

pub fn run_erase(args: EraseArgs, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    let config = load_config(&args.config, &args.overrides, globals.seed)?;
    for ckpt in [&args.resume, &args.base].into_iter().flatten() {
        if !ckpt.exists() {
            return Err(config_error(format!(
                "checkpoint {} not found",
                ckpt.display()
            )));
        }
    }
    let out = args
        .out
        .unwrap_or_else(|| PathBuf::from("runs").join(&config.concept_name));
    // config.json holds exactly the bytes behind ErasureConfig::config_hash.
    run.configure(&out, &super::settings_bytes(&config)?, config.seed)?;

    let backend = Backend::open(&config.backend, &globals.cache_dir)?;
    let resume = args
        .resume
        .as_deref()
        .map(|p| load_checkpoint(p, &backend))
        .transpose()?;
    let base = args
        .base
        .as_deref()
        .map(|p| load_checkpoint(p, &backend))
        .transpose()?;

    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path)?;
    run.artifact(&log_path);
    let options = EraseOptions {
        resume: resume.as_ref(),
        base: base.as_ref(),
        stop_at: None,
    };
    let result = trainer::erase(&config, backend.get(), options, Some(&mut log));
    log.flush().context("flushing the training log")?;
    let erased = result?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    erased.checkpoint.save(&ckpt_path)?;
    run.artifact(&ckpt_path);
    let last_loss = erased.records.last().and_then(|r| r.loss);
    log::info!(
        "erased {:?} in {} steps, final loss {:?}",
        config.concept_name,
        erased.checkpoint.step(),
        last_loss
    );
    Ok(serde_json::json!({
        "checkpoint": ckpt_path,
        "checkpoint_hash": erased.checkpoint.content_hash()?,
        "steps": erased.checkpoint.step(),
        "final_loss": last_loss,
    }))
}

pub fn run_chain(args: ChainArgs, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    let mut configs = Vec::with_capacity(args.configs.len());
    for (i, path) in args.configs.iter().enumerate() {
        let stage_seed = globals.seed.map(|s| derive_seed(s, "chain", i as u64));
        configs.push(load_config(path, &args.overrides, stage_seed)?);
    }
    let locator = configs[0].backend.clone();
    if let Some(c) = configs.iter().find(|c| c.backend != locator) {
        return Err(config_error(format!(
            "every chain stage must use one backend; got {locator} and {}",
            c.backend
        )));
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/chain"));
    let seed = globals.seed.unwrap_or(configs[0].seed);
    let settings = serde_json::json!({ "stages": configs });
    run.configure(&out, &super::settings_bytes(&settings)?, seed)?;

    let backend = Backend::open(&locator, &globals.cache_dir)?;
    let log_path = out.join(LOG_FILE);
    let mut log = open_log(&log_path)?;
    run.artifact(&log_path);
    let result = trainer::multi_concept_erase(&configs, backend.get(), Some(&mut log));
    log.flush().context("flushing the training log")?;
    let stages = result?;

    let mut summary = Vec::with_capacity(stages.len());
    for (i, (stage, config)) in stages.iter().zip(&configs).enumerate() {
        let dir = out.join(format!("stage-{i}-{}", config.concept_name));
        let path = dir.join(CHECKPOINT_FILE);
        stage.checkpoint.save(&path)?;
        run.artifact(&path);
        summary.push(serde_json::json!({
            "concept": config.concept_name,
            "checkpoint": path,
            "checkpoint_hash": stage.checkpoint.content_hash()?,
        }));
    }
    Ok(serde_json::json!({ "stages": summary }))
}
