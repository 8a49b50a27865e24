use std::path::PathBuf;

use anyhow::Result;
use clap::ValueEnum;
use eraser_core::trainer::{
    generate_reference_set, AcceptAll, ClassifierFilter, ErasureConfig, ReferenceFilter,
    ReferenceRequest,
};
use serde::Serialize;

use crate::backend::Backend;
use crate::manifest::Run;
use crate::{config_error, Globals};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    /// The backend's concept classifier when it has one, else none.
    Auto,
    Classifier,
    None,
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Erasure config to take concept, template, count, backend and output
    /// directory from. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    concept: Option<String>,
    /// Number of images to keep.
    #[arg(long)]
    n: Option<usize>,
    /// Prompt template. `{concept}` is replaced by the concept; a template
    /// without the placeholder is used verbatim.
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    /// Output directory. Defaults to the config's reference_set_path, or
    /// `refs/<concept>` without a config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Minimum filter score in [0, 1].
    #[arg(long)]
    threshold: Option<f64>,
    /// Candidates tried per requested image before giving up.
    #[arg(long)]
    candidate_factor: Option<usize>,
    #[arg(long, value_enum, default_value_t = FilterKind::Auto)]
    filter: FilterKind,
}

#[derive(Debug, Serialize)]
struct Settings {
    concept: String,
    prompt: String,
    n: usize,
    backend: String,
    threshold: f64,
    budget: usize,
    filter: FilterKind,
    seed: u64,
}

pub fn run(args: Args, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    let config = args
        .config
        .as_deref()
        .map(ErasureConfig::load)
        .transpose()?;
    let concept = args
        .concept
        .or_else(|| config.as_ref().map(|c| c.concept_name.clone()))
        .ok_or_else(|| config_error("--concept is required without --config"))?;
    let n = args
        .n
        .or(config.as_ref().map(|c| c.n_reference_images))
        .ok_or_else(|| config_error("--n is required without --config"))?;
    let template = args
        .template
        .or_else(|| config.as_ref().map(|c| c.reference_template.clone()))
        .unwrap_or_else(|| "a photo of {concept}".into());
    let out = args
        .out
        .or_else(|| config.as_ref().map(|c| c.reference_set_path.clone()))
        .unwrap_or_else(|| PathBuf::from("refs").join(&concept));
    let backend = args
        .backend
        .or_else(|| config.as_ref().map(|c| c.backend.clone()))
        .unwrap_or_else(|| "toy:0".into());
    let threshold = args
        .threshold
        .or(config.as_ref().map(|c| c.filter_threshold))
        .unwrap_or(0.6);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(config_error(format!(
            "--threshold must lie in [0, 1], got {threshold}"
        )));
    }
    let factor = args
        .candidate_factor
        .or(config.as_ref().map(|c| c.candidate_factor))
        .unwrap_or(4);
    if factor == 0 {
        return Err(config_error("--candidate-factor must be at least 1"));
    }
    if concept.trim().is_empty() {
        return Err(config_error("concept is empty"));
    }
    let seed = globals
        .seed
        .or(config.as_ref().map(|c| c.seed))
        .unwrap_or(0);

    let backend_handle = Backend::open(&backend, &globals.cache_dir)?;
    let classifier = match args.filter {
        FilterKind::None => None,
        FilterKind::Classifier => Some(backend_handle.require_classifier("--filter classifier")?),
        FilterKind::Auto => backend_handle.classifier(),
    };
    let filter_kind = if classifier.is_some() {
        FilterKind::Classifier
    } else {
        if args.filter == FilterKind::Auto {
            log::warn!("{backend} has no built-in classifier; keeping every candidate");
        }
        FilterKind::None
    };
    let settings = Settings {
        prompt: template.replace("{concept}", &concept),
        concept,
        n,
        backend,
        threshold,
        budget: n * factor,
        filter: filter_kind,
        seed,
    };
    run.configure(&out, &super::settings_bytes(&settings)?, seed)?;

    let classifier_filter = classifier.as_ref().map(|c| ClassifierFilter {
        classifier: c,
        distractors: c.distractors(&settings.concept),
    });
    let filter: &dyn ReferenceFilter = match &classifier_filter {
        Some(f) => f,
        None => &AcceptAll,
    };
    let request = ReferenceRequest {
        concept: settings.concept.clone(),
        prompt: settings.prompt.clone(),
        n,
        threshold,
        budget: settings.budget,
        seed,
    };
    let manifest_path = out.join(eraser_core::trainer::refs::MANIFEST_FILE);
    let result = generate_reference_set(backend_handle.get(), &request, filter, &out);
    if manifest_path.exists() {
        run.artifact(&manifest_path);
    }
    let manifest = result?;
    for entry in &manifest.entries {
        run.artifact(out.join(&entry.file));
    }
    Ok(serde_json::json!({
        "references": out,
        "accepted": manifest.entries.len(),
        "candidates_tried": manifest.candidates_tried,
    }))
}
