use std::path::PathBuf;

use anyhow::Result;
use eraser_core::manifold::{
    build_prompt_bank, diagnose_manifold, read_prompt_file, DirichletSpec, ManifoldDiagnostic,
};
use eraser_core::rng::{derive_seed, stream};
use serde::Serialize;

use crate::backend::open_text_encoder;
use crate::manifest::Run;
use crate::{config_error, Globals};

pub const SERIES_FILE: &str = "series.json";

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Prompt bank, one prompt per line.
    #[arg(long)]
    bank: PathBuf,
    /// Concept name recorded in the output; defaults to the bank file stem.
    #[arg(long)]
    concept: Option<String>,
    /// Backend whose text encoder embeds the prompts.
    #[arg(long, default_value = "toy:0")]
    backend: String,
    /// Comma-separated temperatures; one series per value.
    #[arg(long, default_value = "0.7")]
    tau: String,
    /// Comma-separated bank sizes (prefixes of the bank). Defaults to the
    /// full bank.
    #[arg(long)]
    bank_sizes: Option<String>,
    /// Manifold samples per point.
    #[arg(long, default_value_t = 200)]
    n_samples: usize,
    /// Prompt whose embedding is the comparison target; defaults to the
    /// first bank prompt.
    #[arg(long)]
    target: Option<String>,
    /// Output directory; defaults to `runs/embed`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Settings {
    bank: PathBuf,
    concept: String,
    backend: String,
    taus: Vec<f64>,
    bank_sizes: Vec<usize>,
    n_samples: usize,
    target: String,
    seed: u64,
}

/// Plot-ready output: one series per temperature, one point per bank size.
#[derive(Debug, Serialize)]
struct SeriesFile {
    concept: String,
    target: String,
    series: Vec<Series>,
}

#[derive(Debug, Serialize)]
struct Series {
    tau: f64,
    points: Vec<ManifoldDiagnostic>,
}

pub fn run(args: Args, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    if !args.bank.is_file() {
        return Err(config_error(format!(
            "prompt bank {} not found",
            args.bank.display()
        )));
    }
    let prompts = read_prompt_file(&args.bank)?;
    if prompts.is_empty() {
        return Err(config_error(format!(
            "prompt bank {} is empty",
            args.bank.display()
        )));
    }
    let taus: Vec<f64> = super::parse_list(&args.tau, "tau")?;
    if taus.is_empty() {
        return Err(config_error("--tau needs at least one value"));
    }
    for &tau in &taus {
        DirichletSpec::new(tau)?;
    }
    let bank_sizes: Vec<usize> = match &args.bank_sizes {
        Some(list) => super::parse_list(list, "bank size")?,
        None => vec![prompts.len()],
    };
    if let Some(bad) = bank_sizes.iter().find(|&&n| n == 0 || n > prompts.len()) {
        return Err(config_error(format!(
            "bank size {bad} is outside 1..={}",
            prompts.len()
        )));
    }
    if args.n_samples == 0 {
        return Err(config_error("--n-samples must be at least 1"));
    }
    let concept = args.concept.unwrap_or_else(|| {
        args.bank
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "concept".into())
    });
    let target = args.target.unwrap_or_else(|| prompts[0].clone());
    let seed = globals.seed.unwrap_or(0);
    let settings = Settings {
        bank: args.bank.clone(),
        concept,
        backend: args.backend.clone(),
        taus,
        bank_sizes,
        n_samples: args.n_samples,
        target,
        seed,
    };
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/embed"));
    run.configure(&out, &super::settings_bytes(&settings)?, seed)?;

    let encoder = open_text_encoder(&settings.backend)?;
    let bank = build_prompt_bank(&settings.concept, &prompts, encoder.as_ref())?;
    let target_embedding = encoder.encode(&settings.target)?;
    let mut series = Vec::with_capacity(settings.taus.len());
    for (i, &tau) in settings.taus.iter().enumerate() {
        let spec = DirichletSpec::new(tau)?;
        // Each point has its own stream, so adding taus or sizes leaves the
        // other points unchanged.
        let tau_seed = derive_seed(seed, "sample-embed", i as u64);
        let mut points = Vec::with_capacity(settings.bank_sizes.len());
        for &n in &settings.bank_sizes {
            let mut rng = stream(tau_seed, "bank-size", n as u64);
            let stats = diagnose_manifold(
                &bank.truncated(n)?,
                &spec,
                &target_embedding,
                settings.n_samples,
                &mut rng,
            )?;
            points.push(ManifoldDiagnostic {
                bank_size: n,
                tau,
                n_samples: settings.n_samples,
                mean_cosine: stats.mean,
                std_cosine: stats.std,
                seed,
            });
        }
        series.push(Series { tau, points });
    }
    let file = SeriesFile {
        concept: settings.concept.clone(),
        target: settings.target.clone(),
        series,
    };
    let path = out.join(SERIES_FILE);
    super::write_json(&path, &file)?;
    run.artifact(&path);
    Ok(serde_json::json!({ "series": path, "n_series": file.series.len() }))
}
