use std::path::PathBuf;

use anyhow::{Context, Result};
use eraser_core::backend::toy;
use eraser_core::backend::Denoiser;
use eraser_core::eval::{
    ingest_fid, DetectionFile, EvaluationReport, Evaluator, PromptSuite, SuiteKind,
    DEFAULT_DETECTION_THRESHOLD,
};
use eraser_core::trainer::{load_erased, Checkpoint};
use serde::Serialize;

use crate::backend::Backend;
use crate::manifest::{sha256_hex, Run};
use crate::{config_error, Globals};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricName {
    Asr,
    Mcp,
    Categories,
}

impl std::str::FromStr for MetricName {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(Self::Asr),
            "mcp" => Ok(Self::Mcp),
            "categories" => Ok(Self::Categories),
            _ => Err(()),
        }
    }
}

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Erased checkpoint to evaluate. Without one the pretrained model is
    /// evaluated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Backend locator; defaults to the checkpoint's backend, else `toy:0`.
    #[arg(long)]
    backend: Option<String>,
    /// Erased concept; defaults to the checkpoint's concept.
    #[arg(long)]
    concept: Option<String>,
    /// Comma-separated subset of asr, mcp, categories.
    #[arg(long, default_value = "")]
    metrics: String,
    /// Target-inductive prompts for ASR, one per line. The toy backend
    /// falls back to its built-in templates.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Related concepts for MCP, comma-separated. Toy default: every other
    /// toy concept.
    #[arg(long)]
    related: Option<String>,
    /// Prompt file for one related concept, as `<concept>=<path>`.
    #[arg(long = "related-prompts", value_name = "CONCEPT=PATH")]
    related_prompts: Vec<String>,
    /// Images generated per prompt.
    #[arg(long, default_value_t = 4)]
    n_per_prompt: usize,
    /// Per-image detector output (JSON) for the category table.
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DETECTION_THRESHOLD)]
    detection_threshold: f64,
    /// Adversarial prompt files produced by external attack tools.
    #[arg(long)]
    ingest_adversarial: Vec<PathBuf>,
    /// FID score computed by an external tool.
    #[arg(long)]
    ingest_fid: Option<PathBuf>,
    /// Output directory; defaults to `runs/eval`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Settings {
    backend: String,
    checkpoint: Option<PathBuf>,
    /// SHA-256 of the checkpoint file.
    checkpoint_sha256: Option<String>,
    concept: String,
    metrics: Vec<MetricName>,
    asr_prompts: Vec<String>,
    mcp_suites: Vec<(String, Vec<String>)>,
    n_per_prompt: usize,
    detections: Option<PathBuf>,
    detection_threshold: f64,
    ingest_adversarial: Vec<PathBuf>,
    ingest_fid: Option<PathBuf>,
    seed: u64,
}

fn read_prompts(path: &std::path::Path) -> Result<Vec<String>> {
    if !path.exists() {
        return Err(config_error(format!(
            "prompt file {} not found",
            path.display()
        )));
    }
    Ok(eraser_core::manifold::read_prompt_file(path)?)
}

pub fn run(args: Args, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    let mut metrics: Vec<MetricName> = super::parse_list(&args.metrics, "metric")?;
    metrics.sort();
    metrics.dedup();
    if metrics.is_empty() && args.ingest_adversarial.is_empty() && args.ingest_fid.is_none() {
        return Err(config_error(
            "nothing to do: pass --metrics and/or --ingest-adversarial / --ingest-fid",
        ));
    }
    if !(0.0..=1.0).contains(&args.detection_threshold) {
        return Err(config_error("--detection-threshold must lie in [0, 1]"));
    }
    if metrics.contains(&MetricName::Categories) && args.detections.is_none() {
        return Err(config_error("the categories metric needs --detections"));
    }
    let inputs = args
        .detections
        .iter()
        .chain(&args.ingest_adversarial)
        .chain(&args.ingest_fid);
    for path in inputs {
        if !path.exists() {
            return Err(config_error(format!("{} not found", path.display())));
        }
    }

    // The checkpoint is read before anything is generated.
    let (ckpt_bytes, ckpt_meta) = match &args.checkpoint {
        Some(path) => {
            if !path.exists() {
                return Err(config_error(format!(
                    "checkpoint {} not found",
                    path.display()
                )));
            }
            let bytes =
                std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let meta = Checkpoint::load(path, candle_core::DType::F64, &candle_core::Device::Cpu)
                .map(|c| c.meta)
                .ok();
            (Some(bytes), meta)
        }
        None => (None, None),
    };
    let backend_locator = args
        .backend
        .clone()
        .or_else(|| ckpt_meta.as_ref().map(|m| m.backend.clone()))
        .unwrap_or_else(|| "toy:0".into());
    let concept = args
        .concept
        .clone()
        .or_else(|| ckpt_meta.as_ref().map(|m| m.config.concept_name.clone()))
        .ok_or_else(|| config_error("--concept is required without --checkpoint"))?;
    let is_toy = toy::parse_locator(&backend_locator).is_some();

    let needs_model =
        metrics.iter().any(|m| *m != MetricName::Categories) || !args.ingest_adversarial.is_empty();
    if needs_model && args.n_per_prompt == 0 {
        return Err(config_error("--n-per-prompt must be at least 1"));
    }
    let asr_prompts = if metrics.contains(&MetricName::Asr) {
        match &args.prompts {
            Some(p) => read_prompts(p)?,
            None if is_toy => toy::concept_prompts(&concept),
            None => return Err(config_error("ASR on this backend needs --prompts")),
        }
    } else {
        Vec::new()
    };
    let mut mcp_suites = Vec::new();
    if metrics.contains(&MetricName::Mcp) {
        let related: Vec<String> = match &args.related {
            Some(list) => super::parse_list(list, "related concept")?,
            None if is_toy => toy::CONCEPTS
                .iter()
                .filter(|c| **c != concept)
                .map(|c| c.to_string())
                .collect(),
            None => return Err(config_error("MCP on this backend needs --related")),
        };
        for c in related {
            let file = args.related_prompts.iter().find_map(|spec| {
                let (name, path) = spec.split_once('=')?;
                (name == c).then(|| PathBuf::from(path))
            });
            let prompts = match file {
                Some(p) => read_prompts(&p)?,
                None if is_toy => toy::concept_prompts(&c),
                None => {
                    return Err(config_error(format!(
                        "no prompts for related concept {c:?}; pass --related-prompts {c}=<file>"
                    )))
                }
            };
            mcp_suites.push((c, prompts));
        }
    }

    let seed = globals.seed.unwrap_or(0);
    let settings = Settings {
        backend: backend_locator.clone(),
        checkpoint: args.checkpoint.clone(),
        checkpoint_sha256: ckpt_bytes.as_deref().map(sha256_hex),
        concept: concept.clone(),
        metrics: metrics.clone(),
        asr_prompts,
        mcp_suites,
        n_per_prompt: args.n_per_prompt,
        detections: args.detections.clone(),
        detection_threshold: args.detection_threshold,
        ingest_adversarial: args.ingest_adversarial.clone(),
        ingest_fid: args.ingest_fid.clone(),
        seed,
    };
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/eval"));
    run.configure(&out, &super::settings_bytes(&settings)?, seed)?;

    let mut report = EvaluationReport::default();
    if needs_model {
        let backend = Backend::open(&backend_locator, &globals.cache_dir)?;
        let classifier = backend.require_classifier("ASR/MCP scoring")?;
        let model: Box<dyn Denoiser> = match &args.checkpoint {
            Some(path) => {
                let b = backend.get();
                load_erased(b, &Checkpoint::load(path, b.dtype(), b.device())?)?
            }
            None => backend.get().snapshot()?,
        };
        let distractors = |c: &str| classifier.distractors(c);
        let evaluator = Evaluator {
            backend: backend.get(),
            model: model.as_ref(),
            classifier: &classifier,
            distractors: &distractors,
            n_per_prompt: args.n_per_prompt,
            seed,
        };
        if metrics.contains(&MetricName::Asr) {
            let suite = PromptSuite::new(
                &concept,
                settings.asr_prompts.clone(),
                SuiteKind::TargetInductive,
            )?;
            report.reports.push(evaluator.compute_asr(&suite)?);
        }
        if metrics.contains(&MetricName::Mcp) {
            let suites = settings
                .mcp_suites
                .iter()
                .map(|(c, p)| PromptSuite::new(c, p.clone(), SuiteKind::RelatedPreservation))
                .collect::<eraser_core::Result<Vec<_>>>()?;
            report.reports.extend(evaluator.compute_mcp(&suites)?);
        }
        for path in &args.ingest_adversarial {
            report
                .reports
                .push(evaluator.score_adversarial_file(path, &concept)?);
        }
        if args.checkpoint.is_none() {
            report
                .notes
                .push(format!("pretrained model of {backend_locator}"));
        }
    }
    if let Some(path) = &args.detections {
        let file = DetectionFile::load(path)?;
        report
            .reports
            .push(file.report(&concept, args.detection_threshold, seed));
    }
    if let Some(path) = &args.ingest_fid {
        report.reports.push(ingest_fid(path, &concept, seed)?);
    }

    let json_path = out.join(REPORT_JSON);
    let csv_path = out.join(REPORT_CSV);
    report.write(&json_path, &csv_path)?;
    run.artifact(&json_path);
    run.artifact(&csv_path);
    let values: serde_json::Map<String, serde_json::Value> = report
        .reports
        .iter()
        .map(|r| {
            (
                format!("{}:{}", r.metric.label(), r.concept),
                r.scalar().into(),
            )
        })
        .collect();
    Ok(serde_json::json!({ "report": json_path, "values": values }))
}
