use std::path::PathBuf;

use anyhow::{Context, Result};
use eraser_core::eval::EvaluationReport;
use serde::Serialize;

use super::eval::{REPORT_CSV, REPORT_JSON};
use crate::manifest::Run;
use crate::{config_error, Globals};

#[derive(Debug, clap::Args)]
pub struct Args {
    /// Evaluation reports (`report.json` files or the directories holding
    /// them), merged in the given order.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory; defaults to `runs/report`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Settings {
    inputs: Vec<PathBuf>,
}

pub fn run(args: Args, globals: &Globals, run: &mut Run) -> Result<serde_json::Value> {
    let inputs: Vec<PathBuf> = args
        .inputs
        .iter()
        .map(|p| {
            if p.is_dir() {
                p.join(REPORT_JSON)
            } else {
                p.clone()
            }
        })
        .collect();
    let mut merged = EvaluationReport::default();
    for path in &inputs {
        if !path.is_file() {
            return Err(config_error(format!("report {} not found", path.display())));
        }
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let report: EvaluationReport = serde_json::from_str(&text).map_err(|e| {
            config_error(format!(
                "{} is not an evaluation report: {e}",
                path.display()
            ))
        })?;
        merged.reports.extend(report.reports);
        merged.notes.extend(report.notes);
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/report"));
    let settings = Settings { inputs };
    run.configure(
        &out,
        &super::settings_bytes(&settings)?,
        globals.seed.unwrap_or(0),
    )?;
    let json_path = out.join(REPORT_JSON);
    let csv_path = out.join(REPORT_CSV);
    merged.write(&json_path, &csv_path)?;
    run.artifact(&json_path);
    run.artifact(&csv_path);
    Ok(serde_json::json!({ "report": json_path, "rows": merged.reports.len() }))
}
