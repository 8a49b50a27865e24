//! `eraser`: reference generation, erasure training, evaluation and
//! embedding diagnostics from the command line.
//!
//! Every command writes its outputs into `--out`, together with
//! `config.json` (the resolved settings actually used) and
//! `run_manifest.json`. Exit codes: 0 success, 2 configuration error,
//! 3 runtime failure. Failures print one JSON error record on stderr; once
//! the output directory exists, a failed run still writes its manifest.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod backend;
mod commands;
mod logging;
mod manifest;

use manifest::Run;

#[derive(Debug, Parser)]
#[command(
    name = "eraser",
    version,
    about = "Concept erasure for latent diffusion models"
)]
struct Cli {
    /// Master seed. Overrides the seed in configuration files; every
    /// sub-seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Where pretrained toy backends are cached.
    #[arg(
        long,
        global = true,
        env = "ERASER_CACHE",
        default_value = ".eraser-cache"
    )]
    cache_dir: PathBuf,

    /// Log level for the JSON-lines log on stderr.
    #[arg(long, global = true, env = "ERASER_LOG", default_value = "info")]
    log_level: log::LevelFilter,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a filtered reference image set for a concept.
    GenRefs(commands::gen_refs::Args),
    /// Train an erasure checkpoint from a configuration file.
    Erase(commands::erase::EraseArgs),
    /// Erase several concepts one after another.
    Chain(commands::erase::ChainArgs),
    /// Compute or ingest evaluation metrics.
    Eval(commands::eval::Args),
    /// Cosine-similarity diagnostics of the concept manifold.
    SampleEmbed(commands::embed::Args),
    /// Merge evaluation reports into one document.
    Report(commands::report::Args),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenRefs(_) => "gen-refs",
            Command::Erase(_) => "erase",
            Command::Chain(_) => "chain",
            Command::Eval(_) => "eval",
            Command::SampleEmbed(_) => "sample-embed",
            Command::Report(_) => "report",
        }
    }
}

/// Settings shared by all commands.
pub struct Globals {
    pub seed: Option<u64>,
    pub cache_dir: PathBuf,
}

/// A problem with the user's input, reported with exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn is_config(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        cause.is::<ConfigError>()
            || cause
                .downcast_ref::<eraser_core::Error>()
                .is_some_and(eraser_core::Error::is_config)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    logging::init(cli.log_level);
    let globals = Globals {
        seed: cli.seed,
        cache_dir: cli.cache_dir,
    };
    let name = cli.command.name();
    let mut run = Run::new(name);
    let result = match cli.command {
        Command::GenRefs(args) => commands::gen_refs::run(args, &globals, &mut run),
        Command::Erase(args) => commands::erase::run_erase(args, &globals, &mut run),
        Command::Chain(args) => commands::erase::run_chain(args, &globals, &mut run),
        Command::Eval(args) => commands::eval::run(args, &globals, &mut run),
        Command::SampleEmbed(args) => commands::embed::run(args, &globals, &mut run),
        Command::Report(args) => commands::report::run(args, &globals, &mut run),
    };
    let result = result.and_then(|summary| {
        let manifest = run.finish_ok()?;
        let mut out = serde_json::json!({ "manifest": manifest });
        if let serde_json::Value::Object(extra) = summary {
            out.as_object_mut().unwrap().extend(extra);
        }
        println!("{}", serde_json::to_string(&out)?);
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let config = is_config(&err);
            let code = if config { 2 } else { 3 };
            // Errors caught before the output directory exists leave no trace.
            if let Err(e) = run.finish_failed(&err) {
                log::error!("could not write the run manifest: {e:#}");
            }
            let record = serde_json::json!({
                "error": {
                    "command": name,
                    "kind": if config { "config" } else { "runtime" },
                    "exit_code": code,
                    "message": format!("{err}"),
                    "causes": err.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
