pub mod embed;
pub mod erase;
pub mod eval;
pub mod gen_refs;
pub mod report;

use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

/// Canonical bytes of a settings record, as hashed into the manifest.
pub fn settings_bytes(settings: &impl Serialize) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec(settings)?)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Parses a comma-separated list.
pub fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse()
                .map_err(|_| crate::config_error(format!("bad {what} value {s:?}")))
        })
        .collect()
}
