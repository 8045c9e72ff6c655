//! Whole-file atomic writes and output framing.

use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Result;

/// Version line heading every CSV file this crate writes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

pub fn csv_header(columns: &str) -> String {
    format!("# schema_version={CSV_SCHEMA_VERSION}\n{columns}\n")
}

/// Writes to a temporary file in the target directory, then renames it
/// over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// The only non-deterministic part of any report.
pub fn metadata(command: &str, out_dir: &Path) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "tool": "flatcal",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "out_dir": out_dir.display().to_string(),
        "timestamp_unix": now,
    })
}

/// Report value with the `metadata` field removed, for comparing runs.
pub fn without_metadata(mut report: Value) -> Value {
    if let Some(obj) = report.as_object_mut() {
        obj.remove("metadata");
    }
    report
}

/// ECE-style fractions shown as percentages.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}
