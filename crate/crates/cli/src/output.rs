//! Artifact plumbing: the JSON report envelope, the run manifest, and CSV
//! writers for deterministic paths and sweep tables.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mvlab::variational::{ControlGrid, SkeletonSolution};

use crate::config::SCHEMA_VERSION;
use crate::CliError;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Envelope every JSON artifact shares; `payload` is command-specific.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    /// 16 hex digits of the semantic config hash.
    pub config_hash: String,
    pub seed: u64,
    pub unix_time: u64,
    pub payload: serde_json::Value,
}

impl RunReport {
    pub fn new(command: &str, hash: u64, seed: u64, payload: serde_json::Value) -> Self {
        RunReport {
            schema_version: SCHEMA_VERSION,
            command: command.to_string(),
            config_hash: format!("{hash:016x}"),
            seed,
            unix_time: unix_now(),
            payload,
        }
    }
}

pub fn write_report(path: &Path, report: &RunReport) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, report)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestLine {
    pub unix_time: u64,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub duration_ms: u64,
    pub artifacts: Vec<String>,
}

pub fn append_manifest(dir: &Path, line: &ManifestLine) -> Result<(), CliError> {
    let path = dir.join("manifest.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| io_err(&path, e))?;
    let mut w = BufWriter::new(file);
    let json = serde_json::to_string(line)
        .map_err(|e| CliError::Runtime(format!("manifest: {e}")))?;
    writeln!(w, "{json}").map_err(|e| io_err(&path, e))?;
    w.flush().map_err(|e| io_err(&path, e))
}

/// One deterministic path: time, state, cumulative reaction, reaction TV.
pub fn skeleton_csv(path: &Path, skel: &SkeletonSolution) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let d = skel.dim();
    let mut header = String::from("time");
    for c in 0..d {
        header.push_str(&format!(",x{c}"));
    }
    for c in 0..d {
        header.push_str(&format!(",k{c}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    let times = skel.times();
    for k in 0..=skel.steps() {
        let mut row = format!("{}", times[k]);
        for v in skel.state(k) {
            row.push_str(&format!(",{v}"));
        }
        for v in skel.k_state(k) {
            row.push_str(&format!(",{v}"));
        }
        writeln!(w, "{row}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Piecewise-constant control values: time of the step start, one column
/// per coordinate.
pub fn control_csv(path: &Path, grid: &ControlGrid) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let d = grid.dim();
    let mut header = String::from("time");
    for c in 0..d {
        header.push_str(&format!(",h{c}"));
    }
    writeln!(w, "{header}").map_err(|e| io_err(path, e))?;
    for k in 0..grid.steps() {
        let mut row = format!("{}", k as f64 * grid.dt());
        for v in grid.value(k) {
            row.push_str(&format!(",{v}"));
        }
        writeln!(w, "{row}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Generic table writer: fixed column names, one closure-produced row of
/// already-formatted cells per record.
pub fn table_csv(
    path: &Path,
    columns: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", columns.join(",")).map_err(|e| io_err(path, e))?;
    for row in rows {
        debug_assert_eq!(row.len(), columns.len());
        writeln!(w, "{}", row.join(",")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Cell formatting for optional numbers: empty when absent.
pub fn opt_cell<T: std::fmt::Display>(v: &Option<T>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

pub fn artifact(dir: &Path, stem: &str, hash: u64, ext: &str) -> PathBuf {
    dir.join(format!("{stem}-{hash:016x}.{ext}"))
}
