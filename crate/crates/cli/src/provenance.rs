//! Provenance records written beside every output.
//!
//! Everything except `created_unix` is a function of the arguments and
//! inputs, so repeated runs differ in that one field only.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::Value;

use crate::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Versions {
    pub ckafscil: &'static str,
    pub provenance_format: u32,
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub versions: Versions,
    pub created_unix: u64,
}

impl Provenance {
    pub fn new(command: &str, argv: &[String], seed: Option<u64>, config: Value) -> Self {
        Self {
            command: command.into(),
            args: argv.iter().skip(1).cloned().collect(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                ckafscil: env!("CARGO_PKG_VERSION"),
                provenance_format: FORMAT_VERSION,
            },
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        }
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.display().to_string());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        write_json(path, self)
    }

    /// For commands whose only output is standard output.
    pub fn emit_stderr(&self) -> Result<(), CliError> {
        eprintln!("{}", serde_json::to_string(self)?);
        Ok(())
    }
}

/// `report.json` -> `report.provenance.json`.
pub fn sidecar(report: &Path) -> PathBuf {
    let stem = report
        .file_stem()
        .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
    report.with_file_name(format!("{stem}.provenance.json"))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Data(format!("{}: {e}", parent.display())))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
