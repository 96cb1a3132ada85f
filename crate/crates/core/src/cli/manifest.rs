//! `run.json`: what a command read, what it wrote, and how it ended.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;

pub const MANIFEST_FILE: &str = "run.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub config: BTreeMap<String, String>,
    /// Netspec role (`base`, `branch`) to content hash.
    pub netspec_hashes: BTreeMap<String, String>,
    /// Input path to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Hash over all `inputs`, order-independent.
    pub input_hash: String,
    pub started: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finished: Option<String>,
    pub outputs: Vec<String>,
}

/// Every command run against one output directory, oldest first.
#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestFile {
    runs: Vec<RunManifest>,
}

/// Git-style object hash: SHA-256 of `blob <len>\0` followed by the content.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Keeps the manifest of the running command in step with `run.json`.
pub struct ManifestWriter {
    path: PathBuf,
    index: usize,
    file: ManifestFile,
    pub manifest: RunManifest,
}

impl ManifestWriter {
    /// Appends a `running` entry to `<out>/run.json` and writes it at once.
    pub fn begin(out: &Path, command: &str) -> Result<Self, CliError> {
        let path = out.join(MANIFEST_FILE);
        let file = match std::fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).unwrap_or_else(|e| {
                log::warn!("{}: unreadable manifest ({e}); starting a new one", path.display());
                ManifestFile::default()
            }),
            Err(_) => ManifestFile::default(),
        };
        let mut w = Self {
            path,
            index: file.runs.len(),
            file,
            manifest: RunManifest {
                command: command.to_string(),
                status: RunStatus::Running,
                exit_code: None,
                error: None,
                seed: None,
                deterministic: false,
                config: BTreeMap::new(),
                netspec_hashes: BTreeMap::new(),
                inputs: BTreeMap::new(),
                input_hash: content_hash(b""),
                started: now(),
                finished: None,
                outputs: Vec::new(),
            },
        };
        w.file.runs.push(w.manifest.clone());
        w.flush()?;
        Ok(w)
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.manifest
            .inputs
            .insert(path.display().to_string(), content_hash(bytes));
        let listing: String = self
            .manifest
            .inputs
            .iter()
            .map(|(p, h)| format!("{h}  {p}\n"))
            .collect();
        self.manifest.input_hash = content_hash(listing.as_bytes());
    }

    pub fn record_output(&mut self, path: &Path) {
        let p = path.display().to_string();
        if !self.manifest.outputs.contains(&p) {
            self.manifest.outputs.push(p);
        }
    }

    /// Rewrites `run.json` with the current state.
    pub fn flush(&mut self) -> Result<(), CliError> {
        self.file.runs[self.index] = self.manifest.clone();
        let json = serde_json::to_string_pretty(&self.file).expect("manifest serializes");
        std::fs::write(&self.path, json + "\n").map_err(|e| CliError::io(&self.path, e))
    }

    /// Marks the run finished with `result` and writes the final state.
    pub fn finish(&mut self, result: &Result<(), CliError>) -> Result<(), CliError> {
        self.manifest.finished = Some(now());
        match result {
            Ok(()) => {
                self.manifest.status = RunStatus::Ok;
                self.manifest.exit_code = Some(0);
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.exit_code = Some(e.exit_code());
                self.manifest.error = Some(e.to_string());
            }
        }
        self.flush()
    }
}
