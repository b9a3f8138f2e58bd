//! Provenance record written beside every artifact.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    /// Fully resolved settings, in config-file shape; `--config` accepts this file.
    pub config: Value,
    /// Path -> sha256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub checkpoint_hash: Option<String>,
    pub timings_ms: BTreeMap<String, f64>,
    pub summary: Value,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Collects hashes and timings while a command runs.
pub struct Recorder {
    command: String,
    argv: Vec<String>,
    config: Value,
    started: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    checkpoint: Option<PathBuf>,
    timings_ms: BTreeMap<String, f64>,
    summary: Value,
}

impl Recorder {
    pub fn new(command: &str, argv: Vec<String>, config: Value) -> Self {
        Self {
            command: command.into(),
            argv,
            config,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            checkpoint: None,
            timings_ms: BTreeMap::new(),
            summary: Value::Null,
        }
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    pub fn checkpoint(&mut self, path: &Path) {
        self.checkpoint = Some(path.to_path_buf());
    }

    /// Runs `f`, recording its wall-clock time under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings_ms
            .insert(stage.into(), t.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn summary(&mut self, summary: Value) {
        self.summary = summary;
    }

    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        let hash_all = |paths: &[PathBuf]| -> CliResult<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
                .collect()
        };
        self.timings_ms
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        let manifest = RunManifest {
            manifest_version: MANIFEST_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: self.command,
            argv: self.argv,
            config: self.config,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            checkpoint_hash: self.checkpoint.as_deref().map(sha256_file).transpose()?,
            timings_ms: self.timings_ms,
            summary: self.summary,
        };
        std::fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(manifest)
    }
}

/// `<output>.manifest.json`.
pub fn manifest_path_for(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
