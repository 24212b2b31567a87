use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lens_core::codec::write_atomic;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
    /// False for outputs carrying wall-clock timings; replay skips them.
    pub deterministic: bool,
}

/// Provenance for one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name, replayable verbatim.
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub tool_version: String,
    pub wall_time_seconds: f64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn artifact(path: &Path, deterministic: bool) -> Result<Artifact> {
    let bytes = fs::read(path).with_context(|| format!("reading artifact {}", path.display()))?;
    Ok(Artifact {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        bytes: bytes.len() as u64,
        deterministic,
    })
}

/// Collects what a command wrote, then records it.
#[derive(Debug, Default)]
pub struct Outputs {
    pub config: Option<serde_json::Value>,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<(PathBuf, bool)>,
    /// Where the manifest goes.
    pub manifest: PathBuf,
    /// Set when the command ran but its check failed.
    pub failure: Option<String>,
}

impl Outputs {
    pub fn new(manifest: PathBuf) -> Self {
        Self {
            manifest,
            ..Self::default()
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_owned(), value);
    }

    pub fn file(&mut self, path: PathBuf) {
        self.artifacts.push((path, true));
    }

    pub fn volatile_file(&mut self, path: PathBuf) {
        self.artifacts.push((path, false));
    }

    pub fn write_manifest(
        &self,
        command: &str,
        args: &[String],
        seconds: f64,
    ) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: command.to_owned(),
            args: args.to_vec(),
            config: self.config.clone().unwrap_or(serde_json::Value::Null),
            seeds: self.seeds.clone(),
            artifacts: self
                .artifacts
                .iter()
                .map(|(p, det)| artifact(p, *det))
                .collect::<Result<_>>()?,
            tool_version: env!("CARGO_PKG_VERSION").to_owned(),
            wall_time_seconds: seconds,
        };
        write_atomic(
            &self.manifest,
            serde_json::to_string_pretty(&manifest)?.as_bytes(),
        )?;
        Ok(manifest)
    }
}

/// `dir/manifest.json` for directory outputs, `<file>.manifest.json` otherwise.
pub fn manifest_for_file(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}
