//! Run manifests (what a command produced, with checksums) and the
//! per-directory lock.

use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult, IoContext};

pub const LOCK_FILE: &str = ".flowpg.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Contents depend on wall-clock time (e.g. the training log), so the
    /// checksum is not expected to reproduce across runs.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub engine_version: String,
    pub config: serde_json::Value,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub files: Vec<FileRecord>,
}

pub fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> CliResult<(String, u64)> {
    let mut f = File::open(path).at(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).at(path)?;
        if n == 0 {
            break;
        }
        total += n as u64;
        h.update(&buf[..n]);
    }
    let hex = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok((hex, total))
}

pub fn manifest_path(out: &Path, command: &str) -> PathBuf {
    out.join("manifests").join(format!("{command}.json"))
}

/// Collects produced files for a manifest.
pub struct Recorder {
    out: PathBuf,
    command: String,
    config: serde_json::Value,
    started: f64,
    files: Vec<FileRecord>,
}

impl Recorder {
    pub fn new(out: &Path, command: &str, config: serde_json::Value) -> Self {
        Self { out: out.to_path_buf(), command: command.into(), config, started: unix_now(), files: Vec::new() }
    }

    pub fn add(&mut self, path: &Path, timing: bool) -> CliResult<()> {
        let (sha256, bytes) = sha256_file(path)?;
        let rel = path.strip_prefix(&self.out).unwrap_or(path).to_string_lossy().replace('\\', "/");
        self.files.retain(|f| f.path != rel);
        self.files.push(FileRecord { path: rel, sha256, bytes, timing });
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<RunManifest> {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = RunManifest {
            command: self.command.clone(),
            engine_version: flowpg_core::VERSION.to_string(),
            config: self.config,
            started_unix: self.started,
            finished_unix: unix_now(),
            files: self.files,
        };
        let path = manifest_path(&self.out, &self.command);
        fs::create_dir_all(path.parent().unwrap()).at(&path)?;
        let text = serde_json::to_string_pretty(&m).map_err(flowpg_core::FlowError::from)?;
        fs::write(&path, text + "\n").at(&path)?;
        Ok(m)
    }
}

pub fn read_manifest(out: &Path, command: &str) -> CliResult<RunManifest> {
    let path = manifest_path(out, command);
    if !path.is_file() {
        return Err(CliError::Missing(vec![path.display().to_string()]));
    }
    let text = fs::read_to_string(&path).at(&path)?;
    Ok(serde_json::from_str(&text).map_err(flowpg_core::FlowError::from)?)
}

/// Files listed in the manifest that are absent or whose checksum changed.
pub fn verify(out: &Path, m: &RunManifest) -> CliResult<Vec<String>> {
    let mut bad = Vec::new();
    for f in &m.files {
        let p = out.join(&f.path);
        if !p.is_file() {
            bad.push(format!("{} (missing)", f.path));
        } else if sha256_file(&p)?.0 != f.sha256 {
            bad.push(format!("{} (checksum differs)", f.path));
        }
    }
    Ok(bad)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).at(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).at(&path)?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf())),
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
