//! Per-run record: what was run, with which settings, on which inputs.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stori_core::model_io::write_atomic;

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

#[derive(Debug, Clone, Serialize)]
pub struct FileRecord {
    pub role: String,
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub started_unix: f64,
    pub wall_seconds: f64,
    pub seed: u64,
    pub config: Settings,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<FileRecord>,
    pub timings: Vec<Timing>,
    /// Command-specific summary.
    pub result: serde_json::Value,
}

pub fn sha256_file(path: &Path) -> std::io::Result<(u64, String)> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        total += n as u64;
        h.update(&buf[..n]);
    }
    Ok((total, format!("{:x}", h.finalize())))
}

/// Collects inputs, outputs and phase timings while a command runs.
pub struct Run {
    command: String,
    started: Instant,
    started_unix: f64,
    phase_start: Instant,
    timings: Vec<Timing>,
    inputs: Vec<FileRecord>,
    outputs: Vec<FileRecord>,
    input_paths: BTreeSet<PathBuf>,
}

fn canonical(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

impl Run {
    pub fn start(command: &str) -> Self {
        let now = Instant::now();
        Self {
            command: command.to_string(),
            started: now,
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0),
            phase_start: now,
            timings: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            input_paths: BTreeSet::new(),
        }
    }

    /// Close the current phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.push(Timing {
            phase: name.to_string(),
            seconds: (now - self.phase_start).as_secs_f64(),
        });
        self.phase_start = now;
    }

    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let (bytes, sha256) = sha256_file(path).map_err(|e| CliError::read(path, e))?;
        self.input_paths.insert(canonical(path));
        self.inputs.push(FileRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            bytes,
            sha256,
        });
        Ok(())
    }

    /// Refuse to write over any recorded input.
    pub fn check_output(&self, path: &Path) -> CliResult<()> {
        if self.input_paths.contains(&canonical(path)) {
            return Err(CliError::invalid(format!(
                "output {} would overwrite an input",
                path.display()
            )));
        }
        Ok(())
    }

    /// Atomically write an output and record its digest.
    pub fn write(&mut self, role: &str, path: &Path, bytes: &[u8]) -> CliResult<()> {
        self.check_output(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| CliError::write(dir, e))?;
        }
        write_atomic(path, bytes).map_err(|e| CliError::write(path, e))?;
        self.outputs.push(FileRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            bytes: bytes.len() as u64,
            sha256: format!("{:x}", Sha256::digest(bytes)),
        });
        Ok(())
    }

    /// Record a file some other writer produced.
    pub fn written(&mut self, role: &str, path: &Path) -> CliResult<()> {
        let (bytes, sha256) = sha256_file(path).map_err(|e| CliError::write(path, e))?;
        self.outputs.push(FileRecord {
            role: role.to_string(),
            path: path.to_path_buf(),
            bytes,
            sha256,
        });
        Ok(())
    }

    /// Write `<out_dir>/<command>.manifest.json` and return its path.
    pub fn finish(mut self, settings: &Settings, result: serde_json::Value) -> CliResult<PathBuf> {
        self.phase("finish");
        let path = settings.out_dir.join(format!("{}.manifest.json", self.command));
        let manifest = RunManifest {
            command: self.command.clone(),
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().collect(),
            started_unix: self.started_unix,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            seed: settings.seed,
            config: settings.clone(),
            inputs: self.inputs,
            outputs: self.outputs,
            timings: self.timings,
            result,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::create_dir_all(&settings.out_dir).map_err(|e| CliError::write(&settings.out_dir, e))?;
        write_atomic(&path, &json).map_err(|e| CliError::write(&path, e))?;
        Ok(path)
    }
}
