//! Run manifests: the resolved configuration of a run plus hashes of what it
//! read and wrote.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use hintpose::{Error, ExperimentConfig, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub subcommand: String,
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wallclock_seconds: f64,
}

impl RunManifest {
    /// Same run with wallclock removed; equal for reproduced runs.
    pub fn without_timing(&self) -> Self {
        Self {
            wallclock_seconds: 0.0,
            ..self.clone()
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })?;
        fs::write(path, json + "\n").map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            message: e.to_string(),
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<Artifact> {
    let io = |e| Error::Io {
        path: path.into(),
        source: e,
    };
    let mut f = fs::File::open(path).map_err(io)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(io)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        bytes += n as u64;
    }
    let sha256 = hasher.finalize().iter().map(|b| format!("{b:02x}")).collect();
    Ok(Artifact {
        path: path.display().to_string(),
        sha256,
        bytes,
    })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    for entry in entries {
        let p = entry
            .map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?
            .path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes a file, or every file under a directory in sorted path order.
/// Files named `manifest.json` or ending in `.manifest.json` are skipped.
pub fn hash_paths(paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            collect_files(p, &mut files)?;
        } else {
            files.push(p.clone());
        }
    }
    files.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name != "manifest.json" && !name.ends_with(".manifest.json")
    });
    files.sort();
    files.dedup();
    files.iter().map(|p| sha256_file(p)).collect()
}
