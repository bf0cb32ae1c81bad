//! Sidecar files recording how an artifact was produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const SIDECAR: &str = "provenance.json";

#[derive(Debug, Serialize)]
pub struct Provenance<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub argv: &'a [String],
    pub config: &'a serde_json::Value,
    pub seed: Option<u64>,
    /// Input path → SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub created_at: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes a file, or every file below a directory (sidecars excluded).
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut files = Vec::new();
            walk(p, &mut files)?;
            for f in files {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for e in entries {
        if e.is_dir() {
            walk(&e, files)?;
        } else if !e.file_name().is_some_and(|n| n.to_string_lossy().ends_with(SIDECAR)) {
            files.push(e);
        }
    }
    Ok(())
}

/// Sidecar location: `<dir>/provenance.json` for directory artifacts,
/// `<file>.provenance.json` otherwise.
pub fn sidecar_path(artifact: &Path) -> PathBuf {
    if artifact.is_dir() {
        artifact.join(SIDECAR)
    } else {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".");
        name.push(SIDECAR);
        artifact.with_file_name(name)
    }
}

pub fn write(artifact: &Path, record: &Provenance<'_>) -> Result<PathBuf> {
    let path = sidecar_path(artifact);
    let text = serde_json::to_string_pretty(record)? + "\n";
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
