//! Run manifests: everything needed to re-run a command and check its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::sha256_hex;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::write_file;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path, label: impl Into<String>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { path: label.into(), sha256: sha256_hex(&bytes) })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub verb: String,
    pub tool_version: String,
    /// Fully resolved configuration after flags and environment overrides.
    pub config: RunConfig,
    pub config_sha256: String,
    pub seed: u64,
    pub checkpoint: Option<FileHash>,
    /// Verb-specific arguments, input paths included.
    pub args: Value,
    pub inputs: Vec<FileHash>,
    /// Output files relative to the output directory, in name order.
    pub outputs: Vec<FileHash>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        if m.config.digest() != m.config_sha256 {
            return Err(Error::Data(format!("{}: config hash does not match its config", path.display())));
        }
        Ok(m)
    }

    /// Output entries whose hashes differ from `other`, or that only one side has.
    pub fn output_mismatches(&self, other: &[FileHash]) -> Vec<String> {
        let mut bad = Vec::new();
        for f in &self.outputs {
            match other.iter().find(|g| g.path == f.path) {
                Some(g) if g.sha256 == f.sha256 => {}
                Some(_) => bad.push(format!("{} differs", f.path)),
                None => bad.push(format!("{} missing", f.path)),
            }
        }
        for g in other {
            if !self.outputs.iter().any(|f| f.path == g.path) {
                bad.push(format!("{} unexpected", g.path));
            }
        }
        bad
    }
}

/// Hashes every regular file under `dir` except the manifest itself, sorted by relative path.
pub fn hash_outputs(dir: &Path) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    collect(dir, dir, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<FileHash>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
        if rel != MANIFEST_FILE {
            out.push(FileHash::of(&path, rel)?);
        }
    }
    Ok(())
}
