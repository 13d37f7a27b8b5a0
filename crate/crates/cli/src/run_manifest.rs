use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::Result;

/// Written once by every command that produces artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// sha256 over every input file, see [`hash_inputs`].
    pub input_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub created_at: DateTime<Utc>,
}

impl RunManifest {
    pub fn write(&self, out: &Path, name: &str) -> Result<PathBuf> {
        let dir = out.join("runs");
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Content hash of files and directory trees: one `digest  name` line per
/// file, names relative to the given root, sorted, then hashed together.
pub fn hash_inputs(paths: &[&Path]) -> Result<String> {
    let mut lines = Vec::new();
    for (i, root) in paths.iter().enumerate() {
        if root.is_dir() {
            for entry in WalkDir::new(root).sort_by_file_name() {
                let entry = entry.map_err(|e| crate::CliError::User(e.to_string()))?;
                if entry.file_type().is_file() {
                    let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
                    lines.push(format!("{}  {i}/{}", file_digest(entry.path())?, rel.display()));
                }
            }
        } else {
            let name = root
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            lines.push(format!("{}  {i}/{name}", file_digest(root)?));
        }
    }
    lines.sort();
    let mut h = Sha256::new();
    for l in &lines {
        h.update(l.as_bytes());
        h.update(b"\n");
    }
    Ok(format!("{:x}", h.finalize()))
}
