//! Run manifest: what was produced, with content hashes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub version: String,
    /// Sorted by path.
    pub artifacts: Vec<Artifact>,
    /// Parameter-group hashes of the model this command produced or read.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub group_hashes: BTreeMap<String, String>,
    /// Parameter-group hashes of the stage-1 model a fine-tune started from.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub base_group_hashes: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Manifest {
            command: command.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            artifacts: Vec::new(),
            group_hashes: BTreeMap::new(),
            base_group_hashes: BTreeMap::new(),
        }
    }

    /// Hashes every file under `root` except the manifest itself.
    pub fn collect(&mut self, root: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(root, root, &mut files)?;
        files.retain(|p| p != MANIFEST_FILE);
        files.sort();
        self.artifacts = files
            .into_iter()
            .map(|rel| {
                let content = artifact_content(&root.join(&rel))?;
                Ok(Artifact {
                    sha256: hex::encode(Sha256::digest(&content)),
                    bytes: content.len() as u64,
                    path: rel,
                })
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root)?;
            let parts: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
            out.push(parts.join("/"));
        }
    }
    Ok(())
}

/// Bytes an artifact's hash and size describe. Training logs are taken with
/// `wall_time_s` zeroed so that both depend only on the seed and
/// configuration.
fn artifact_content(path: &Path) -> Result<Vec<u8>> {
    let is_log = path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("train_log.jsonl"));
    if !is_log {
        return Ok(fs::read(path)?);
    }
    let mut canonical = String::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let mut v: serde_json::Value = serde_json::from_str(line)?;
        if let Some(t) = v.get_mut("wall_time_s") {
            *t = serde_json::json!(0.0);
        }
        canonical += &v.to_string();
        canonical.push('\n');
    }
    Ok(canonical.into_bytes())
}
