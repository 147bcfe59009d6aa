//! Report envelopes and content hashes of inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use incseg::data::DatasetManifest;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 over a git blob header (`blob <len>\0`) and the content.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(blob_hash(&bytes))
}

/// Hash of the manifest file and every file it references, in entry order.
pub fn manifest_hash(path: &Path, manifest: &DatasetManifest) -> Result<String> {
    let mut h = Sha256::new();
    h.update(file_hash(path)?.as_bytes());
    for e in &manifest.entries {
        h.update(file_hash(&manifest.resolve(&e.image))?.as_bytes());
        h.update(file_hash(&manifest.resolve(&e.mask))?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Serialize)]
pub struct Report<C: Serialize, R: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub config: C,
    /// Input name → content hash.
    pub inputs: BTreeMap<String, String>,
    pub result: R,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(
        command: &'static str,
        config: C,
        inputs: BTreeMap<String, String>,
        result: R,
    ) -> Self {
        Self {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            config,
            inputs,
            result,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_depends_on_length_and_content() {
        assert_eq!(blob_hash(b"abc"), blob_hash(b"abc"));
        assert_ne!(blob_hash(b"abc"), blob_hash(b"abd"));
        assert_ne!(blob_hash(b""), blob_hash(b"\0"));
        assert_eq!(blob_hash(b"").len(), 64);
    }
}
