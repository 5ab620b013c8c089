//! Per-run output directory: every file written through [`RunDir`] is
//! tracked and hashed into `manifest.json` when the run finishes.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
}

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: usize,
    sha256: String,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        if rel == MANIFEST {
            bail!("{MANIFEST} is reserved");
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, &text)
    }

    /// Hashes every tracked file and writes the manifest. Call last.
    pub fn finish(self) -> Result<PathBuf> {
        let mut rels = self.written;
        rels.sort();
        let mut entries = Vec::with_capacity(rels.len());
        for rel in rels {
            let bytes = fs::read(self.root.join(&rel))?;
            entries.push(ManifestEntry { path: rel, bytes: bytes.len(), sha256: hex::encode(Sha256::digest(&bytes)) });
        }
        let mut text = serde_json::to_string_pretty(&serde_json::json!({ "files": entries }))?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, text)?;
        Ok(path)
    }
}

/// Mean of a slice; NaN when empty.
pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
