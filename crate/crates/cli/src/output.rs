//! Output directories, run manifests and content hashes.

use std::fs;
use std::path::{Path, PathBuf};

use iterseg_core::config::RunConfig;
use iterseg_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Creates `dir`, refusing to reuse a non-empty directory unless `force` is set.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Writes through a byte buffer so I/O errors carry the path.
pub fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(|e| Error::io(path, e))?;
    write_bytes(path, &buf)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Git-style object hash: SHA-256 over `"blob <len>\0"` followed by the content.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

#[derive(Serialize)]
pub struct InputHash {
    pub path: String,
    pub blob_sha256: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    /// The effective configuration, exactly as rendered.
    pub config: String,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<InputHash>,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        let rendered = config.render();
        RunManifest {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_hex(rendered.as_bytes()),
            config: rendered,
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    fn hash_of(path: &Path) -> Result<InputHash> {
        Ok(InputHash {
            path: path.display().to_string(),
            blob_sha256: blob_hash(&read_bytes(path)?),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Self::hash_of(path)?);
        Ok(())
    }

    /// Records a dataset by its index and manifest, which determine every other file.
    pub fn dataset_input(&mut self, dir: &Path) -> Result<()> {
        self.input(&dir.join("index.json"))?;
        self.input(&dir.join("manifest.json"))
    }

    /// Records an output by its path relative to `root`.
    pub fn output(&mut self, root: &Path, rel: &str) -> Result<()> {
        let mut h = Self::hash_of(&root.join(rel))?;
        h.path = rel.to_string();
        self.outputs.push(h);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("run_manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_uses_the_git_header() {
        let expected = sha256_hex(b"blob 5\0hello");
        assert_eq!(blob_hash(b"hello"), expected);
        // Known SHA-256 of the empty string.
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn non_empty_dir_needs_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), b"1").unwrap();
        assert!(matches!(prepare_out_dir(dir.path(), false), Err(Error::Usage(_))));
        assert!(prepare_out_dir(dir.path(), true).is_ok());
        assert!(prepare_out_dir(&dir.path().join("fresh"), false).is_ok());
    }
}
