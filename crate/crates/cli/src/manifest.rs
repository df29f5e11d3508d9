//! Run manifests: hashes of every input and output file of a stage.

use std::path::{Path, PathBuf};

use neuroforge::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "run_manifest.json";
pub const CONFIG_FILE: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Every regular file under `root` (or `root` itself), sorted, with paths
/// reported relative to `base` when possible.
pub fn hash_tree(root: &Path, base: &Path) -> Result<Vec<FileHash>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let p = entry.path();
        let shown: PathBuf = p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf());
        out.push(FileHash {
            path: shown.to_string_lossy().replace('\\', "/"),
            sha256: hash_file(p)?,
        });
    }
    Ok(out)
}

impl RunManifest {
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        let p = out_dir.join(MANIFEST_FILE);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tree_is_sorted_and_relative() {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(d.path().join("b")).unwrap();
        std::fs::write(d.path().join("b/x"), b"1").unwrap();
        std::fs::write(d.path().join("a"), b"2").unwrap();
        let h = hash_tree(d.path(), d.path()).unwrap();
        let names: Vec<_> = h.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(names, ["a", "b/x"]);
        assert_eq!(h[1].sha256, sha256_hex(b"1"));
    }
}
