//! Output manifest with content hashes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub library_version: String,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub files: Vec<FileEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Collects the files written by a command.
pub struct OutputDir {
    pub root: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<OutputDir> {
        std::fs::create_dir_all(root)?;
        Ok(OutputDir { root: root.to_path_buf(), files: Vec::new() })
    }

    /// Path for `name`, recorded for the manifest.
    pub fn file(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if !self.files.contains(&p) {
            self.files.push(p.clone());
        }
        p
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> std::io::Result<()> {
        let p = self.file(name);
        std::fs::write(p, contents)
    }

    pub fn finish(self, command: &str, config_text: &str, seeds: Vec<u64>, jobs: usize) -> std::io::Result<Manifest> {
        let mut files = Vec::new();
        for p in &self.files {
            let data = std::fs::read(p)?;
            let rel = p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned();
            files.push(FileEntry { path: rel, sha256: sha256_hex(&data), bytes: data.len() as u64 });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            library_version: filtertube::VERSION.to_string(),
            config_sha256: sha256_hex(config_text.as_bytes()),
            seeds,
            jobs,
            files,
        };
        let text = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)?;
        std::fs::write(self.root.join("manifest.json"), text)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_value() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
