//! Atomic artifact writes and the per-command run manifest.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: String,
    versions: Versions,
    inputs: &'a [ArtifactEntry],
    artifacts: &'a [ArtifactEntry],
    config: String,
}

#[derive(Debug, Serialize)]
struct Versions {
    priodiff: &'static str,
    cli: &'static str,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects artifacts for one command run inside the output directory.
pub struct Artifacts {
    dir: PathBuf,
    inputs: Vec<ArtifactEntry>,
    written: Vec<ArtifactEntry>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> anyhow::Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs: Vec::new(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Reads an input file and records its hash in the manifest.
    pub fn read_input(&mut self, path: &Path) -> anyhow::Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(ArtifactEntry {
            name: path.display().to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    /// Writes `bytes` to a temporary file in the output directory, then renames it into place.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> anyhow::Result<()> {
        let target = self.path(name);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut tmp = tempfile::NamedTempFile::new_in(target.parent().unwrap_or(&self.dir))?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(&target)
            .with_context(|| format!("writing {}", target.display()))?;
        log::info!("wrote {}", target.display());
        self.written.push(ArtifactEntry {
            name: name.to_string(),
            bytes: bytes.len(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    /// Renders through a writer callback, then writes atomically.
    pub fn write_with<F>(&mut self, name: &str, render: F) -> anyhow::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> priodiff::Result<()>,
    {
        let mut buf = Vec::new();
        render(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> anyhow::Result<()> {
        let mut buf = serde_json::to_vec_pretty(value)?;
        buf.push(b'\n');
        self.write(name, &buf)
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, records: &[T]) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        self.write(name, &buf)
    }

    /// Writes `<command>.manifest.json` describing everything this run read and wrote.
    pub fn finish(mut self, command: &str, cfg: &RunConfig) -> anyhow::Result<Vec<ArtifactEntry>> {
        let manifest = Manifest {
            command,
            seed: cfg.seed,
            config_sha256: cfg.sha256()?,
            versions: Versions {
                priodiff: priodiff::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            inputs: &self.inputs,
            artifacts: &self.written,
            config: cfg.canonical()?,
        };
        let mut buf = serde_json::to_vec_pretty(&manifest)?;
        buf.push(b'\n');
        let written = std::mem::take(&mut self.written);
        self.write(&format!("{command}.manifest.json"), &buf)?;
        Ok(written)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_are_atomic_and_hashed() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new(dir.path()).unwrap();
        a.write("x.txt", b"hello").unwrap();
        assert_eq!(std::fs::read(dir.path().join("x.txt")).unwrap(), b"hello");
        let written = a.finish("test", &RunConfig::default()).unwrap();
        assert_eq!(written[0].sha256, sha256_hex(b"hello"));
        let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(leftovers.len(), 2);
        assert!(dir.path().join("test.manifest.json").is_file());
    }
}
