//! Per-command output directories and the manifest that lists them.
//!
//! Each command owns one directory under the run root. The directory is
//! cleared when the command starts, every file goes through [`Stage`], and
//! `manifest.json` is written last, so the listing matches the directory
//! exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, PipelineConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "evidistill-manifest/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the stage directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub created_unix_secs: u64,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub struct Stage {
    command: String,
    dir: PathBuf,
    files: Vec<FileEntry>,
}

impl Stage {
    /// Start writing `out/<name>`, removing anything a previous run left there.
    pub fn begin(out: &Path, name: &str, command: &str) -> Result<Self> {
        let dir = out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Stage { command: command.to_string(), dir, files: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.files.push(FileEntry {
            path: name.to_string(),
            bytes: bytes.len() as u64,
            sha256: hex(&Sha256::digest(bytes)),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write_bytes(name, &bytes)
    }

    pub fn write_jsonl<'a, T: Serialize + 'a>(&mut self, name: &str, rows: impl IntoIterator<Item = &'a T>) -> Result<PathBuf> {
        let mut bytes = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut bytes, row)?;
            bytes.push(b'\n');
        }
        self.write_bytes(name, &bytes)
    }

    pub fn write_csv(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv buffer: {e}"))?;
        self.write_bytes(name, &bytes)
    }

    /// Write the resolved config and the manifest; the manifest does not list
    /// itself.
    pub fn finish(mut self, config: &PipelineConfig) -> Result<RunManifest> {
        self.write_bytes("config.toml", config.to_toml()?.as_bytes())?;
        let mut versions = BTreeMap::new();
        versions.insert("evidistill-cli".to_string(), env!("CARGO_PKG_VERSION").to_string());
        versions.insert("evidistill-core".to_string(), evidistill::VERSION.to_string());
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            command: self.command.clone(),
            config_hash: config.hash()?,
            seed: config.seed,
            versions,
            created_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            files: self.files,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(self.dir.join(MANIFEST_FILE), bytes)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_exactly_the_written_files() {
        let out = tempfile::tempdir().unwrap();
        fs::create_dir_all(out.path().join("s")).unwrap();
        fs::write(out.path().join("s/stale.txt"), "old").unwrap();
        let mut st = Stage::begin(out.path(), "s", "test").unwrap();
        st.write_json("a.json", &[1, 2]).unwrap();
        st.write_csv("b.csv", &["x"], &[vec!["1".into()]]).unwrap();
        let m = st.finish(&PipelineConfig::default()).unwrap();
        let mut listed: Vec<String> = m.files.iter().map(|f| f.path.clone()).collect();
        listed.push(MANIFEST_FILE.into());
        listed.sort();
        let mut on_disk: Vec<String> = fs::read_dir(out.path().join("s"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        on_disk.sort();
        assert_eq!(listed, on_disk);
        let bytes = fs::read(out.path().join("s/a.json")).unwrap();
        assert_eq!(m.files[0].sha256, hex(&Sha256::digest(&bytes)));
    }
}
