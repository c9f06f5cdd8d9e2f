//! Reproducibility records written next to every fit, pretrain, train and
//! make-synthetic output: the command, its configuration and seed, and
//! content hashes of the inputs it read.
//!
//! File hashes follow git's blob scheme (`sha256("blob <len>\0" ++ bytes)`)
//! and the inputs hash is taken over the sorted `"<hash> <name>\n"` lines,
//! like a tree object.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputHash {
    pub name: String,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Record {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub inputs_hash: String,
}

/// Files under `dir`, recursively, named relative to it.
fn walk(dir: &Path, skip: &[&str]) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = std::fs::read_dir(&d).map_err(|e| CliError::input(format!("{}: {e}", d.display())))?;
        for e in entries {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            if !skip.contains(&name.as_str()) {
                out.push((name, p));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct RecordBuilder {
    inputs: Vec<InputHash>,
}

impl RecordBuilder {
    pub fn file(&mut self, name: impl Into<String>, path: &Path) -> CliResult<&mut Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        self.inputs.push(InputHash {
            name: name.into(),
            hash: blob_hash(&bytes),
        });
        Ok(self)
    }

    /// Every file of a directory as `<prefix>/<relative name>`, except
    /// earlier records.
    pub fn dir(&mut self, prefix: &str, dir: &Path) -> CliResult<&mut Self> {
        for (name, path) in walk(dir, &[RECORD_FILE])? {
            self.file(format!("{prefix}/{name}"), &path)?;
        }
        Ok(self)
    }

    pub fn finish(mut self, command: &str, seed: Option<u64>, config: serde_json::Value) -> Record {
        self.inputs.sort_by(|a, b| a.name.cmp(&b.name));
        let tree: String = self.inputs.iter().map(|i| format!("{} {}\n", i.hash, i.name)).collect();
        Record {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
            inputs_hash: blob_hash(tree.as_bytes()),
            inputs: self.inputs,
        }
    }
}

pub const RECORD_FILE: &str = "record.json";

impl Record {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self).expect("records serialize");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}

/// Record path for a file output: `<out>.record.json`.
pub fn record_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".record.json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        // sha256 of "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn inputs_hash_ignores_insertion_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a"), "1").unwrap();
        std::fs::write(dir.path().join("b"), "2").unwrap();
        let mut x = RecordBuilder::default();
        x.file("a", &dir.path().join("a")).unwrap().file("b", &dir.path().join("b")).unwrap();
        let mut y = RecordBuilder::default();
        y.file("b", &dir.path().join("b")).unwrap().file("a", &dir.path().join("a")).unwrap();
        let (x, y) = (x.finish("t", None, serde_json::json!({})), y.finish("t", None, serde_json::json!({})));
        assert_eq!(x.inputs_hash, y.inputs_hash);
        assert_eq!(x.inputs, y.inputs);
    }
}
