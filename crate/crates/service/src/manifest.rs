//! Per-run reproducibility records.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use bridgelab::feedback::now_millis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ProjectConfig;
use crate::error::Result;

/// Content hash in the style of a git blob id, but with SHA-256:
/// `sha256("blob {len}\0" ++ bytes)`, lowercase hex.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    format!("{:x}", h.finalize())
}

pub fn file_hash(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(blob_hash(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: u64,
    pub config: ProjectConfig,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<PathBuf>,
    /// Network evaluations, for commands that sample.
    pub evaluations: Option<u64>,
    pub started_ms: u64,
    pub finished_ms: u64,
}

impl Manifest {
    pub fn new(command: &str, args: Vec<String>, seed: u64, config: &ProjectConfig) -> Self {
        Self {
            command: command.to_string(),
            args,
            seed,
            config: config.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            evaluations: None,
            started_ms: now_millis(),
            finished_ms: 0,
        }
    }

    /// Hashes `path`; directories contribute every regular file below them,
    /// in sorted order.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut files = Vec::new();
            collect_files(path, &mut files)?;
            files.sort();
            for f in files {
                let hash = file_hash(&f)?;
                self.inputs.push(InputHash { path: f, hash });
            }
        } else {
            let hash = file_hash(path)?;
            self.inputs.push(InputHash {
                path: path.to_path_buf(),
                hash,
            });
        }
        Ok(())
    }

    /// Writes `{runs_dir}/{command}_{started_ms}.json`, adding a suffix if
    /// that name is taken.
    pub fn write(mut self, runs_dir: &Path) -> Result<PathBuf> {
        self.finished_ms = now_millis();
        fs::create_dir_all(runs_dir)?;
        let mut path = runs_dir.join(format!("{}_{}.json", self.command, self.started_ms));
        let mut k = 1;
        while path.exists() {
            path = runs_dir.join(format!("{}_{}_{k}.json", self.command, self.started_ms));
            k += 1;
        }
        fs::write(&path, serde_json::to_vec_pretty(&self)?)?;
        Ok(path)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_known_values() {
        // sha256 of "blob 0\0" and "blob 5\0hello".
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_eq!(
            blob_hash(b"hello"),
            "8aec4e4876f854f688d0ebfc8f37598f38e5fd6903cccc850ca36591175aeb60"
        );
    }

    #[test]
    fn manifest_round_trips_and_hashes_directories() {
        let dir = tempfile::tempdir().unwrap();
        let inputs = dir.path().join("in");
        fs::create_dir_all(inputs.join("sub")).unwrap();
        fs::write(inputs.join("b.txt"), b"bb").unwrap();
        fs::write(inputs.join("sub/a.txt"), b"a").unwrap();
        let mut m = Manifest::new("sample", vec!["--nfe".into(), "10".into()], 7, &ProjectConfig::default());
        m.add_input(&inputs).unwrap();
        m.evaluations = Some(20);
        assert_eq!(m.inputs.len(), 2);
        assert_eq!(m.inputs[0].hash, blob_hash(b"bb"));
        let path = m.clone().write(&dir.path().join("runs")).unwrap();
        let back: Manifest = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(back.evaluations, Some(20));
        assert_eq!(back.inputs, m.inputs);
        let second = m.write(&dir.path().join("runs")).unwrap();
        assert_ne!(path, second);
    }
}
