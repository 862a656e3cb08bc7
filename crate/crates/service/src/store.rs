//! On-disk candidate pools.
//!
//! Layout under the store directory:
//! `inputs.jsonl` + `inputs/{k}.img` for the source images,
//! `index.jsonl` + `candidates/{id}.img` for the candidates, and the
//! append-only `matchups.jsonl` / `prefs.jsonl` written by tournaments.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use bridgelab::feedback::{read_jsonl, write_jsonl, GroupKey};
use bridgelab::imageio::{load_sbim, save_sbim};
use bridgelab::sampler::{Candidate, CandidateInfo, CandidateInput};
use bridgelab::Image;
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputRecord {
    pub index: usize,
    pub subject: u32,
    pub slice: u32,
}

#[derive(Debug, Clone)]
pub struct CandidateStore {
    dir: PathBuf,
    inputs: Vec<InputRecord>,
    infos: Vec<CandidateInfo>,
    by_id: HashMap<String, usize>,
}

pub(crate) fn read_jsonl_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    read_jsonl(BufReader::new(fs::File::open(path)?))
        .map_err(|e| ServiceError::Log(format!("{}: {e}", path.display())))
}

/// Candidate ids end up in file names and URLs.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(ServiceError::BadRequest(format!("invalid candidate id {id:?}")))
    }
}

impl CandidateStore {
    /// Writes a new store; fails if `dir` already holds one.
    pub fn create(dir: &Path, inputs: &[CandidateInput], candidates: &[Candidate]) -> Result<Self> {
        if dir.join("index.jsonl").exists() {
            return Err(ServiceError::BadRequest(format!(
                "{} already contains a candidate store",
                dir.display()
            )));
        }
        fs::create_dir_all(dir.join("inputs"))?;
        fs::create_dir_all(dir.join("candidates"))?;
        let mut records = Vec::with_capacity(inputs.len());
        for (k, input) in inputs.iter().enumerate() {
            save_sbim(&input.z0, dir.join("inputs").join(format!("{k}.img")))?;
            records.push(InputRecord {
                index: k,
                subject: input.subject,
                slice: input.slice,
            });
        }
        let mut infos = Vec::with_capacity(candidates.len());
        for c in candidates {
            check_id(&c.info.id)?;
            if c.info.input >= inputs.len() {
                return Err(ServiceError::BadRequest(format!(
                    "candidate {} references missing input {}",
                    c.info.id, c.info.input
                )));
            }
            save_sbim(&c.image, dir.join("candidates").join(format!("{}.img", c.info.id)))?;
            infos.push(c.info.clone());
        }
        write_jsonl(&records, fs::File::create(dir.join("inputs.jsonl"))?)?;
        write_jsonl(&infos, fs::File::create(dir.join("index.jsonl"))?)?;
        Self::from_parts(dir, records, infos)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let index = dir.join("index.jsonl");
        if !index.is_file() {
            return Err(ServiceError::NotFound(format!("no candidate store at {}", dir.display())));
        }
        let inputs = read_jsonl_file(&dir.join("inputs.jsonl"))?;
        let infos = read_jsonl_file(&index)?;
        Self::from_parts(dir, inputs, infos)
    }

    fn from_parts(dir: &Path, inputs: Vec<InputRecord>, infos: Vec<CandidateInfo>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(infos.len());
        for (k, info) in infos.iter().enumerate() {
            check_id(&info.id)?;
            if by_id.insert(info.id.clone(), k).is_some() {
                return Err(ServiceError::Log(format!("duplicate candidate id {}", info.id)));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            inputs,
            infos,
            by_id,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn matchups_path(&self) -> PathBuf {
        self.dir.join("matchups.jsonl")
    }

    pub fn prefs_path(&self) -> PathBuf {
        self.dir.join("prefs.jsonl")
    }

    pub fn infos(&self) -> &[CandidateInfo] {
        &self.infos
    }

    pub fn info(&self, id: &str) -> Option<&CandidateInfo> {
        self.by_id.get(id).map(|&k| &self.infos[k])
    }

    pub fn len(&self) -> usize {
        self.infos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.infos.is_empty()
    }

    /// Candidate ids per group, in index order.
    pub fn groups(&self) -> BTreeMap<GroupKey, Vec<String>> {
        let mut groups: BTreeMap<GroupKey, Vec<String>> = BTreeMap::new();
        for info in &self.infos {
            groups.entry(GroupKey::of(info)).or_default().push(info.id.clone());
        }
        groups
    }

    pub fn image_path(&self, id: &str) -> Result<PathBuf> {
        check_id(id)?;
        if !self.by_id.contains_key(id) {
            return Err(ServiceError::NotFound(format!("candidate {id}")));
        }
        Ok(self.dir.join("candidates").join(format!("{id}.img")))
    }

    pub fn load_image(&self, id: &str) -> Result<Image> {
        Ok(load_sbim(self.image_path(id)?)?)
    }

    pub fn load_candidate(&self, id: &str) -> Result<Candidate> {
        let info = self
            .info(id)
            .ok_or_else(|| ServiceError::NotFound(format!("candidate {id}")))?
            .clone();
        let image = self.load_image(id)?;
        Ok(Candidate { info, image })
    }

    pub fn load_candidates(&self) -> Result<Vec<Candidate>> {
        self.infos.iter().map(|i| self.load_candidate(&i.id)).collect()
    }

    pub fn input_path(&self, k: usize) -> PathBuf {
        self.dir.join("inputs").join(format!("{k}.img"))
    }

    pub fn load_input(&self, k: usize) -> Result<CandidateInput> {
        let rec = self
            .inputs
            .get(k)
            .ok_or_else(|| ServiceError::NotFound(format!("input {k}")))?;
        Ok(CandidateInput {
            z0: load_sbim(self.input_path(rec.index))?,
            subject: rec.subject,
            slice: rec.slice,
        })
    }

    pub fn load_inputs(&self) -> Result<Vec<CandidateInput>> {
        (0..self.inputs.len()).map(|k| self.load_input(k)).collect()
    }
}
