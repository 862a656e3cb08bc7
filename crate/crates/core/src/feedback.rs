//! Pairwise elimination tournaments over candidate pools.
//!
//! Pairs are drawn uniformly from the live pool; both leave the pool and the
//! winner is appended back, until one candidate remains.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{Candidate, CandidateInfo, CandidateInput};
use crate::scorenet::Reward;
use crate::seeding::stream_rng;
use crate::training::LabeledPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupKey {
    pub subject: u32,
    pub slice: u32,
}

impl GroupKey {
    pub fn of(info: &CandidateInfo) -> Self {
        Self {
            subject: info.subject,
            slice: info.slice,
        }
    }
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}_z{}", self.subject, self.slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

pub trait Rater {
    fn id(&self) -> &str;
    fn compare(&mut self, left: &Candidate, right: &Candidate) -> Result<Side>;
}

/// Prefers the lower score; ties go to the smaller candidate id so the
/// induced order is total.
pub struct OracleRater<F> {
    id: String,
    score: F,
}

impl<F> OracleRater<F>
where
    F: FnMut(&Candidate) -> Result<f64>,
{
    pub fn new(id: impl Into<String>, score: F) -> Self {
        Self { id: id.into(), score }
    }
}

impl<F> Rater for OracleRater<F>
where
    F: FnMut(&Candidate) -> Result<f64>,
{
    fn id(&self) -> &str {
        &self.id
    }

    fn compare(&mut self, left: &Candidate, right: &Candidate) -> Result<Side> {
        let a = (self.score)(left)?;
        let b = (self.score)(right)?;
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Tournament(format!(
                "oracle produced non-finite scores for {} / {}",
                left.info.id, right.info.id
            )));
        }
        let left_wins = a < b || (a == b && left.info.id <= right.info.id);
        Ok(if left_wins { Side::Left } else { Side::Right })
    }
}

/// One decided comparison, as written to the matchup log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matchup {
    pub matchup_id: String,
    pub group: GroupKey,
    pub seq: usize,
    pub left: String,
    pub right: String,
    pub winner: Side,
    pub rater: String,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl Matchup {
    pub fn winner_id(&self) -> &str {
        match self.winner {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceRecord {
    pub winner: Candidate,
    pub pool_size: usize,
    pub subject: u32,
    pub slice: u32,
}

impl PreferenceRecord {
    /// Winners are always labeled good.
    pub fn label(&self) -> Reward {
        Reward::Good
    }

    pub fn entry(&self) -> PreferenceEntry {
        PreferenceEntry {
            winner: self.winner.info.clone(),
            r: 0,
            pool_size: self.pool_size,
            subject: self.subject,
            slice: self.slice,
        }
    }
}

/// Serialized form of a [`PreferenceRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceEntry {
    pub winner: CandidateInfo,
    pub r: u8,
    pub pool_size: usize,
    pub subject: u32,
    pub slice: u32,
}

pub fn matchup_id(group: GroupKey, seq: usize) -> String {
    format!("{group}_m{seq}")
}

pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A matchup waiting for a decision; `left`/`right` are already in
/// presentation order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingMatchup {
    pub matchup_id: String,
    pub group: GroupKey,
    pub seq: usize,
    pub left: String,
    pub right: String,
}

/// Resumable single-group tournament.
///
/// All randomness comes from one generator seeded at construction, so
/// replaying the same decisions in order rebuilds the same state.
#[derive(Debug, Clone)]
pub struct TournamentState {
    group: GroupKey,
    pool: Vec<String>,
    initial_size: usize,
    pending: Option<PendingMatchup>,
    decided: usize,
    rng: ChaCha8Rng,
}

impl TournamentState {
    pub fn new(group: GroupKey, candidate_ids: Vec<String>, seed: u64) -> Result<Self> {
        if candidate_ids.is_empty() {
            return Err(Error::Tournament(format!("group {group} has an empty pool")));
        }
        let mut sorted = candidate_ids.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Tournament(format!("group {group} has duplicate candidate ids")));
        }
        Ok(Self {
            group,
            initial_size: candidate_ids.len(),
            pool: candidate_ids,
            pending: None,
            decided: 0,
            rng: stream_rng(seed, ((group.subject as u64) << 32) | group.slice as u64),
        })
    }

    pub fn group(&self) -> GroupKey {
        self.group
    }

    pub fn pool(&self) -> &[String] {
        &self.pool
    }

    pub fn initial_size(&self) -> usize {
        self.initial_size
    }

    pub fn decided(&self) -> usize {
        self.decided
    }

    pub fn is_complete(&self) -> bool {
        self.pool.len() == 1 && self.pending.is_none()
    }

    pub fn pending(&self) -> Option<&PendingMatchup> {
        self.pending.as_ref()
    }

    pub fn winner(&self) -> Option<&str> {
        self.is_complete().then(|| self.pool[0].as_str())
    }

    /// The current matchup, drawing a new one if none is outstanding.
    pub fn next_matchup(&mut self) -> Option<PendingMatchup> {
        if let Some(p) = &self.pending {
            return Some(p.clone());
        }
        if self.pool.len() < 2 {
            return None;
        }
        let (a, b) = draw_pair(self.pool.len(), &mut self.rng);
        let (mut left, mut right) = (self.pool[a].clone(), self.pool[b].clone());
        if self.rng.random_bool(0.5) {
            std::mem::swap(&mut left, &mut right);
        }
        let p = PendingMatchup {
            matchup_id: matchup_id(self.group, self.decided),
            group: self.group,
            seq: self.decided,
            left,
            right,
        };
        self.pending = Some(p.clone());
        Some(p)
    }

    /// Records the outcome of the pending matchup with id `matchup_id`.
    pub fn decide(&mut self, matchup_id: &str, winner: Side, rater: &str) -> Result<Matchup> {
        let pending = match &self.pending {
            Some(p) if p.matchup_id == matchup_id => p.clone(),
            _ => {
                return Err(Error::Tournament(format!(
                    "{matchup_id} is not the pending matchup of group {}",
                    self.group
                )))
            }
        };
        let (win, lose) = match winner {
            Side::Left => (&pending.left, &pending.right),
            Side::Right => (&pending.right, &pending.left),
        };
        self.pool.retain(|id| id != win && id != lose);
        self.pool.push(win.clone());
        self.pending = None;
        self.decided += 1;
        Ok(Matchup {
            matchup_id: pending.matchup_id,
            group: self.group,
            seq: pending.seq,
            left: pending.left,
            right: pending.right,
            winner,
            rater: rater.to_string(),
            timestamp: now_millis(),
        })
    }
}

/// Two distinct uniform indices below `n`.
fn draw_pair<R: Rng + ?Sized>(n: usize, rng: &mut R) -> (usize, usize) {
    let a = rng.random_range(0..n);
    let mut b = rng.random_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn check_pool(pool: &[Candidate]) -> Result<GroupKey> {
    let first = pool
        .first()
        .ok_or_else(|| Error::Tournament("empty candidate pool".into()))?;
    let group = GroupKey::of(&first.info);
    if let Some(other) = pool.iter().find(|c| GroupKey::of(&c.info) != group) {
        return Err(Error::Tournament(format!(
            "pool mixes groups {group} and {}",
            GroupKey::of(&other.info)
        )));
    }
    Ok(group)
}

/// Runs one tournament to completion with `rater`.
pub fn run_tournament<R: Rng + ?Sized>(
    pool: &[Candidate],
    rater: &mut dyn Rater,
    rng: &mut R,
) -> Result<(PreferenceRecord, Vec<Matchup>)> {
    let group = check_pool(pool)?;
    let mut live: Vec<usize> = (0..pool.len()).collect();
    let mut log = Vec::with_capacity(pool.len() - 1);
    while live.len() > 1 {
        let (a, b) = draw_pair(live.len(), rng);
        let (mut li, mut ri) = (live[a], live[b]);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut li, &mut ri);
        }
        if pool[li].info.id == pool[ri].info.id {
            return Err(Error::Tournament(format!("duplicate candidate id {}", pool[li].info.id)));
        }
        let side = rater.compare(&pool[li], &pool[ri])?;
        let win = if side == Side::Left { li } else { ri };
        live.retain(|&k| k != li && k != ri);
        live.push(win);
        log.push(Matchup {
            matchup_id: matchup_id(group, log.len()),
            group,
            seq: log.len(),
            left: pool[li].info.id.clone(),
            right: pool[ri].info.id.clone(),
            winner: side,
            rater: rater.id().to_string(),
            timestamp: now_millis(),
        });
    }
    let record = PreferenceRecord {
        winner: pool[live[0]].clone(),
        pool_size: pool.len(),
        subject: group.subject,
        slice: group.slice,
    };
    Ok((record, log))
}

/// Groups candidates by `(subject, slice)`.
pub fn group_candidates(candidates: Vec<Candidate>) -> BTreeMap<GroupKey, Vec<Candidate>> {
    let mut groups: BTreeMap<GroupKey, Vec<Candidate>> = BTreeMap::new();
    for c in candidates {
        groups.entry(GroupKey::of(&c.info)).or_default().push(c);
    }
    groups
}

/// One tournament per group, in sorted group order.
pub fn collect_preferences<R: Rng + ?Sized>(
    grouped: &BTreeMap<GroupKey, Vec<Candidate>>,
    rater: &mut dyn Rater,
    rng: &mut R,
) -> Result<(Vec<PreferenceRecord>, Vec<Matchup>)> {
    let mut records = Vec::with_capacity(grouped.len());
    let mut log = Vec::new();
    for pool in grouped.values() {
        let (rec, mut matches) = run_tournament(pool, rater, rng)?;
        records.push(rec);
        log.append(&mut matches);
    }
    Ok((records, log))
}

/// Turns winners into good-labeled training pairs, taking `z0` from the
/// inputs the candidates were generated from.
pub fn preference_pairs(records: &[PreferenceRecord], inputs: &[CandidateInput]) -> Result<Vec<LabeledPair>> {
    records
        .iter()
        .map(|rec| {
            let input = inputs.get(rec.winner.info.input).ok_or_else(|| {
                Error::Tournament(format!("winner {} references a missing input", rec.winner.info.id))
            })?;
            Ok(LabeledPair {
                z0: input.z0.clone(),
                z1: rec.winner.image.clone(),
                r: rec.label(),
                subject: rec.subject,
                slice: rec.slice,
            })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for item in items {
        append_jsonl(item, &mut w)?;
    }
    Ok(())
}

pub fn append_jsonl<T: Serialize>(item: &T, mut w: impl Write) -> Result<()> {
    let mut line = serde_json::to_vec(item)?;
    line.push(b'\n');
    w.write_all(&line)?;
    Ok(())
}

/// Parses newline-delimited JSON, skipping blank lines; errors name the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("line {}: {e}", k + 1)))?;
        out.push(item);
    }
    Ok(out)
}
