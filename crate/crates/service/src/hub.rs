//! Live tournaments over a candidate store.
//!
//! Every decision is appended to `matchups.jsonl` before it is applied, and
//! each finished group appends its winner to `prefs.jsonl`. On open the
//! matchup log is replayed through fresh [`TournamentState`]s, so the log is
//! the only state that survives a restart.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use bridgelab::feedback::{append_jsonl, GroupKey, Matchup, PendingMatchup, PreferenceEntry, Side, TournamentState};
use bridgelab::{LabeledPair, Reward};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};
use crate::store::{read_jsonl_file, CandidateStore};

/// How long a dispatched matchup stays reserved for its rater.
pub const DEFAULT_LEASE: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchupView {
    pub matchup_id: String,
    pub left_png_url: String,
    pub right_png_url: String,
    pub group: String,
    /// Fraction of the group's matchups already decided.
    pub progress: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStatus {
    pub group: String,
    pub subject: u32,
    pub slice: u32,
    pub pool_size: usize,
    pub initial_size: usize,
    pub decided: usize,
    pub complete: bool,
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub groups: Vec<GroupStatus>,
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceOutcome {
    pub matchup_id: String,
    pub group: String,
    pub complete: bool,
    pub winner: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct HubMeta {
    seed: u64,
}

struct Lease {
    rater: String,
    since: Instant,
}

pub struct Hub {
    store: Arc<CandidateStore>,
    seed: u64,
    states: BTreeMap<GroupKey, TournamentState>,
    order: Vec<GroupKey>,
    cursor: usize,
    leases: HashMap<GroupKey, Lease>,
    lease: Duration,
    decided_ids: HashSet<String>,
    prefs: Vec<PreferenceEntry>,
    matchup_log: File,
    prefs_log: File,
}

fn open_append(path: &Path) -> Result<File> {
    Ok(OpenOptions::new().create(true).append(true).open(path)?)
}

fn append_durable<T: Serialize>(file: &mut File, item: &T) -> Result<()> {
    let mut line = Vec::new();
    append_jsonl(item, &mut line)?;
    file.write_all(&line)?;
    file.sync_data()?;
    Ok(())
}

fn pending_view(p: &PendingMatchup, state: &TournamentState) -> MatchupView {
    let total = state.initial_size().saturating_sub(1).max(1);
    MatchupView {
        matchup_id: p.matchup_id.clone(),
        left_png_url: format!("/img/{}.png", p.left),
        right_png_url: format!("/img/{}.png", p.right),
        group: p.group.to_string(),
        progress: state.decided() as f64 / total as f64,
    }
}

impl Hub {
    /// Opens the store's tournaments. The seed is fixed by the first open and
    /// kept in `hub.json`; later opens ignore `seed`.
    pub fn open(store: Arc<CandidateStore>, seed: u64) -> Result<Self> {
        let meta_path = store.dir().join("hub.json");
        let seed = if meta_path.exists() {
            let meta: HubMeta = serde_json::from_slice(&fs::read(&meta_path)?)
                .map_err(|e| ServiceError::Log(format!("{}: {e}", meta_path.display())))?;
            meta.seed
        } else {
            fs::write(&meta_path, serde_json::to_vec(&HubMeta { seed })?)?;
            seed
        };
        let mut states = BTreeMap::new();
        for (group, ids) in store.groups() {
            states.insert(group, TournamentState::new(group, ids, seed)?);
        }
        let order: Vec<GroupKey> = states.keys().copied().collect();
        let mut hub = Self {
            matchup_log: open_append(&store.matchups_path())?,
            prefs_log: open_append(&store.prefs_path())?,
            store,
            seed,
            states,
            order,
            cursor: 0,
            leases: HashMap::new(),
            lease: DEFAULT_LEASE,
            decided_ids: HashSet::new(),
            prefs: Vec::new(),
        };
        hub.replay()?;
        Ok(hub)
    }

    pub fn with_lease(mut self, lease: Duration) -> Self {
        self.lease = lease;
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &Arc<CandidateStore> {
        &self.store
    }

    fn replay(&mut self) -> Result<()> {
        let log: Vec<Matchup> = read_jsonl_file(&self.store.matchups_path())?;
        for (k, m) in log.iter().enumerate() {
            let line = k + 1;
            let state = self.states.get_mut(&m.group).ok_or_else(|| {
                ServiceError::Log(format!("matchup log line {line}: unknown group {}", m.group))
            })?;
            let p = state.next_matchup().ok_or_else(|| {
                ServiceError::Log(format!("matchup log line {line}: group {} is already complete", m.group))
            })?;
            if p.matchup_id != m.matchup_id || p.left != m.left || p.right != m.right {
                return Err(ServiceError::Log(format!(
                    "matchup log line {line}: {} ({} vs {}) does not match the replayed draw {} ({} vs {})",
                    m.matchup_id, m.left, m.right, p.matchup_id, p.left, p.right
                )));
            }
            state.decide(&m.matchup_id, m.winner, &m.rater)?;
            self.decided_ids.insert(m.matchup_id.clone());
        }
        let logged: Vec<PreferenceEntry> = read_jsonl_file(&self.store.prefs_path())?;
        let mut seen: HashSet<GroupKey> = HashSet::new();
        for e in logged {
            let g = GroupKey {
                subject: e.subject,
                slice: e.slice,
            };
            let winner = self.states.get(&g).and_then(|s| s.winner());
            if winner != Some(e.winner.id.as_str()) {
                return Err(ServiceError::Log(format!(
                    "preference log names {} as winner of {g}, which the matchup log does not support",
                    e.winner.id
                )));
            }
            if seen.insert(g) {
                self.prefs.push(e);
            }
        }
        // A crash between the final matchup append and the preference append
        // leaves a finished group without its winner.
        let missing: Vec<GroupKey> = self
            .order
            .iter()
            .copied()
            .filter(|g| self.states[g].is_complete() && !seen.contains(g))
            .collect();
        for g in missing {
            self.record_winner(g)?;
        }
        Ok(())
    }

    fn record_winner(&mut self, group: GroupKey) -> Result<()> {
        let state = &self.states[&group];
        let id = state
            .winner()
            .ok_or_else(|| ServiceError::Log(format!("group {group} has no winner yet")))?;
        let info = self
            .store
            .info(id)
            .ok_or_else(|| ServiceError::NotFound(format!("candidate {id}")))?
            .clone();
        let entry = PreferenceEntry {
            winner: info,
            r: 0,
            pool_size: state.initial_size(),
            subject: group.subject,
            slice: group.slice,
        };
        append_durable(&mut self.prefs_log, &entry)?;
        self.prefs.push(entry);
        Ok(())
    }

    /// The matchup currently reserved for `rater`, or the next one in
    /// round-robin group order. `None` when nothing is available.
    pub fn next(&mut self, rater: &str) -> Option<MatchupView> {
        let now = Instant::now();
        let lease = self.lease;
        self.leases.retain(|_, l| now.duration_since(l.since) < lease);
        if let Some((g, _)) = self.leases.iter().find(|(_, l)| l.rater == rater) {
            let state = &self.states[g];
            if let Some(p) = state.pending() {
                return Some(pending_view(p, state));
            }
        }
        let n = self.order.len();
        for step in 0..n {
            let g = self.order[(self.cursor + step) % n];
            if self.leases.contains_key(&g) {
                continue;
            }
            let state = self.states.get_mut(&g).expect("group in order");
            if let Some(p) = state.next_matchup() {
                let view = pending_view(&p, state);
                self.leases.insert(
                    g,
                    Lease {
                        rater: rater.to_string(),
                        since: now,
                    },
                );
                self.cursor = (self.cursor + step + 1) % n;
                return Some(view);
            }
        }
        None
    }

    /// Applies a decision. Decided ids give `Conflict`, ids that were never
    /// dispatched give `NotFound`.
    pub fn choose(&mut self, matchup_id: &str, winner: Side, rater: &str) -> Result<ChoiceOutcome> {
        if self.decided_ids.contains(matchup_id) {
            return Err(ServiceError::Conflict(matchup_id.to_string()));
        }
        let group = self
            .states
            .iter()
            .find(|(_, s)| s.pending().is_some_and(|p| p.matchup_id == matchup_id))
            .map(|(g, _)| *g)
            .ok_or_else(|| ServiceError::NotFound(format!("matchup {matchup_id}")))?;
        let mut state = self.states[&group].clone();
        let record = state.decide(matchup_id, winner, rater)?;
        append_durable(&mut self.matchup_log, &record)?;
        self.states.insert(group, state);
        self.leases.remove(&group);
        self.decided_ids.insert(matchup_id.to_string());
        let complete = self.states[&group].is_complete();
        if complete {
            self.record_winner(group)?;
        }
        Ok(ChoiceOutcome {
            matchup_id: matchup_id.to_string(),
            group: group.to_string(),
            complete,
            winner: self.states[&group].winner().map(str::to_string),
        })
    }

    pub fn status(&self) -> StatusView {
        let groups: Vec<GroupStatus> = self
            .states
            .iter()
            .map(|(g, s)| GroupStatus {
                group: g.to_string(),
                subject: g.subject,
                slice: g.slice,
                pool_size: s.pool().len(),
                initial_size: s.initial_size(),
                decided: s.decided(),
                complete: s.is_complete(),
                winner: s.winner().map(str::to_string),
            })
            .collect();
        StatusView {
            completed: groups.iter().filter(|g| g.complete).count(),
            total: groups.len(),
            groups,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.states.values().all(|s| s.is_complete())
    }

    pub fn preferences(&self) -> &[PreferenceEntry] {
        &self.prefs
    }

    /// Ids of the two candidates in a dispatched, undecided matchup.
    pub fn pending_pair(&self, matchup_id: &str) -> Option<(String, String)> {
        self.states.values().find_map(|s| {
            s.pending()
                .filter(|p| p.matchup_id == matchup_id)
                .map(|p| (p.left.clone(), p.right.clone()))
        })
    }
}

/// Turns a preference log into good-labeled training pairs, taking `z0` from
/// the store's inputs and `z1` from the winning candidate.
pub fn export_prefs(log: &Path, store: &CandidateStore) -> Result<Vec<LabeledPair>> {
    let entries: Vec<PreferenceEntry> = read_jsonl_file(log)?;
    entries
        .iter()
        .map(|e| {
            let input = store.load_input(e.winner.input)?;
            Ok(LabeledPair {
                z0: input.z0,
                z1: store.load_image(&e.winner.id)?,
                r: Reward::from_label(e.r)?,
                subject: e.subject,
                slice: e.slice,
            })
        })
        .collect()
}
