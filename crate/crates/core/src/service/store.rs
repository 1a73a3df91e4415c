use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::log::{EventLog, FsyncPolicy};
use super::{apply_event, CaseState, Event, EventKind, JointCase, ReviewVerdict};
use crate::classifier::ScoreRecord;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub fsync: FsyncPolicy,
    /// Events between snapshot files; 0 disables automatic snapshots.
    pub snapshot_every: u64,
    pub page_size: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            fsync: FsyncPolicy::Always,
            snapshot_every: 500,
            page_size: 50,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    last_seq: u64,
    cases: BTreeMap<String, JointCase>,
}

struct Inner {
    log: EventLog,
    cases: BTreeMap<String, JointCase>,
    since_snapshot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePage {
    pub cases: Vec<JointCase>,
    pub page: usize,
    pub per_page: usize,
    pub total: usize,
}

pub type StateCounts = BTreeMap<CaseState, usize>;

/// Materialized case state over the event log. Every mutation holds the
/// write lock for its whole check-append-apply step, so there is exactly one
/// writer at a time; readers share the lock.
pub struct Store {
    data_dir: PathBuf,
    config: StoreConfig,
    inner: RwLock<Inner>,
}

const LOG_FILE: &str = "events.jsonl";
const SNAPSHOT_FILE: &str = "snapshot.json";
pub(crate) const EXPLANATIONS_DIR: &str = "explanations";
pub(crate) const SOXAI_DIR: &str = "soxai";

impl Store {
    /// Opens the store in `data_dir`, starting from the snapshot when it is
    /// consistent with the log and replaying the remaining events.
    pub fn open(data_dir: impl AsRef<Path>, config: StoreConfig) -> Result<Store> {
        let data_dir = data_dir.as_ref().to_path_buf();
        fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
        let (log, events) = EventLog::open(data_dir.join(LOG_FILE), config.fsync)?;

        let snap_path = data_dir.join(SNAPSHOT_FILE);
        let snapshot = match fs::read(&snap_path) {
            Ok(bytes) => match serde_json::from_slice::<Snapshot>(&bytes) {
                Ok(s) if s.last_seq <= log.last_seq() => Some(s),
                Ok(_) => {
                    tracing::warn!("snapshot is ahead of the event log; replaying from scratch");
                    None
                }
                Err(e) => {
                    tracing::warn!(error = %e, "unreadable snapshot; replaying from scratch");
                    None
                }
            },
            Err(_) => None,
        };
        let (mut cases, from) = snapshot.map_or((BTreeMap::new(), 0), |s| (s.cases, s.last_seq));
        for e in events.iter().filter(|e| e.seq > from) {
            apply_event(&mut cases, e)?;
        }
        Ok(Store {
            data_dir,
            config,
            inner: RwLock::new(Inner {
                log,
                cases,
                since_snapshot: 0,
            }),
        })
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn log_path(&self) -> PathBuf {
        self.data_dir.join(LOG_FILE)
    }

    pub fn last_seq(&self) -> u64 {
        self.inner.read().log.last_seq()
    }

    /// Copy of the full case map.
    pub fn cases(&self) -> BTreeMap<String, JointCase> {
        self.inner.read().cases.clone()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.inner.read().cases.contains_key(id)
    }

    pub fn get(&self, id: &str) -> Result<JointCase> {
        self.inner
            .read()
            .cases
            .get(id)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("'{id}'")))
    }

    /// One-based pages of cases in id order, optionally filtered by state.
    pub fn list(&self, state: Option<CaseState>, page: usize, per_page: usize) -> CasePage {
        let per_page = per_page.max(1);
        let page = page.max(1);
        let inner = self.inner.read();
        let matching: Vec<&JointCase> = inner
            .cases
            .values()
            .filter(|c| state.is_none_or(|s| c.state == s))
            .collect();
        CasePage {
            total: matching.len(),
            cases: matching
                .into_iter()
                .skip((page - 1) * per_page)
                .take(per_page)
                .cloned()
                .collect(),
            page,
            per_page,
        }
    }

    /// Number of cases in every state, including empty ones.
    pub fn counts(&self) -> StateCounts {
        let mut counts: StateCounts = CaseState::ALL.iter().map(|&s| (s, 0)).collect();
        for c in self.inner.read().cases.values() {
            *counts.entry(c.state).or_default() += 1;
        }
        counts
    }

    /// Score records for every scored case. Fails if any lacks an oracle label.
    pub fn score_records(&self) -> Result<Vec<ScoreRecord>> {
        let inner = self.inner.read();
        let mut out = Vec::new();
        for c in inner.cases.values() {
            if let Some(conf) = c.confidence {
                let label = c
                    .oracle_label
                    .ok_or_else(|| Error::invalid(format!("case '{}' has no oracle label", c.id)))?;
                out.push(ScoreRecord::new(c.id.clone(), conf, Some(label))?);
            }
        }
        Ok(out)
    }

    /// Validates and appends a batch of events under one hold of the writer lock.
    pub(crate) fn commit(&self, batch: Vec<(String, EventKind, Value)>) -> Result<Vec<Event>> {
        let mut inner = self.inner.write();
        let mut written = Vec::with_capacity(batch.len());
        for (case_id, kind, payload) in batch {
            written.push(Self::commit_one(&mut inner, &case_id, kind, payload)?);
        }
        self.maybe_snapshot(&mut inner, written.len() as u64)?;
        Ok(written)
    }

    fn commit_one(inner: &mut Inner, case_id: &str, kind: EventKind, payload: Value) -> Result<Event> {
        let event = inner.log.next_event(case_id, kind, payload);
        // dry-run on a copy of the single case so a rejected event never reaches the log
        let mut scratch: BTreeMap<String, JointCase> = inner
            .cases
            .get(case_id)
            .map(|c| (c.id.clone(), c.clone()))
            .into_iter()
            .collect();
        apply_event(&mut scratch, &event).map_err(|e| match e {
            Error::Integrity(m) => Error::Conflict(m),
            other => other,
        })?;
        inner.log.write(&event)?;
        let updated = scratch.remove(case_id).expect("case applied");
        inner.cases.insert(case_id.to_string(), updated);
        Ok(event)
    }

    fn maybe_snapshot(&self, inner: &mut Inner, added: u64) -> Result<()> {
        inner.since_snapshot += added;
        if self.config.snapshot_every > 0 && inner.since_snapshot >= self.config.snapshot_every {
            self.write_snapshot(inner)?;
        }
        Ok(())
    }

    fn write_snapshot(&self, inner: &mut Inner) -> Result<()> {
        let snap = json!({"last_seq": inner.log.last_seq(), "cases": &inner.cases});
        let tmp = self.data_dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let path = self.data_dir.join(SNAPSHOT_FILE);
        fs::write(&tmp, serde_json::to_vec(&snap)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        inner.since_snapshot = 0;
        Ok(())
    }

    /// Writes a snapshot of the current state now.
    pub fn snapshot(&self) -> Result<()> {
        let mut inner = self.inner.write();
        self.write_snapshot(&mut inner)
    }

    /// Records an operator verdict on an `in_review` case. Repeating the
    /// verdict that already decided the case returns it unchanged.
    pub fn submit_verdict(&self, verdict: &ReviewVerdict) -> Result<JointCase> {
        let mut inner = self.inner.write();
        let case = inner
            .cases
            .get(&verdict.case_id)
            .ok_or_else(|| Error::NotFound(format!("'{}'", verdict.case_id)))?;
        match case.state {
            CaseState::InReview => {}
            CaseState::ReviewedDefect | CaseState::ReviewedPass
                if case.state == verdict_state(verdict)
                    && case.verdict_by.as_deref() == Some(verdict.operator.as_str())
                    && case.verdict_note == verdict.note =>
            {
                return Ok(case.clone());
            }
            s => {
                return Err(Error::Conflict(format!(
                    "case '{}' is {s}, verdicts are only accepted in in_review",
                    verdict.case_id
                )))
            }
        }
        if verdict.operator.trim().is_empty() {
            return Err(Error::invalid("verdict needs an operator"));
        }
        let payload = serde_json::to_value(verdict)?;
        Self::commit_one(&mut inner, &verdict.case_id, EventKind::Verdict, payload)?;
        self.maybe_snapshot(&mut inner, 1)?;
        Ok(inner.cases[&verdict.case_id].clone())
    }

    /// Marks a defective case as reworked.
    pub fn rework(&self, id: &str) -> Result<JointCase> {
        let mut inner = self.inner.write();
        let state = inner
            .cases
            .get(id)
            .map(|c| c.state)
            .ok_or_else(|| Error::NotFound(format!("'{id}'")))?;
        if !state.can_transition(CaseState::Reworked) {
            return Err(Error::Conflict(format!("case '{id}' is {state} and cannot be reworked")));
        }
        Self::commit_one(&mut inner, id, EventKind::Reworked, json!({}))?;
        self.maybe_snapshot(&mut inner, 1)?;
        Ok(inner.cases[id].clone())
    }

    /// Path of a case's explanation artifact.
    pub fn explanation_file(&self, case: &JointCase) -> Option<PathBuf> {
        case.explanation_path.as_ref().map(|p| self.data_dir.join(p))
    }
}

fn verdict_state(v: &ReviewVerdict) -> CaseState {
    if v.decision.is_defective() {
        CaseState::ReviewedDefect
    } else {
        CaseState::ReviewedPass
    }
}
