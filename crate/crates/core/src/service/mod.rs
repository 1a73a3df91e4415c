//! Review-queue state machine persisted as an append-only event log.

mod log;
mod pipeline;
mod store;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::synthgen::DefectKind;
use crate::triage::TriageDecision;

pub use log::{read_events, replay_state, EventLog, FsyncPolicy};
pub use pipeline::{run_pipeline, soxai_from_store, PipelineOptions, RunSummary};
pub use store::{CasePage, Store, StoreConfig, StateCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Pending,
    Scored,
    AutoDefect,
    InReview,
    AutoPass,
    ReviewedDefect,
    ReviewedPass,
    Reworked,
    /// The image could not be read or scored.
    Failed,
}

impl CaseState {
    pub const ALL: [CaseState; 9] = [
        CaseState::Pending,
        CaseState::Scored,
        CaseState::AutoDefect,
        CaseState::InReview,
        CaseState::AutoPass,
        CaseState::ReviewedDefect,
        CaseState::ReviewedPass,
        CaseState::Reworked,
        CaseState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CaseState::Pending => "pending",
            CaseState::Scored => "scored",
            CaseState::AutoDefect => "auto_defect",
            CaseState::InReview => "in_review",
            CaseState::AutoPass => "auto_pass",
            CaseState::ReviewedDefect => "reviewed_defect",
            CaseState::ReviewedPass => "reviewed_pass",
            CaseState::Reworked => "reworked",
            CaseState::Failed => "failed",
        }
    }

    /// Allowed edges of the case lifecycle.
    pub fn can_transition(self, to: CaseState) -> bool {
        use CaseState::*;
        matches!(
            (self, to),
            (Pending, Scored)
                | (Pending, Failed)
                | (Scored, AutoDefect | InReview | AutoPass)
                | (InReview, ReviewedDefect | ReviewedPass)
                | (AutoDefect | ReviewedDefect, Reworked)
        )
    }

    pub fn from_triage(d: TriageDecision) -> CaseState {
        match d {
            TriageDecision::NonDefective => CaseState::AutoPass,
            TriageDecision::PossiblyDefective => CaseState::InReview,
            TriageDecision::Defective => CaseState::AutoDefect,
        }
    }
}

impl fmt::Display for CaseState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CaseState::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown case state '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: CaseState,
    pub at: DateTime<Utc>,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCase {
    pub id: String,
    pub image_path: String,
    pub confidence: Option<f64>,
    pub triage: Option<TriageDecision>,
    pub state: CaseState,
    pub verdict_by: Option<String>,
    pub verdict_note: Option<String>,
    /// Explanation JSON, relative to the service data directory.
    pub explanation_path: Option<String>,
    pub oracle_label: Option<Label>,
    pub kind: Option<DefectKind>,
    pub error: Option<String>,
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ingested,
    Scored,
    Triaged,
    Explained,
    Verdict,
    Reworked,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub timestamp: DateTime<Utc>,
    pub case_id: String,
    pub kind: EventKind,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedPayload {
    pub image_path: String,
    pub oracle_label: Option<Label>,
    pub kind: Option<DefectKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredPayload {
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriagedPayload {
    pub decision: TriageDecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedPayload {
    pub explanation_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewVerdict {
    #[serde(default)]
    pub case_id: String,
    pub decision: Label,
    pub operator: String,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedPayload {
    pub error: String,
}

fn payload<T: for<'de> Deserialize<'de>>(e: &Event) -> Result<T> {
    serde_json::from_value(e.payload.clone())
        .map_err(|err| Error::Integrity(format!("event {} has a malformed {:?} payload: {err}", e.seq, e.kind)))
}

fn transition(case: &mut JointCase, to: CaseState, e: &Event) -> Result<()> {
    if !case.state.can_transition(to) {
        return Err(Error::Integrity(format!(
            "event {}: case '{}' cannot move from {} to {}",
            e.seq, case.id, case.state, to
        )));
    }
    case.state = to;
    case.transitions.push(Transition {
        state: to,
        at: e.timestamp,
        seq: e.seq,
    });
    Ok(())
}

/// Folds one event into the case map, rejecting any illegal edge.
pub fn apply_event(cases: &mut BTreeMap<String, JointCase>, e: &Event) -> Result<()> {
    if e.kind == EventKind::Ingested {
        if cases.contains_key(&e.case_id) {
            return Err(Error::Integrity(format!("event {}: case '{}' ingested twice", e.seq, e.case_id)));
        }
        let p: IngestedPayload = payload(e)?;
        cases.insert(
            e.case_id.clone(),
            JointCase {
                id: e.case_id.clone(),
                image_path: p.image_path,
                confidence: None,
                triage: None,
                state: CaseState::Pending,
                verdict_by: None,
                verdict_note: None,
                explanation_path: None,
                oracle_label: p.oracle_label,
                kind: p.kind,
                error: None,
                transitions: vec![Transition {
                    state: CaseState::Pending,
                    at: e.timestamp,
                    seq: e.seq,
                }],
            },
        );
        return Ok(());
    }
    let case = cases
        .get_mut(&e.case_id)
        .ok_or_else(|| Error::Integrity(format!("event {} refers to unknown case '{}'", e.seq, e.case_id)))?;
    match e.kind {
        EventKind::Ingested => unreachable!(),
        EventKind::Scored => {
            let p: ScoredPayload = payload(e)?;
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::Integrity(format!("event {}: confidence {} outside [0, 1]", e.seq, p.confidence)));
            }
            transition(case, CaseState::Scored, e)?;
            case.confidence = Some(p.confidence);
        }
        EventKind::Triaged => {
            let p: TriagedPayload = payload(e)?;
            transition(case, CaseState::from_triage(p.decision), e)?;
            case.triage = Some(p.decision);
        }
        EventKind::Explained => {
            let p: ExplainedPayload = payload(e)?;
            if case.state != CaseState::InReview || case.explanation_path.is_some() {
                return Err(Error::Integrity(format!(
                    "event {}: explanation for case '{}' in state {}",
                    e.seq, case.id, case.state
                )));
            }
            case.explanation_path = Some(p.explanation_path);
        }
        EventKind::Verdict => {
            let p: ReviewVerdict = payload(e)?;
            let to = if p.decision.is_defective() {
                CaseState::ReviewedDefect
            } else {
                CaseState::ReviewedPass
            };
            transition(case, to, e)?;
            case.verdict_by = Some(p.operator);
            case.verdict_note = p.note;
        }
        EventKind::Reworked => transition(case, CaseState::Reworked, e)?,
        EventKind::Failed => {
            let p: FailedPayload = payload(e)?;
            transition(case, CaseState::Failed, e)?;
            case.error = Some(p.error);
        }
    }
    Ok(())
}

/// Folds a whole event sequence; sequence numbers must strictly increase.
pub fn fold_events<'a>(events: impl IntoIterator<Item = &'a Event>) -> Result<BTreeMap<String, JointCase>> {
    let mut cases = BTreeMap::new();
    let mut last = 0;
    for e in events {
        if e.seq <= last {
            return Err(Error::Integrity(format!("event seq {} follows {last}", e.seq)));
        }
        last = e.seq;
        apply_event(&mut cases, e)?;
    }
    Ok(cases)
}
