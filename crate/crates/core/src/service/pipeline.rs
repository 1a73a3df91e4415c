use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::store::{EXPLANATIONS_DIR, SOXAI_DIR};
use super::{CaseState, EventKind, Store};
use crate::classifier::{Confidence, ScorerBackend};
use crate::error::{Error, Result};
use crate::imaging::preprocess;
use crate::soxai::{export_soxai_scatter, SoxaiExport, TsneParams};
use crate::synthgen::{DatasetManifest, DefectKind, ManifestEntry};
use crate::triage::{triage, TriageDecision, TriageThresholds};
use crate::xai::{explain, export_explanation, load_explanation, XaiParams};

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub thresholds: TriageThresholds,
    pub xai: XaiParams,
    /// Confidences supplied from outside, keyed by entry id. Entries without
    /// one are scored by the backend; explanations always use the backend.
    pub score_overrides: Option<BTreeMap<String, f64>>,
    /// Entries scored in parallel before their events are committed.
    pub batch_size: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            thresholds: TriageThresholds::default(),
            xai: XaiParams::default(),
            score_overrides: None,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub auto_defect: usize,
    pub in_review: usize,
    pub auto_pass: usize,
    pub failed: usize,
    pub explained: usize,
}

impl RunSummary {
    pub fn scored(&self) -> usize {
        self.auto_defect + self.in_review + self.auto_pass
    }
}

enum Outcome {
    Scored {
        confidence: f64,
        decision: TriageDecision,
        explanation: Option<String>,
    },
    Failed(String),
}

fn process(
    store: &Store,
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    backend: &dyn ScorerBackend,
    opts: &PipelineOptions,
) -> Outcome {
    let run = || -> Result<Outcome> {
        let path = manifest.resolve(&entry.image_path);
        let raw = image::open(&path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let img = preprocess(&raw.to_rgb8())?;
        let confidence = match opts.score_overrides.as_ref().and_then(|m| m.get(&entry.id)) {
            Some(&c) => Confidence::new(c)?,
            None => backend.score(&img).map_err(|e| Error::Scorer {
                at: format!("case '{}'", entry.id),
                message: e.0,
            })?,
        };
        let decision = triage(confidence, &opts.thresholds);
        let explanation = if decision == TriageDecision::PossiblyDefective {
            let e = explain(&img, backend, &opts.xai)?;
            export_explanation(&e, store.data_dir().join(EXPLANATIONS_DIR), &entry.id)?;
            Some(format!("{EXPLANATIONS_DIR}/{}.json", entry.id))
        } else {
            None
        };
        Ok(Outcome::Scored {
            confidence: confidence.value(),
            decision,
            explanation,
        })
    };
    run().unwrap_or_else(|e| Outcome::Failed(e.to_string()))
}

/// Preprocesses, scores and triages every manifest entry, explaining the
/// ones that need review. Per-entry failures mark the case `failed` and the
/// run continues. Ids already known to the store are rejected up front.
pub fn run_pipeline(
    store: &Store,
    manifest: &DatasetManifest,
    backend: &dyn ScorerBackend,
    opts: &PipelineOptions,
) -> Result<RunSummary> {
    let known: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| store.contains(id))
        .collect();
    if !known.is_empty() {
        let shown = known.iter().take(5).copied().collect::<Vec<_>>().join(", ");
        return Err(Error::Conflict(format!("{} case(s) already exist: {shown}", known.len())));
    }

    let mut summary = RunSummary::default();
    for chunk in manifest.entries.chunks(opts.batch_size.max(1)) {
        let outcomes: Vec<Outcome> = chunk
            .par_iter()
            .map(|entry| process(store, manifest, entry, backend, opts))
            .collect();
        let mut batch: Vec<(String, EventKind, Value)> = Vec::new();
        for (entry, outcome) in chunk.iter().zip(outcomes) {
            let id = entry.id.clone();
            let image_path = manifest.resolve(&entry.image_path).to_string_lossy().into_owned();
            batch.push((
                id.clone(),
                EventKind::Ingested,
                json!({"image_path": image_path, "oracle_label": entry.label, "kind": entry.kind}),
            ));
            summary.total += 1;
            match outcome {
                Outcome::Scored {
                    confidence,
                    decision,
                    explanation,
                } => {
                    batch.push((id.clone(), EventKind::Scored, json!({ "confidence": confidence })));
                    batch.push((id.clone(), EventKind::Triaged, json!({ "decision": decision })));
                    match CaseState::from_triage(decision) {
                        CaseState::AutoDefect => summary.auto_defect += 1,
                        CaseState::InReview => summary.in_review += 1,
                        _ => summary.auto_pass += 1,
                    }
                    if let Some(path) = explanation {
                        batch.push((id, EventKind::Explained, json!({ "explanation_path": path })));
                        summary.explained += 1;
                    }
                }
                Outcome::Failed(error) => {
                    tracing::warn!(case = %id, %error, "case failed");
                    batch.push((id, EventKind::Failed, json!({ "error": error })));
                    summary.failed += 1;
                }
            }
        }
        store.commit(batch)?;
    }
    Ok(summary)
}

/// Second-order scatter over every case that has an explanation, written to
/// the store's `soxai` directory.
pub fn soxai_from_store(
    store: &Store,
    scorer: Option<&dyn ScorerBackend>,
    params: &TsneParams,
) -> Result<SoxaiExport> {
    let mut entries = Vec::new();
    let mut explanations = BTreeMap::new();
    for case in store.cases().into_values() {
        let Some(path) = store.explanation_file(&case) else {
            continue;
        };
        explanations.insert(case.id.clone(), load_explanation(path)?);
        entries.push(ManifestEntry {
            id: case.id.clone(),
            image_path: case.image_path.clone(),
            mask_path: String::new(),
            label: case.oracle_label.unwrap_or(crate::label::Label::Defective),
            kind: case.kind.unwrap_or(DefectKind::None),
            split: None,
        });
    }
    let manifest = DatasetManifest::new(entries, store.data_dir())?;
    export_soxai_scatter(&manifest, &explanations, scorer, params, store.data_dir().join(SOXAI_DIR))
}
