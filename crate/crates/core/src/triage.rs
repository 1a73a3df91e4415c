//! Confidence-region triage and the accuracy / overkill / escape metrics.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::classifier::{Confidence, ScoreRecord};
use crate::error::{Error, Result};
use crate::label::Label;

/// Boundaries of the review band: `[t_low, t_high]` is "possibly defective".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawThresholds")]
pub struct TriageThresholds {
    t_low: f64,
    t_high: f64,
}

#[derive(Deserialize)]
struct RawThresholds {
    t_low: f64,
    t_high: f64,
}

impl TryFrom<RawThresholds> for TriageThresholds {
    type Error = Error;

    fn try_from(r: RawThresholds) -> Result<Self> {
        TriageThresholds::new(r.t_low, r.t_high)
    }
}

impl Default for TriageThresholds {
    fn default() -> Self {
        TriageThresholds {
            t_low: 0.3,
            t_high: 0.7,
        }
    }
}

impl TriageThresholds {
    pub fn new(t_low: f64, t_high: f64) -> Result<Self> {
        if !(0.0 <= t_low && t_low <= t_high && t_high <= 1.0) {
            return Err(Error::param(format!(
                "thresholds must satisfy 0 ≤ t_low ≤ t_high ≤ 1, got ({t_low}, {t_high})"
            )));
        }
        Ok(TriageThresholds { t_low, t_high })
    }

    pub fn t_low(&self) -> f64 {
        self.t_low
    }

    pub fn t_high(&self) -> f64 {
        self.t_high
    }
}

/// Ordered by severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriageDecision {
    NonDefective,
    PossiblyDefective,
    Defective,
}

impl fmt::Display for TriageDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TriageDecision::NonDefective => "non_defective",
            TriageDecision::PossiblyDefective => "possibly_defective",
            TriageDecision::Defective => "defective",
        })
    }
}

/// Closed middle band: values equal to either threshold need review.
pub fn triage(c: Confidence, th: &TriageThresholds) -> TriageDecision {
    let v = c.value();
    if v < th.t_low {
        TriageDecision::NonDefective
    } else if v > th.t_high {
        TriageDecision::Defective
    } else {
        TriageDecision::PossiblyDefective
    }
}

/// Thresholded prediction; ties predict defective.
pub fn predict(c: Confidence, threshold: f64) -> Label {
    if c.value() >= threshold {
        Label::Defective
    } else {
        Label::NonDefective
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    pub overkill: f64,
    pub escape: f64,
    pub threshold: f64,
    pub true_positives: usize,
    pub true_negatives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl EvalReport {
    /// Builds a report from confusion counts. `n` must be positive.
    pub fn from_counts(tp: usize, tn: usize, fp: usize, fneg: usize, threshold: f64) -> Result<Self> {
        let n = tp + tn + fp + fneg;
        if n == 0 {
            return Err(Error::param("evaluation needs at least one record"));
        }
        let nf = n as f64;
        Ok(EvalReport {
            n,
            accuracy: (tp + tn) as f64 / nf,
            overkill: fp as f64 / nf,
            escape: fneg as f64 / nf,
            threshold,
            true_positives: tp,
            true_negatives: tn,
            false_positives: fp,
            false_negatives: fneg,
        })
    }

    /// Accuracy, overkill and escape in tenths of a percent, rounded by
    /// largest remainder so the three always total exactly 1000.
    pub fn permille(&self) -> [u64; 3] {
        let n = self.n as u64;
        let parts = [
            (self.true_positives + self.true_negatives) as u64,
            self.false_positives as u64,
            self.false_negatives as u64,
        ];
        let mut q = parts.map(|c| c * 1000 / n);
        let rem = parts.map(|c| c * 1000 % n);
        let short = 1000 - q.iter().sum::<u64>();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
        for &i in order.iter().take(short as usize) {
            q[i] += 1;
        }
        q
    }

    /// One-decimal percentages, e.g. `["91.0", "5.0", "4.0"]`.
    pub fn percent_strings(&self) -> [String; 3] {
        self.permille().map(|p| format!("{}.{}", p / 10, p % 10))
    }
}

/// Accuracy, overkill (false positives / n) and escape (false negatives / n)
/// at `threshold`, with defective as the positive class.
pub fn evaluate(records: &[ScoreRecord], threshold: f64) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::param("evaluation needs at least one record"));
    }
    let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
    for r in records {
        let truth = r
            .oracle_label
            .ok_or_else(|| Error::invalid(format!("record '{}' has no oracle label", r.id)))?;
        match (predict(r.confidence, threshold), truth) {
            (Label::Defective, Label::Defective) => tp += 1,
            (Label::NonDefective, Label::NonDefective) => tn += 1,
            (Label::Defective, Label::NonDefective) => fp += 1,
            (Label::NonDefective, Label::Defective) => fneg += 1,
        }
    }
    EvalReport::from_counts(tp, tn, fp, fneg, threshold)
}

/// Plain-text table in the layout `name | Accuracy (%) | Overkill (%) | Escape (%)`.
pub fn format_eval_table(rows: &[(&str, &EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max("Model".len());
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>10}\n",
        "Model", "Accuracy (%)", "Overkill (%)", "Escape (%)"
    );
    for (name, r) in rows {
        let [a, o, e] = r.percent_strings();
        out.push_str(&format!("{name:<width$}  {a:>12}  {o:>12}  {e:>10}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(v: f64) -> Confidence {
        Confidence::new(v).unwrap()
    }

    fn recs(labels: &[u8], confs: &[f64]) -> Vec<ScoreRecord> {
        labels
            .iter()
            .zip(confs)
            .enumerate()
            .map(|(i, (&l, &cf))| ScoreRecord::new(format!("r{i}"), cf, Label::from_bit(l)).unwrap())
            .collect()
    }

    #[test]
    fn regions() {
        let th = TriageThresholds::new(0.3, 0.7).unwrap();
        assert_eq!(triage(c(0.85), &th), TriageDecision::Defective);
        assert_eq!(triage(c(0.5), &th), TriageDecision::PossiblyDefective);
        assert_eq!(triage(c(0.1), &th), TriageDecision::NonDefective);
        assert_eq!(triage(c(0.3), &th), TriageDecision::PossiblyDefective);
        assert_eq!(triage(c(0.7), &th), TriageDecision::PossiblyDefective);
    }

    #[test]
    fn thresholds_validated() {
        assert!(TriageThresholds::new(0.8, 0.2).is_err());
        assert!(TriageThresholds::new(-0.1, 0.2).is_err());
        assert!(TriageThresholds::new(0.5, 0.5).is_ok());
        assert!(serde_json::from_str::<TriageThresholds>(r#"{"t_low":0.9,"t_high":0.1}"#).is_err());
    }

    #[test]
    fn hand_enumerated_confusion() {
        let r = evaluate(&recs(&[1, 0, 1, 0], &[0.9, 0.2, 0.4, 0.7]), 0.5).unwrap();
        assert_eq!((r.true_positives, r.true_negatives, r.false_negatives, r.false_positives), (1, 1, 1, 1));
        assert_eq!((r.accuracy, r.overkill, r.escape), (0.5, 0.25, 0.25));
    }

    #[test]
    fn all_correct() {
        let r = evaluate(&recs(&[1, 0, 1], &[0.9, 0.1, 0.5]), 0.5).unwrap();
        assert_eq!((r.accuracy, r.overkill, r.escape), (1.0, 0.0, 0.0));
    }

    #[test]
    fn missing_label_names_record() {
        let mut rs = recs(&[1, 0], &[0.9, 0.1]);
        rs[1].oracle_label = None;
        let err = evaluate(&rs, 0.5).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("r1")));
        assert!(evaluate(&[], 0.5).is_err());
    }

    #[test]
    fn percent_strings_sum_to_hundred() {
        let r = EvalReport::from_counts(1, 1, 1, 0, 0.5).unwrap();
        let p = r.permille();
        assert_eq!(p.iter().sum::<u64>(), 1000);
        assert_eq!(r.percent_strings(), ["66.7", "33.3", "0.0"]);
    }

    #[test]
    fn table_layout() {
        let r = EvalReport::from_counts(50, 41, 5, 4, 0.5).unwrap();
        let t = format_eval_table(&[("model", &r)]);
        assert!(t.lines().nth(1).unwrap().ends_with("91.0           5.0         4.0"), "{t}");
    }

    proptest! {
        #[test]
        fn decision_monotone_in_confidence(a in 0.0..=1.0f64, b in 0.0..=1.0f64, lo in 0.0..=1.0f64, hi in 0.0..=1.0f64) {
            let th = TriageThresholds::new(lo.min(hi), lo.max(hi)).unwrap();
            let (x, y) = (a.min(b), a.max(b));
            prop_assert!(triage(c(x), &th) <= triage(c(y), &th));
        }

        #[test]
        fn collapsed_band_agrees_with_prediction(v in 0.0..=1.0f64) {
            let th = TriageThresholds::new(0.5, 0.5).unwrap();
            let d = triage(c(v), &th);
            if v == 0.5 {
                prop_assert_eq!(d, TriageDecision::PossiblyDefective);
            } else {
                prop_assert_ne!(d, TriageDecision::PossiblyDefective);
                prop_assert_eq!(d == TriageDecision::Defective, predict(c(v), 0.5) == Label::Defective);
            }
        }
    }
}
