//! Question-answer trust, the trust matrix and NetTrustScore.

use serde::{Deserialize, Serialize};

use crate::classifier::{Confidence, ScoreRecord};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::triage::predict;

/// Reward exponent `alpha` for correct answers, penalty exponent `beta` for wrong ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrustParams")]
pub struct TrustParams {
    alpha: f64,
    beta: f64,
}

#[derive(Deserialize)]
struct RawTrustParams {
    #[serde(default = "one")]
    alpha: f64,
    #[serde(default = "one")]
    beta: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<RawTrustParams> for TrustParams {
    type Error = Error;

    fn try_from(r: RawTrustParams) -> Result<Self> {
        TrustParams::new(r.alpha, r.beta)
    }
}

impl Default for TrustParams {
    fn default() -> Self {
        TrustParams { alpha: 1.0, beta: 1.0 }
    }
}

impl TrustParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::param(format!(
                "trust exponents must be positive, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(TrustParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `confidence` is the model's confidence in the answer it gave.
pub fn qa_trust(confidence: Confidence, predicted: Label, oracle: Label, params: &TrustParams) -> f64 {
    let c = confidence.value();
    if predicted == oracle {
        c.powf(params.alpha)
    } else {
        (1.0 - c).powf(params.beta)
    }
}

/// Thresholded prediction and the model's confidence in it, from a raw defect confidence.
pub fn answer(defect_confidence: Confidence, threshold: f64) -> (Label, Confidence) {
    let predicted = predict(defect_confidence, threshold);
    let c = defect_confidence.value();
    let conf = if predicted.is_defective() { c } else { 1.0 - c };
    (predicted, Confidence::saturating(conf))
}

fn oracle_of(r: &ScoreRecord) -> Result<Label> {
    r.oracle_label
        .ok_or_else(|| Error::invalid(format!("record '{}' has no oracle label", r.id)))
}

/// Mean trust per (oracle, predicted) pair, indexed `[oracle][predicted]` with
/// non-defective first. Cells with no records are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustMatrix {
    pub cells: [[Option<f64>; 2]; 2],
    pub counts: [[usize; 2]; 2],
}

impl TrustMatrix {
    pub fn cell(&self, oracle: Label, predicted: Label) -> Option<f64> {
        self.cells[oracle.index()][predicted.index()]
    }

    pub fn count(&self, oracle: Label, predicted: Label) -> usize {
        self.counts[oracle.index()][predicted.index()]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Count-weighted mean of the defined cells.
    pub fn weighted_mean(&self) -> Option<f64> {
        let n = self.total();
        (n > 0).then(|| {
            let mut s = 0.0;
            for o in 0..2 {
                for p in 0..2 {
                    if let Some(v) = self.cells[o][p] {
                        s += v * self.counts[o][p] as f64;
                    }
                }
            }
            s / n as f64
        })
    }
}

pub fn trust_matrix(records: &[ScoreRecord], threshold: f64, params: &TrustParams) -> Result<TrustMatrix> {
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for r in records {
        let oracle = oracle_of(r)?;
        let (predicted, conf) = answer(r.confidence, threshold);
        sums[oracle.index()][predicted.index()] += qa_trust(conf, predicted, oracle, params);
        counts[oracle.index()][predicted.index()] += 1;
    }
    let cells = std::array::from_fn(|o| {
        std::array::from_fn(|p| (counts[o][p] > 0).then(|| sums[o][p] / counts[o][p] as f64))
    });
    Ok(TrustMatrix { cells, counts })
}

/// Uniform mean of question-answer trust over all records.
pub fn net_trust_score(records: &[ScoreRecord], threshold: f64, params: &TrustParams) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::param("NetTrustScore needs at least one record"));
    }
    let mut total = 0.0;
    for r in records {
        let oracle = oracle_of(r)?;
        let (predicted, conf) = answer(r.confidence, threshold);
        total += qa_trust(conf, predicted, oracle, params);
    }
    Ok(total / records.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    pub matrix: [[Option<f64>; 2]; 2],
    pub counts: [[usize; 2]; 2],
    pub net_trust_score: f64,
    pub n: usize,
    pub params: TrustParams,
    pub threshold: f64,
}

pub fn trust_report(records: &[ScoreRecord], threshold: f64, params: &TrustParams) -> Result<TrustReport> {
    let net = net_trust_score(records, threshold, params)?;
    let m = trust_matrix(records, threshold, params)?;
    Ok(TrustReport {
        matrix: m.cells,
        counts: m.counts,
        net_trust_score: net,
        n: records.len(),
        params: *params,
        threshold,
    })
}

/// Two-by-two text rendering with oracle rows and predicted columns.
pub fn format_trust_matrix(m: &TrustMatrix) -> String {
    let cell = |v: Option<f64>, n: usize| match v {
        Some(v) => format!("{v:.3} (n={n})"),
        None => "- (n=0)".to_string(),
    };
    let mut out = format!("{:<22}{:>18}{:>18}\n", "oracle \\ predicted", "non_defective", "defective");
    for o in Label::ALL {
        out.push_str(&format!(
            "{:<22}{:>18}{:>18}\n",
            o.to_string(),
            cell(m.cell(o, Label::NonDefective), m.count(o, Label::NonDefective)),
            cell(m.cell(o, Label::Defective), m.count(o, Label::Defective)),
        ));
    }
    out
}
