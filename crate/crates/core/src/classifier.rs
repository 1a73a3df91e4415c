//! Confidence-scoring backends, the external scores file, and the latency harness.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{NormalizedImage, IMAGE_SIZE};
use crate::label::Label;
use crate::synthgen::SOLDER_FRACTION;

/// Model confidence that a joint is defective, in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Confidence(f64);

impl Confidence {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Confidence(value))
        } else {
            Err(Error::invalid(format!("confidence {value} outside [0, 1]")))
        }
    }

    /// Clamps into range; NaN maps to 0.5.
    pub fn saturating(value: f64) -> Self {
        if value.is_nan() {
            Confidence(0.5)
        } else {
            Confidence(value.clamp(0.0, 1.0))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Confidence {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Confidence::new(v)
    }
}

impl From<Confidence> for f64 {
    fn from(c: Confidence) -> f64 {
        c.0
    }
}

impl fmt::Display for Confidence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}", self.0)
    }
}

/// One model answer, optionally paired with the oracle's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub confidence: Confidence,
    #[serde(
        rename = "label",
        default,
        skip_serializing_if = "Option::is_none",
        with = "label_bit"
    )]
    pub oracle_label: Option<Label>,
}

impl ScoreRecord {
    pub fn new(id: impl Into<String>, confidence: f64, oracle_label: Option<Label>) -> Result<Self> {
        Ok(ScoreRecord {
            id: id.into(),
            confidence: Confidence::new(confidence)?,
            oracle_label,
        })
    }
}

mod label_bit {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::label::Label;

    pub fn serialize<S: Serializer>(label: &Option<Label>, s: S) -> Result<S::Ok, S::Error> {
        match label {
            Some(l) => s.serialize_u8(l.index() as u8),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Label>, D::Error> {
        match Option::<u8>::deserialize(d)? {
            None => Ok(None),
            Some(bit) => Label::from_bit(bit)
                .map(Some)
                .ok_or_else(|| serde::de::Error::custom(format!("label must be 0 or 1, got {bit}"))),
        }
    }
}

/// Failure inside a scorer backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScorerFailure(pub String);

impl fmt::Display for ScorerFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A black-box binary classifier over normalized images.
pub trait ScorerBackend: Send + Sync {
    fn score(&self, image: &NormalizedImage) -> Result<Confidence, ScorerFailure>;

    /// Optional internal feature vector, used to enrich explanation embeddings.
    fn features(&self, _image: &NormalizedImage) -> Option<Vec<f64>> {
        None
    }

    fn name(&self) -> &str {
        "backend"
    }
}

impl<T: ScorerBackend + ?Sized> ScorerBackend for &T {
    fn score(&self, image: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
        (**self).score(image)
    }

    fn features(&self, image: &NormalizedImage) -> Option<Vec<f64>> {
        (**self).features(image)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Always answers the same confidence.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub Confidence);

impl ScorerBackend for ConstantScorer {
    fn score(&self, _: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
        Ok(self.0)
    }

    fn name(&self) -> &str {
        "constant"
    }
}

/// Names of the handcrafted features, in vector order.
pub const FEATURE_NAMES: [&str; 5] = [
    "off_pad_blob_mass",
    "exposed_pad",
    "dark_patch",
    "thin_structure",
    "ripple_energy",
];

/// Handcrafted stand-in for a trained defect classifier.
///
/// Confidence is `logistic(w · φ + b)` over five pixel-count features, each
/// squashed as `c / (c + scale)` so the score stays away from exactly 1:
///
/// * off-pad blob mass: solder-coloured pixels beyond the estimated pad edge,
/// * exposed pad: copper-coloured pixels inside the expected solder edge,
/// * dark patch: near-black pixels,
/// * thin structure: near-white pixels brighter than both neighbours three
///   pixels away,
/// * ripple energy: local brightness extrema at a two-pixel stride on grey
///   solder-like pixels, with both neighbours differing by more than 0.06.
///
/// The pad circle is fitted to the outer rim of the copper ring, which no
/// defect moves. Each feature is a count of locally
/// detected evidence, so occluding the evidence lowers the score.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceScorer {
    pub weights: [f64; 5],
    pub bias: f64,
    /// Half-saturation counts: a feature reaches 0.5 at this many pixels.
    pub scales: [f64; 5],
}

impl Default for ReferenceScorer {
    fn default() -> Self {
        ReferenceScorer {
            weights: [8.0; 5],
            bias: -4.0,
            scales: [40.0, 40.0, 40.0, 30.0, 80.0],
        }
    }
}

const MIN_COPPER_PX: usize = 200;
/// Copper this far inside the expected solder edge is exposed.
const EXPOSED_MARGIN: f64 = 3.0;
/// Thin ridges must be near-white, brighter than any solder.
const THIN_MIN_LUMA: f32 = 0.85;
/// Ripple extrema are only counted on grey, solder-like pixels.
const RIPPLE_MIN_LUMA: f32 = 0.42;

impl ReferenceScorer {
    /// Raw evidence pixel counts, before scaling.
    pub fn evidence_counts(&self, img: &NormalizedImage) -> [usize; 5] {
        let mut counts = [0; 5];
        for flags in self.evidence_map(img) {
            for (k, c) in counts.iter_mut().enumerate() {
                *c += usize::from(flags >> k & 1);
            }
        }
        counts
    }

    /// Row-major per-pixel bit set; bit `k` marks evidence for feature `k`.
    pub fn evidence_map(&self, img: &NormalizedImage) -> Vec<u8> {
        let n = IMAGE_SIZE as usize;
        let px = img.as_slice();
        let mut lum = vec![0f32; n * n];
        let mut grey = vec![false; n * n];
        let mut class = vec![0u8; n * n]; // 1 solder, 2 copper, 3 dark
        let mut cu_n = 0usize;
        for i in 0..n * n {
            let (r, g, b) = (px[3 * i], px[3 * i + 1], px[3 * i + 2]);
            let l = 0.299 * r + 0.587 * g + 0.114 * b;
            lum[i] = l;
            let sat = r.max(g).max(b) - r.min(g).min(b);
            grey[i] = l > RIPPLE_MIN_LUMA && sat < 0.2;
            class[i] = if r > 0.5 && r - b > 0.3 && r > g && g > b {
                cu_n += 1;
                2
            } else if l > 0.48 && sat < 0.2 {
                1
            } else if l < 0.16 {
                3
            } else {
                0
            };
        }

        let mut flags = vec![0u8; n * n];
        let pad = if cu_n >= MIN_COPPER_PX { fit_pad_circle(&class, n) } else { None };
        for i in 0..n * n {
            match class[i] {
                3 => flags[i] |= 1 << 2,
                c @ (1 | 2) => {
                    if let Some((cx, cy, radius)) = pad {
                        let d = ((i % n) as f64 - cx).hypot((i / n) as f64 - cy);
                        if c == 1 && d > radius + 5.0 {
                            flags[i] |= 1;
                        } else if c == 2 && d < SOLDER_FRACTION * radius - EXPOSED_MARGIN {
                            flags[i] |= 1 << 1;
                        }
                    }
                }
                _ => {}
            }
        }

        let at = |x: usize, y: usize| lum[y * n + x];
        for y in 0..n {
            for x in 0..n {
                let p = at(x, y);
                let bright = p > THIN_MIN_LUMA;
                let ridge_h = x >= 3 && x + 3 < n && p - at(x - 3, y).max(at(x + 3, y)) > 0.12;
                let ridge_v = y >= 3 && y + 3 < n && p - at(x, y - 3).max(at(x, y + 3)) > 0.12;
                if bright && (ridge_h || ridge_v) {
                    flags[y * n + x] |= 1 << 3;
                }
                let ext = |a: f32, b: f32| (p - a) * (p - b) > 0.0 && (p - a).abs().min((p - b).abs()) > 0.06;
                let g = |x: usize, y: usize| grey[y * n + x];
                let ext_h = x >= 2 && x + 2 < n && g(x - 2, y) && g(x + 2, y) && ext(at(x - 2, y), at(x + 2, y));
                let ext_v = y >= 2 && y + 2 < n && g(x, y - 2) && g(x, y + 2) && ext(at(x, y - 2), at(x, y + 2));
                if grey[y * n + x] && (ext_h || ext_v) {
                    flags[y * n + x] |= 1 << 4;
                }
            }
        }
        flags
    }

    /// The feature vector φ, each count `c` mapped to `c / (c + scale)`.
    pub fn feature_vector(&self, img: &NormalizedImage) -> [f64; 5] {
        let counts = self.evidence_counts(img);
        std::array::from_fn(|k| {
            let c = counts[k] as f64;
            c / (c + self.scales[k])
        })
    }

    pub fn confidence_from_features(&self, phi: &[f64; 5]) -> Confidence {
        let z: f64 = self.bias + self.weights.iter().zip(phi).map(|(w, f)| w * f).sum::<f64>();
        Confidence::saturating(logistic(z))
    }
}

/// Pad circle `(cx, cy, r)` fitted to the outer copper edge: copper pixels
/// with a 4-neighbour that is neither copper nor solder. An algebraic circle
/// fit is repeated with shrinking residual cut-offs, so edge pixels created by
/// occluders or dark blobs are discarded and a partially hidden rim still
/// yields the same circle.
fn fit_pad_circle(class: &[u8], n: usize) -> Option<(f64, f64, f64)> {
    let mut pts = Vec::new();
    for y in 1..n - 1 {
        for x in 1..n - 1 {
            let i = y * n + x;
            if class[i] == 2 && [i - 1, i + 1, i - n, i + n].iter().any(|&j| class[j] != 1 && class[j] != 2) {
                pts.push((x as f64, y as f64));
            }
        }
    }
    let mut circle = fit_circle(&pts)?;
    for cut in [8.0, 4.0, 2.0] {
        let (cx, cy, r) = circle;
        let kept: Vec<_> = pts
            .iter()
            .copied()
            .filter(|&(x, y)| ((x - cx).hypot(y - cy) - r).abs() <= cut)
            .collect();
        circle = fit_circle(&kept)?;
    }
    Some(circle)
}

/// Least-squares fit of `x² + y² + Dx + Ey + F = 0`.
fn fit_circle(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 16 {
        return None;
    }
    // normal equations for [D, E, F], centred for conditioning
    let m = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / m, b + p.1 / m));
    let mut a = [[0.0f64; 4]; 3];
    for &(x, y) in pts {
        let (u, v) = (x - mx, y - my);
        let row = [u, v, 1.0];
        let rhs = -(u * u + v * v);
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += row[r] * row[c];
            }
            a[r][3] += row[r] * rhs;
        }
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() < 1e-9 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..4 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let [d, e, f] = [a[0][3] / a[0][0], a[1][3] / a[1][1], a[2][3] / a[2][2]];
    let r2 = (d * d + e * e) / 4.0 - f;
    (r2 > 0.0).then(|| (mx - d / 2.0, my - e / 2.0, r2.sqrt()))
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ScorerBackend for ReferenceScorer {
    fn score(&self, image: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
        Ok(self.confidence_from_features(&self.feature_vector(image)))
    }

    fn features(&self, image: &NormalizedImage) -> Option<Vec<f64>> {
        Some(self.feature_vector(image).to_vec())
    }

    fn name(&self) -> &str {
        "reference"
    }
}

/// Reads `{id, confidence, label?}` lines. Blank lines are skipped.
pub fn load_external_scores(path: impl AsRef<Path>) -> Result<Vec<ScoreRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_scores(BufReader::new(file), &path.display().to_string())
}

pub fn parse_scores(reader: impl BufRead, source: &str) -> Result<Vec<ScoreRecord>> {
    #[derive(Deserialize)]
    struct Raw {
        id: Option<String>,
        confidence: Option<f64>,
        #[serde(default, with = "label_bit")]
        label: Option<Label>,
    }

    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Raw = serde_json::from_str(&line)
            .map_err(|e| Error::invalid(format!("{source}:{lineno}: malformed record: {e}")))?;
        let name = raw.id.clone().unwrap_or_else(|| format!("<line {lineno}>"));
        let id = raw
            .id
            .ok_or_else(|| Error::invalid(format!("{source}:{lineno}: record {name} has no id")))?;
        let c = raw
            .confidence
            .ok_or_else(|| Error::invalid(format!("{source}:{lineno}: record {name} has no confidence")))?;
        let confidence = Confidence::new(c).map_err(|_| {
            Error::invalid(format!("{source}:{lineno}: record {name} has confidence {c} outside [0, 1]"))
        })?;
        if !seen.insert(id.clone()) {
            return Err(Error::invalid(format!("{source}:{lineno}: duplicate id '{id}'")));
        }
        out.push(ScoreRecord {
            id,
            confidence,
            oracle_label: raw.label,
        });
    }
    Ok(out)
}

pub fn write_scores(path: impl AsRef<Path>, records: &[ScoreRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub backend: String,
    pub warmups: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
}

/// Runs `warmups` untimed invocations, then `runs` timed ones, strictly in
/// sequence, and reports the mean wall-clock duration of the timed runs.
pub fn measure_latency(
    backend: &dyn ScorerBackend,
    input: &NormalizedImage,
    warmups: usize,
    runs: usize,
) -> Result<LatencyReport> {
    if runs == 0 {
        return Err(Error::param("latency measurement needs at least one run"));
    }
    let fail = |i: usize, e: ScorerFailure| Error::Scorer {
        at: format!("invocation {i}"),
        message: e.0,
    };
    for i in 0..warmups {
        backend.score(input).map_err(|e| fail(i, e))?;
    }
    let mut samples = Vec::with_capacity(runs);
    for i in 0..runs {
        let start = Instant::now();
        let out = backend.score(input);
        samples.push(start.elapsed());
        out.map_err(|e| fail(warmups + i, e))?;
    }
    let secs = |d: &Duration| d.as_secs_f64();
    Ok(LatencyReport {
        backend: backend.name().to_string(),
        warmups,
        runs,
        mean_seconds: samples.iter().map(secs).sum::<f64>() / runs as f64,
        min_seconds: samples.iter().map(secs).fold(f64::INFINITY, f64::min),
        max_seconds: samples.iter().map(secs).fold(0.0, f64::max),
    })
}
