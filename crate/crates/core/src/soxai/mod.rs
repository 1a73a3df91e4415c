//! Second-order explainability: embed explanation regions and lay them out in 2-D.

pub mod tsne;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::classifier::ScorerBackend;
use crate::error::{Error, Result};
use crate::imaging::{luma, preprocess, NormalizedImage, IMAGE_SIZE};
use crate::synthgen::{DatasetManifest, DefectKind};
use crate::xai::{render_overlay, Explanation};

pub use tsne::{tsne, TsneParams, TsneResult};

pub const POOL_SIDE: u32 = 8;
pub const HIST_BINS: usize = 8;
/// 64 pooled blocks + 3×8 histogram bins + area and centroid.
pub const BASE_EMBEDDING_DIM: usize = 91;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
    /// Trailing components taken from the scorer's feature hook.
    pub scorer_feature_dims: usize,
}

fn hist_bin(v: f32) -> usize {
    ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1)
}

/// Pooled masked grayscale, per-channel factor-pixel histograms (each summing
/// to one when the mask is non-empty), area fraction and mask centroid. The
/// centroid of an empty mask is the image centre.
pub fn embed_explanation(
    id: impl Into<String>,
    image: &NormalizedImage,
    explanation: &Explanation,
    scorer_features: Option<&[f64]>,
) -> ExplanationEmbedding {
    let mask = explanation.union_mask();
    let block = IMAGE_SIZE / POOL_SIDE;
    let mut pooled = vec![0.0f64; (POOL_SIDE * POOL_SIDE) as usize];
    let mut hist = [[0.0f64; HIST_BINS]; 3];
    let (mut count, mut sx, mut sy) = (0usize, 0.0, 0.0);
    for (x, y) in mask.iter_set() {
        let [r, g, b] = image.pixel(x, y);
        pooled[((y / block) * POOL_SIDE + x / block) as usize] += f64::from(luma(r, g, b));
        for (c, v) in [r, g, b].into_iter().enumerate() {
            hist[c][hist_bin(v)] += 1.0;
        }
        count += 1;
        sx += f64::from(x) + 0.5;
        sy += f64::from(y) + 0.5;
    }
    let block_area = f64::from(block * block);
    let mut vector: Vec<f64> = pooled.into_iter().map(|s| s / block_area).collect();
    for channel in hist {
        vector.extend(channel.iter().map(|h| if count > 0 { h / count as f64 } else { 0.0 }));
    }
    let side = f64::from(IMAGE_SIZE);
    let area = count as f64 / (side * side);
    let (cx, cy) = if count > 0 {
        (sx / count as f64 / side, sy / count as f64 / side)
    } else {
        (0.5, 0.5)
    };
    vector.extend([area, cx, cy]);
    let extra = scorer_features.unwrap_or(&[]);
    vector.extend_from_slice(extra);
    ExplanationEmbedding {
        id: id.into(),
        vector,
        scorer_feature_dims: extra.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(with = "kind_or_unknown")]
    pub kind: Option<DefectKind>,
    pub thumbnail_path: Option<String>,
}

mod kind_or_unknown {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::synthgen::DefectKind;

    pub fn serialize<S: Serializer>(k: &Option<DefectKind>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.map_or("unknown", DefectKind::as_str))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DefectKind>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "unknown" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(serde::de::Error::custom)
        }
    }
}

/// Lays out embeddings with t-SNE and tags each point with its kind.
pub fn scatter_points(
    embeddings: &[ExplanationEmbedding],
    kinds: &[Option<DefectKind>],
    params: &TsneParams,
) -> Result<(Vec<ScatterPoint>, TsneResult)> {
    if kinds.len() != embeddings.len() {
        return Err(Error::param("one kind per embedding required"));
    }
    if let Some(e) = embeddings.iter().find(|e| e.vector.len() != embeddings[0].vector.len()) {
        return Err(Error::invalid(format!("embedding '{}' has a different dimension", e.id)));
    }
    let vectors: Vec<Vec<f64>> = embeddings.iter().map(|e| e.vector.clone()).collect();
    let result = tsne(&vectors, params)?;
    let points = embeddings
        .iter()
        .zip(kinds)
        .zip(&result.coords)
        .map(|((e, &kind), c)| ScatterPoint {
            id: e.id.clone(),
            x: c[0],
            y: c[1],
            kind,
            thumbnail_path: None,
        })
        .collect();
    Ok((points, result))
}

pub const THUMB_PX: u32 = 48;
pub const PLOT_PX: u32 = 1024;

#[derive(Debug, Clone)]
pub struct SoxaiExport {
    pub points: Vec<ScatterPoint>,
    pub embeddings: Vec<ExplanationEmbedding>,
    pub scatter_path: PathBuf,
    pub plot_path: PathBuf,
    pub kl_history: Vec<f64>,
}

fn kind_color(kind: Option<DefectKind>) -> Rgba<u8> {
    Rgba(match kind {
        None => [128, 128, 128, 255],
        Some(DefectKind::None) => [40, 160, 40, 255],
        Some(DefectKind::Splash) => [220, 60, 60, 255],
        Some(DefectKind::Crack) => [60, 60, 220, 255],
        Some(DefectKind::PoorWetting) => [230, 150, 20, 255],
        Some(DefectKind::Fiber) => [150, 60, 200, 255],
        Some(DefectKind::Burn) => [40, 40, 40, 255],
        Some(DefectKind::Disturbed) => [20, 180, 200, 255],
    })
}

/// Embeds every manifest entry's explanation, runs t-SNE and writes
/// `scatter.jsonl`, `scatter.png` and per-point thumbnails into `out_dir`.
/// When `scorer` is given its feature vector is appended to each embedding.
pub fn export_soxai_scatter(
    manifest: &DatasetManifest,
    explanations: &BTreeMap<String, Explanation>,
    scorer: Option<&dyn ScorerBackend>,
    params: &TsneParams,
    out_dir: impl AsRef<Path>,
) -> Result<SoxaiExport> {
    let missing: Vec<&str> = manifest
        .entries
        .iter()
        .map(|e| e.id.as_str())
        .filter(|id| !explanations.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("missing explanations for: {}", missing.join(", "))));
    }
    if manifest.entries.len() < 8 {
        return Err(Error::param(format!(
            "t-SNE needs at least 8 points, got {}",
            manifest.entries.len()
        )));
    }
    let out_dir = out_dir.as_ref();
    let thumbs_dir = out_dir.join("thumbnails");
    fs::create_dir_all(&thumbs_dir).map_err(|e| Error::io(&thumbs_dir, e))?;

    let mut embeddings = Vec::with_capacity(manifest.entries.len());
    let mut thumbs = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = manifest.resolve(&entry.image_path);
        let raw = image::open(&path).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        let img = preprocess(&raw.to_rgb8())?;
        let expl = &explanations[&entry.id];
        let feats = scorer.and_then(|s| s.features(&img));
        embeddings.push(embed_explanation(&entry.id, &img, expl, feats.as_deref()));
        let overlay = render_overlay(&img.to_rgb8(), expl)?;
        let thumb = imageops::resize(&overlay, THUMB_PX, THUMB_PX, FilterType::Triangle);
        let rel = format!("thumbnails/{}.png", entry.id);
        thumb.save(out_dir.join(&rel))?;
        thumbs.push((rel, thumb));
    }
    let kinds: Vec<Option<DefectKind>> = manifest.entries.iter().map(|e| Some(e.kind)).collect();
    let (mut points, result) = scatter_points(&embeddings, &kinds, params)?;
    for (p, (rel, _)) in points.iter_mut().zip(&thumbs) {
        p.thumbnail_path = Some(rel.clone());
    }

    let scatter_path = out_dir.join("scatter.jsonl");
    let mut f = fs::File::create(&scatter_path).map_err(|e| Error::io(&scatter_path, e))?;
    for p in &points {
        serde_json::to_writer(&mut f, p)?;
        f.write_all(b"\n").map_err(|e| Error::io(&scatter_path, e))?;
    }

    let plot_path = out_dir.join("scatter.png");
    render_plot(&points, thumbs.iter().map(|t| &t.1)).save(&plot_path)?;

    Ok(SoxaiExport {
        points,
        embeddings,
        scatter_path,
        plot_path,
        kl_history: result.kl_history,
    })
}

/// White canvas with each thumbnail centred on its scaled coordinates and
/// framed in its kind colour.
fn render_plot<'a>(points: &[ScatterPoint], thumbs: impl Iterator<Item = &'a RgbaImage>) -> RgbaImage {
    let mut canvas = RgbaImage::from_pixel(PLOT_PX, PLOT_PX, Rgba([255, 255, 255, 255]));
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let margin = f64::from(THUMB_PX);
    let span = f64::from(PLOT_PX) - 2.0 * margin;
    let scale = |v: f64, lo: f64, hi: f64| margin + if hi > lo { (v - lo) / (hi - lo) * span } else { span / 2.0 };
    for (p, thumb) in points.iter().zip(thumbs) {
        let cx = scale(p.x, x0, x1) as i64;
        let cy = scale(p.y, y0, y1) as i64;
        let half = i64::from(THUMB_PX / 2);
        let frame = kind_color(p.kind);
        for dy in -half - 2..half + 2 {
            for dx in -half - 2..half + 2 {
                let (x, y) = (cx + dx, cy + dy);
                if x < 0 || y < 0 || x >= i64::from(PLOT_PX) || y >= i64::from(PLOT_PX) {
                    continue;
                }
                let inner = dx >= -half && dx < half && dy >= -half && dy < half;
                let px = if inner {
                    *thumb.get_pixel((dx + half) as u32, (dy + half) as u32)
                } else {
                    frame
                };
                canvas.put_pixel(x as u32, y as u32, px);
            }
        }
    }
    canvas
}

/// Reads a scatter file written by [`export_soxai_scatter`].
pub fn load_scatter(path: impl AsRef<Path>) -> Result<Vec<ScatterPoint>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
