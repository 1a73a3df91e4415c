//! Occlusion-based quantitative explanations.
//!
//! A coarse pass replaces each grid cell with a baseline colour and records
//! the confidence drop `Δ = score(image) − score(occluded)`. The cells with
//! the largest positive drops, enough to cover a fraction `rho` of the total
//! positive drop, are grouped into 4-connected critical factors. A fine pass
//! then subdivides every factor cell and repeats the occlusion per subcell,
//! giving each factor a regional heatmap rescaled to a maximum of one.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgba, RgbaImage, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{Confidence, ScorerBackend};
use crate::error::{Error, Result};
use crate::imaging::{NormalizedImage, IMAGE_SIZE};
use crate::mask::{Mask, Rect};

/// Fill colour for occluded regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Per-channel mean colour of the image being explained.
    #[default]
    MeanColor,
    MidGray,
    Color([f32; 3]),
}

impl Baseline {
    pub fn color(&self, image: &NormalizedImage) -> [f32; 3] {
        match *self {
            Baseline::MeanColor => image.mean_color(),
            Baseline::MidGray => [0.5; 3],
            Baseline::Color(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XaiParams {
    /// Coarse cells per side.
    pub grid: u32,
    /// Subcells per side within each coarse cell.
    pub subdivide: u32,
    /// Fraction of the positive confidence drop the factors must cover.
    pub rho: f64,
    pub baseline: Baseline,
}

impl Default for XaiParams {
    fn default() -> Self {
        XaiParams {
            grid: 16,
            subdivide: 4,
            rho: 0.8,
            baseline: Baseline::MeanColor,
        }
    }
}

/// Row/column position in a grid.
pub type Cell = (u32, u32);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub grid_size: u32,
    pub cell_px: u32,
    pub base_confidence: Confidence,
    /// Row-major confidence drops, one per cell.
    pub cell_deltas: Vec<f64>,
}

impl ImportanceMap {
    /// Wraps precomputed drops; `grid_size · cell_px` must equal the image side.
    pub fn new(grid_size: u32, base_confidence: Confidence, cell_deltas: Vec<f64>) -> Result<Self> {
        if grid_size == 0 || !IMAGE_SIZE.is_multiple_of(grid_size) {
            return Err(Error::param(format!("grid size {grid_size} does not divide {IMAGE_SIZE}")));
        }
        if cell_deltas.len() != (grid_size * grid_size) as usize {
            return Err(Error::param(format!(
                "expected {} cell deltas, got {}",
                grid_size * grid_size,
                cell_deltas.len()
            )));
        }
        if cell_deltas.iter().any(|d| !d.is_finite()) {
            return Err(Error::invalid("cell deltas must be finite"));
        }
        Ok(ImportanceMap {
            grid_size,
            cell_px: IMAGE_SIZE / grid_size,
            base_confidence,
            cell_deltas,
        })
    }

    pub fn delta(&self, (row, col): Cell) -> f64 {
        self.cell_deltas[(row * self.grid_size + col) as usize]
    }

    pub fn positive_total(&self) -> f64 {
        self.cell_deltas.iter().filter(|d| **d > 0.0).sum()
    }

    pub fn argmax(&self) -> Cell {
        let i = self
            .cell_deltas
            .iter()
            .enumerate()
            .fold(0, |best, (i, d)| if *d > self.cell_deltas[best] { i } else { best });
        (i as u32 / self.grid_size, i as u32 % self.grid_size)
    }

    pub fn cell_rect(&self, (row, col): Cell) -> Rect {
        let p = self.cell_px;
        Rect::new(col * p, row * p, (col + 1) * p, (row + 1) * p)
    }
}

/// Relative importance of one subcell within a factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubcellHeat {
    pub rect: Rect,
    /// Raw confidence drop when only this subcell is occluded.
    pub delta: f64,
    /// Rescaled to `[0, 1]` within the factor.
    pub heat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalFactor {
    /// Coarse cells, row-major.
    pub cells: Vec<Cell>,
    pub cell_px: u32,
    /// Sum of the coarse drops of this factor's cells.
    pub importance: f64,
    /// Absent until the factor is refined.
    pub heatmap: Option<Vec<SubcellHeat>>,
}

impl CriticalFactor {
    /// Refined factors cover their subcells with positive heat; coarse ones
    /// cover their whole cells.
    pub fn mask(&self) -> Mask {
        let mut m = Mask::new(IMAGE_SIZE, IMAGE_SIZE);
        match &self.heatmap {
            Some(subs) => subs.iter().filter(|s| s.heat > 0.0).for_each(|s| m.fill_rect(s.rect)),
            None => {
                let p = self.cell_px;
                for &(r, c) in &self.cells {
                    m.fill_rect(Rect::new(c * p, r * p, (c + 1) * p, (r + 1) * p));
                }
            }
        }
        m
    }

    /// Heat per pixel, zero outside the factor mask.
    pub fn heat_image(&self) -> Vec<f32> {
        let n = IMAGE_SIZE as usize;
        let mut out = vec![0f32; n * n];
        let whole;
        let subs: &[SubcellHeat] = match &self.heatmap {
            Some(s) => s,
            None => {
                let p = self.cell_px;
                whole = self
                    .cells
                    .iter()
                    .map(|&(r, c)| SubcellHeat {
                        rect: Rect::new(c * p, r * p, (c + 1) * p, (r + 1) * p),
                        delta: 0.0,
                        heat: 1.0,
                    })
                    .collect::<Vec<_>>();
                &whole
            }
        };
        for s in subs {
            for y in s.rect.y0..s.rect.y1 {
                for x in s.rect.x0..s.rect.x1 {
                    out[y as usize * n + x as usize] = s.heat as f32;
                }
            }
        }
        out
    }

    pub fn bbox(&self) -> Option<Rect> {
        self.mask().bbox()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub importance: ImportanceMap,
    pub factors: Vec<CriticalFactor>,
    /// Share of the total positive coarse drop carried by the factors.
    pub mass_fraction: f64,
}

impl Explanation {
    pub fn union_mask(&self) -> Mask {
        let mut m = Mask::new(IMAGE_SIZE, IMAGE_SIZE);
        for f in &self.factors {
            m.union_with(&f.mask());
        }
        m
    }
}

fn occlude(image: &NormalizedImage, rect: Rect, fill: [f32; 3]) -> NormalizedImage {
    let mut img = image.clone();
    img.fill_rect(rect.x0, rect.y0, rect.x1, rect.y1, fill);
    img
}

fn score_at(scorer: &dyn ScorerBackend, img: &NormalizedImage, at: impl FnOnce() -> String) -> Result<f64> {
    scorer
        .score(img)
        .map(Confidence::value)
        .map_err(|e| Error::Scorer { at: at(), message: e.0 })
}

/// Coarse occlusion pass over a `grid × grid` partition of the image.
pub fn occlusion_importance(
    image: &NormalizedImage,
    scorer: &dyn ScorerBackend,
    grid: u32,
    baseline: Baseline,
) -> Result<ImportanceMap> {
    if grid == 0 || !IMAGE_SIZE.is_multiple_of(grid) {
        return Err(Error::param(format!("grid size {grid} does not divide {IMAGE_SIZE}")));
    }
    let base = score_at(scorer, image, || "unoccluded image".into())?;
    let fill = baseline.color(image);
    let cell_px = IMAGE_SIZE / grid;
    let deltas = (0..grid * grid)
        .into_par_iter()
        .map(|i| {
            let (row, col) = (i / grid, i % grid);
            let rect = Rect::new(col * cell_px, row * cell_px, (col + 1) * cell_px, (row + 1) * cell_px);
            let s = score_at(scorer, &occlude(image, rect, fill), || format!("cell ({row}, {col})"))?;
            Ok(base - s)
        })
        .collect::<Result<Vec<f64>>>()?;
    ImportanceMap::new(grid, Confidence::saturating(base), deltas)
}

/// Indices of the cells chosen to cover `rho` of the positive drop, in selection order.
pub fn select_cells(map: &ImportanceMap, rho: f64) -> Result<Vec<Cell>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::param(format!("rho {rho} outside (0, 1]")));
    }
    let g = map.grid_size;
    let mut positive: Vec<usize> = (0..map.cell_deltas.len()).filter(|&i| map.cell_deltas[i] > 0.0).collect();
    // descending drop, ties row-major
    positive.sort_by(|&a, &b| map.cell_deltas[b].total_cmp(&map.cell_deltas[a]).then(a.cmp(&b)));
    let target = rho * map.positive_total();
    let mut covered = 0.0;
    let mut chosen = Vec::new();
    for i in positive {
        if covered >= target && !chosen.is_empty() {
            break;
        }
        covered += map.cell_deltas[i];
        chosen.push((i as u32 / g, i as u32 % g));
    }
    Ok(chosen)
}

/// Groups the selected cells into 4-connected factors, largest importance first.
pub fn extract_critical_factors(map: &ImportanceMap, rho: f64) -> Result<Vec<CriticalFactor>> {
    let selected: BTreeSet<Cell> = select_cells(map, rho)?.into_iter().collect();
    let mut seen = BTreeSet::new();
    let mut factors = Vec::new();
    for &start in &selected {
        if !seen.insert(start) {
            continue;
        }
        let mut cells = vec![start];
        let mut queue = VecDeque::from([start]);
        while let Some((r, c)) = queue.pop_front() {
            let neighbours = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            for nb in neighbours {
                if selected.contains(&nb) && seen.insert(nb) {
                    cells.push(nb);
                    queue.push_back(nb);
                }
            }
        }
        cells.sort_unstable();
        let importance = cells.iter().map(|&c| map.delta(c)).sum();
        factors.push(CriticalFactor {
            cells,
            cell_px: map.cell_px,
            importance,
            heatmap: None,
        });
    }
    factors.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.cells[0].cmp(&b.cells[0])));
    Ok(factors)
}

/// Clamps drops at zero and rescales so the largest is one. When no drop is
/// positive every value is one, matching the constant case.
pub fn normalize_heat(deltas: &[f64]) -> Vec<f64> {
    let max = deltas.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        deltas.iter().map(|d| d.max(0.0) / max).collect()
    } else {
        vec![1.0; deltas.len()]
    }
}

/// Fine pass: per-subcell occlusion inside every factor cell.
pub fn refine_within_factors(
    image: &NormalizedImage,
    scorer: &dyn ScorerBackend,
    map: ImportanceMap,
    factors: Vec<CriticalFactor>,
    subdivide: u32,
    baseline: Baseline,
) -> Result<Explanation> {
    if subdivide == 0 || !map.cell_px.is_multiple_of(subdivide) {
        return Err(Error::param(format!(
            "subdivide {subdivide} does not divide the {} px cell",
            map.cell_px
        )));
    }
    let sub_px = map.cell_px / subdivide;
    let base = map.base_confidence.value();
    let fill = baseline.color(image);
    let total = map.positive_total();
    let covered: f64 = factors.iter().flat_map(|f| &f.cells).map(|&c| map.delta(c).max(0.0)).sum();

    let mut refined = Vec::with_capacity(factors.len());
    for mut factor in factors {
        let rects: Vec<Rect> = factor
            .cells
            .iter()
            .flat_map(|&(row, col)| {
                (0..subdivide * subdivide).map(move |k| {
                    let (sr, sc) = (k / subdivide, k % subdivide);
                    let x0 = col * map.cell_px + sc * sub_px;
                    let y0 = row * map.cell_px + sr * sub_px;
                    Rect::new(x0, y0, x0 + sub_px, y0 + sub_px)
                })
            })
            .collect();
        let deltas = rects
            .par_iter()
            .map(|&r| {
                let s = score_at(scorer, &occlude(image, r, fill), || {
                    format!("subcell at ({}, {})", r.x0, r.y0)
                })?;
                Ok(base - s)
            })
            .collect::<Result<Vec<f64>>>()?;
        let heat = normalize_heat(&deltas);
        factor.heatmap = Some(
            rects
                .into_iter()
                .zip(deltas)
                .zip(heat)
                .map(|((rect, delta), heat)| SubcellHeat { rect, delta, heat })
                .collect(),
        );
        refined.push(factor);
    }
    Ok(Explanation {
        importance: map,
        factors: refined,
        mass_fraction: if total > 0.0 { covered / total } else { 1.0 },
    })
}

/// Full explanation: coarse occlusion, factor extraction, fine refinement.
pub fn explain(image: &NormalizedImage, scorer: &dyn ScorerBackend, params: &XaiParams) -> Result<Explanation> {
    let map = occlusion_importance(image, scorer, params.grid, params.baseline)?;
    let factors = extract_critical_factors(&map, params.rho)?;
    refine_within_factors(image, scorer, map, factors, params.subdivide, params.baseline)
}

/// Confidence drop when every pixel of `mask` takes the baseline colour.
pub fn deletion_score(
    image: &NormalizedImage,
    scorer: &dyn ScorerBackend,
    mask: &Mask,
    baseline: Baseline,
) -> Result<f64> {
    if (mask.width(), mask.height()) != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::param("deletion mask must match the image size"));
    }
    let base = score_at(scorer, image, || "unoccluded image".into())?;
    if mask.is_empty() {
        return Ok(0.0);
    }
    let fill = baseline.color(image);
    let mut img = image.clone();
    for (x, y) in mask.iter_set() {
        img.set_pixel(x, y, fill);
    }
    Ok(base - score_at(scorer, &img, || "masked image".into())?)
}

/// Random mask of `block`-sized squares with at least the area of `like`.
pub fn random_equal_area_mask(like: &Mask, block: u32, seed: u64) -> Mask {
    let per_side = IMAGE_SIZE / block;
    let area = like.count();
    let need = area.div_ceil((block * block) as usize);
    let mut blocks: Vec<u32> = (0..per_side * per_side).collect();
    blocks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut m = Mask::new(IMAGE_SIZE, IMAGE_SIZE);
    for &b in blocks.iter().take(need) {
        let (r, c) = (b / per_side, b % per_side);
        m.fill_rect(Rect::new(c * block, r * block, (c + 1) * block, (r + 1) * block));
    }
    m
}

/// Blue → cyan → green → yellow → red.
pub fn heat_color(t: f64) -> [u8; 3] {
    const STOPS: [[f64; 3]; 5] = [
        [0.0, 0.0, 255.0],
        [0.0, 255.0, 255.0],
        [0.0, 255.0, 0.0],
        [255.0, 255.0, 0.0],
        [255.0, 0.0, 0.0],
    ];
    let t = t.clamp(0.0, 1.0) * 4.0;
    let i = (t.floor() as usize).min(3);
    let f = t - i as f64;
    std::array::from_fn(|k| (STOPS[i][k] * (1.0 - f) + STOPS[i + 1][k] * f).round() as u8)
}

pub const OVERLAY_ALPHA: f64 = 0.5;

/// White 1 px contour around each factor, heatmap blended at 50 % inside.
/// Pixels outside every factor are copied unchanged with full opacity.
pub fn render_overlay(image: &RgbImage, explanation: &Explanation) -> Result<RgbaImage> {
    if image.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
        return Err(Error::param(format!(
            "overlay needs a {IMAGE_SIZE}×{IMAGE_SIZE} image, got {}×{}",
            image.width(),
            image.height()
        )));
    }
    let mut out = RgbaImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
        let [r, g, b] = image.get_pixel(x, y).0;
        Rgba([r, g, b, 255])
    });
    let n = IMAGE_SIZE as usize;
    for factor in &explanation.factors {
        let mask = factor.mask();
        let edge = mask.boundary();
        let heat = factor.heat_image();
        for (x, y) in mask.iter_set() {
            if edge.get(x, y) {
                out.put_pixel(x, y, Rgba([255, 255, 255, 255]));
                continue;
            }
            let tint = heat_color(f64::from(heat[y as usize * n + x as usize]));
            let src = image.get_pixel(x, y).0;
            let px = std::array::from_fn(|k| {
                if k == 3 {
                    255
                } else {
                    ((1.0 - OVERLAY_ALPHA) * f64::from(src[k]) + OVERLAY_ALPHA * f64::from(tint[k])).round() as u8
                }
            });
            out.put_pixel(x, y, Rgba(px));
        }
    }
    Ok(out)
}

/// On-disk explanation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationExport {
    pub grid_size: u32,
    pub cell_px: u32,
    pub base_confidence: f64,
    pub cell_deltas: Vec<f64>,
    pub mass_fraction: f64,
    pub factors: Vec<FactorExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorExport {
    pub cells: Vec<Cell>,
    pub heatmap_png_path: Option<String>,
    pub bbox: Option<Rect>,
    pub importance: f64,
    #[serde(default)]
    pub subcells: Vec<SubcellHeat>,
}

impl ExplanationExport {
    pub fn from_explanation(e: &Explanation, heatmap_paths: &[Option<String>]) -> Self {
        ExplanationExport {
            grid_size: e.importance.grid_size,
            cell_px: e.importance.cell_px,
            base_confidence: e.importance.base_confidence.value(),
            cell_deltas: e.importance.cell_deltas.clone(),
            mass_fraction: e.mass_fraction,
            factors: e
                .factors
                .iter()
                .enumerate()
                .map(|(i, f)| FactorExport {
                    cells: f.cells.clone(),
                    heatmap_png_path: heatmap_paths.get(i).cloned().flatten(),
                    bbox: f.bbox(),
                    importance: f.importance,
                    subcells: f.heatmap.clone().unwrap_or_default(),
                })
                .collect(),
        }
    }

    pub fn to_explanation(&self) -> Result<Explanation> {
        let map = ImportanceMap::new(
            self.grid_size,
            Confidence::new(self.base_confidence)?,
            self.cell_deltas.clone(),
        )?;
        Ok(Explanation {
            factors: self
                .factors
                .iter()
                .map(|f| CriticalFactor {
                    cells: f.cells.clone(),
                    cell_px: map.cell_px,
                    importance: f.importance,
                    heatmap: (!f.subcells.is_empty()).then(|| f.subcells.clone()),
                })
                .collect(),
            importance: map,
            mass_fraction: self.mass_fraction,
        })
    }
}

/// Writes `<stem>.json` and one `<stem>.factor<i>.png` heatmap per factor into `dir`.
/// Heatmap paths in the JSON are relative to `dir`.
pub fn export_explanation(e: &Explanation, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|err| Error::io(dir, err))?;
    let mut paths = Vec::new();
    for (i, f) in e.factors.iter().enumerate() {
        let name = format!("{stem}.factor{i}.png");
        let heat = f.heat_image();
        let img = GrayImage::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
            Luma([(heat[(y * IMAGE_SIZE + x) as usize] * 255.0).round() as u8])
        });
        img.save(dir.join(&name))?;
        paths.push(Some(name));
    }
    let doc = ExplanationExport::from_explanation(e, &paths);
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&doc)?).map_err(|err| Error::io(&path, err))?;
    Ok(path)
}

pub fn load_explanation(path: impl AsRef<Path>) -> Result<Explanation> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice::<ExplanationExport>(&bytes)?.to_explanation()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{ConstantScorer, ScorerFailure};
    use proptest::prelude::*;

    struct CellMean;

    /// Mean intensity of grid cell (3, 3) on the 16×16 grid.
    impl ScorerBackend for CellMean {
        fn score(&self, img: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
            let mut s = 0.0;
            for y in 48..64 {
                for x in 48..64 {
                    s += img.pixel(x, y).iter().map(|&v| f64::from(v)).sum::<f64>() / 3.0;
                }
            }
            Ok(Confidence::saturating(s / 256.0))
        }
    }

    struct Failing;

    impl ScorerBackend for Failing {
        fn score(&self, img: &NormalizedImage) -> Result<Confidence, ScorerFailure> {
            if img.pixel(0, 0) == [0.0; 3] {
                Err(ScorerFailure("nope".into()))
            } else {
                Ok(Confidence::saturating(0.5))
            }
        }
    }

    fn map_from(deltas: Vec<f64>) -> ImportanceMap {
        ImportanceMap::new(16, Confidence::saturating(0.9), deltas).unwrap()
    }

    fn textured() -> NormalizedImage {
        NormalizedImage::from_fn(|x, y| {
            let v = ((x * 31 + y * 17) % 97) as f32 / 97.0;
            [v, 1.0 - v, 0.5]
        })
    }

    #[test]
    fn constant_scorer_gives_zero_map() {
        let map = occlusion_importance(&textured(), &ConstantScorer(Confidence::saturating(0.7)), 16, Baseline::MeanColor)
            .unwrap();
        assert!(map.cell_deltas.iter().all(|&d| d == 0.0));
        assert!(extract_critical_factors(&map, 0.8).unwrap().is_empty());
    }

    #[test]
    fn single_cell_scorer_hand_evaluated() {
        let img = textured();
        let map = occlusion_importance(&img, &CellMean, 16, Baseline::Color([0.0; 3])).unwrap();
        let expected = CellMean.score(&img).unwrap().value();
        for row in 0..16 {
            for col in 0..16 {
                let d = map.delta((row, col));
                if (row, col) == (3, 3) {
                    assert!((d - expected).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn scorer_failure_names_cell() {
        let err = occlusion_importance(&textured(), &Failing, 16, Baseline::Color([0.0; 3])).unwrap_err();
        assert!(matches!(err, Error::Scorer { ref at, .. } if at == "cell (0, 0)"), "{err}");
    }

    #[test]
    fn grid_must_divide_image() {
        assert!(occlusion_importance(&textured(), &CellMean, 15, Baseline::MidGray).is_err());
    }

    #[test]
    fn single_positive_cell_factor() {
        let mut d = vec![0.0; 256];
        d[5 * 16 + 7] = 0.3;
        let f = extract_critical_factors(&map_from(d), 0.8).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].cells, vec![(5, 7)]);
    }

    #[test]
    fn greedy_needs_all_four_quarters() {
        let mut d = vec![0.0; 256];
        for i in [0, 2, 40, 200] {
            d[i] = 0.25;
        }
        let cells = select_cells(&map_from(d), 0.8).unwrap();
        assert_eq!(cells.len(), 4);
        // ties broken row-major
        assert_eq!(cells, vec![(0, 0), (0, 2), (2, 8), (12, 8)]);
    }

    #[test]
    fn all_zero_map_has_no_factors() {
        assert!(extract_critical_factors(&map_from(vec![0.0; 256]), 0.8).unwrap().is_empty());
        assert!(extract_critical_factors(&map_from(vec![-0.1; 256]), 0.8).unwrap().is_empty());
    }

    #[test]
    fn rho_validated() {
        assert!(select_cells(&map_from(vec![0.0; 256]), 0.0).is_err());
        assert!(select_cells(&map_from(vec![0.0; 256]), 1.5).is_err());
    }

    #[test]
    fn connected_cells_group() {
        let mut d = vec![0.0; 256];
        d[16 + 1] = 0.4;
        d[16 + 2] = 0.3;
        d[10 * 16 + 10] = 0.3;
        let f = extract_critical_factors(&map_from(d), 1.0).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].cells, vec![(1, 1), (1, 2)]);
        assert!((f[0].importance - 0.7).abs() < 1e-12);
    }

    #[test]
    fn heat_normalisation() {
        assert_eq!(normalize_heat(&[0.4, 0.1, 0.0, 0.1]), vec![1.0, 0.25, 0.0, 0.25]);
        assert_eq!(normalize_heat(&[0.2; 4]), vec![1.0; 4]);
        assert_eq!(normalize_heat(&[-0.1, 0.0]), vec![1.0; 2]);
        assert_eq!(normalize_heat(&[0.5, -0.5]), vec![1.0, 0.0]);
    }

    #[test]
    fn refine_uniform_drops_give_constant_heat() {
        let img = textured();
        let mut d = vec![0.0; 256];
        d[3 * 16 + 3] = 0.5;
        let map = map_from(d);
        let factors = extract_critical_factors(&map, 0.8).unwrap();
        // input-independent scorer: every sub-drop equal
        let e = refine_within_factors(&img, &ConstantScorer(Confidence::saturating(0.9)), map, factors, 4, Baseline::MidGray)
            .unwrap();
        let subs = e.factors[0].heatmap.as_ref().unwrap();
        assert_eq!(subs.len(), 16);
        assert!(subs.iter().all(|s| s.heat == 1.0));
        assert_eq!(e.factors[0].mask().count(), 256);
        assert_eq!(e.mass_fraction, 1.0);
    }

    #[test]
    fn refine_localises_within_cell() {
        let img = textured();
        let map = occlusion_importance(&img, &CellMean, 16, Baseline::Color([0.0; 3])).unwrap();
        let factors = extract_critical_factors(&map, 0.8).unwrap();
        let e = refine_within_factors(&img, &CellMean, map, factors, 2, Baseline::Color([0.0; 3])).unwrap();
        assert_eq!(e.factors.len(), 1);
        let subs = e.factors[0].heatmap.as_ref().unwrap();
        assert_eq!(subs.len(), 4);
        let max = subs.iter().map(|s| s.heat).fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert!(subs.iter().all(|s| (0.0..=1.0).contains(&s.heat)));
        assert!(refine_within_factors(&img, &CellMean, e.importance.clone(), vec![], 3, Baseline::MidGray).is_err());
    }

    #[test]
    fn deletion_definitions() {
        let img = textured();
        assert_eq!(deletion_score(&img, &CellMean, &Mask::new(256, 256), Baseline::MidGray).unwrap(), 0.0);
        let full = deletion_score(&img, &CellMean, &Mask::full(256, 256), Baseline::MidGray).unwrap();
        let expected = CellMean.score(&img).unwrap().value() - CellMean.score(&NormalizedImage::filled([0.5; 3])).unwrap().value();
        assert!((full - expected).abs() < 1e-12);
    }

    #[test]
    fn random_mask_matches_area() {
        let mut like = Mask::new(256, 256);
        like.fill_rect(Rect::new(0, 0, 16, 8));
        let r = random_equal_area_mask(&like, 4, 3);
        assert_eq!(r.count(), like.count());
        assert_ne!(r, random_equal_area_mask(&like, 4, 4));
    }

    fn rect_explanation(rect: Rect, heat: f64) -> Explanation {
        Explanation {
            importance: map_from(vec![0.0; 256]),
            factors: vec![CriticalFactor {
                cells: vec![(rect.y0 / 16, rect.x0 / 16)],
                cell_px: 16,
                importance: 0.0,
                heatmap: Some(vec![SubcellHeat { rect, delta: heat, heat }]),
            }],
            mass_fraction: 1.0,
        }
    }

    #[test]
    fn overlay_outline_and_tint() {
        let img = RgbImage::from_fn(256, 256, |x, y| image::Rgb([(x % 200) as u8, (y % 200) as u8, 40]));
        let rect = Rect::new(32, 48, 64, 72);
        let out = render_overlay(&img, &rect_explanation(rect, 1.0)).unwrap();
        let red = heat_color(1.0);
        for y in 0..256 {
            for x in 0..256 {
                let inside = x >= rect.x0 && x < rect.x1 && y >= rect.y0 && y < rect.y1;
                let edge = inside && (x == rect.x0 || x == rect.x1 - 1 || y == rect.y0 || y == rect.y1 - 1);
                let px = out.get_pixel(x, y).0;
                let src = img.get_pixel(x, y).0;
                assert_eq!(px[3], 255);
                if edge {
                    assert_eq!(px, [255, 255, 255, 255]);
                } else if inside {
                    for k in 0..3 {
                        let want = (0.5 * f64::from(src[k]) + 0.5 * f64::from(red[k])).round() as u8;
                        assert_eq!(px[k], want);
                    }
                } else {
                    assert_eq!(&px[..3], &src[..]);
                }
            }
        }
    }

    #[test]
    fn overlay_without_factors_is_copy() {
        let img = RgbImage::from_fn(256, 256, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let mut e = rect_explanation(Rect::new(0, 0, 4, 4), 1.0);
        e.factors.clear();
        let out = render_overlay(&img, &e).unwrap();
        assert!(out.pixels().zip(img.pixels()).all(|(o, i)| o.0[..3] == i.0[..] && o.0[3] == 255));
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let e = rect_explanation(Rect::new(16, 16, 20, 20), 1.0);
        let path = export_explanation(&e, dir.path(), "case").unwrap();
        assert!(dir.path().join("case.factor0.png").exists());
        let back = load_explanation(&path).unwrap();
        assert_eq!(back, e);
        let v: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        for key in ["grid_size", "cell_px", "base_confidence", "cell_deltas", "factors"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert!(v["factors"][0].get("heatmap_png_path").is_some());
        assert!(v["factors"][0].get("bbox").is_some());
    }

    fn arb_map() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-0.2..1.0f64, 256)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn selection_covers_rho(d in arb_map(), rho in 0.05..=1.0f64) {
            let map = map_from(d);
            let cells = select_cells(&map, rho).unwrap();
            let covered: f64 = cells.iter().map(|&c| map.delta(c)).sum();
            prop_assert!(cells.iter().all(|&c| map.delta(c) > 0.0));
            prop_assert!(covered >= rho * map.positive_total() - 1e-12);
        }

        #[test]
        fn selection_is_minimal(d in arb_map(), rho in 0.05..=1.0f64) {
            let map = map_from(d);
            let cells = select_cells(&map, rho).unwrap();
            let covered: f64 = cells.iter().map(|&c| map.delta(c)).sum();
            let smallest = cells.iter().map(|&c| map.delta(c)).fold(f64::INFINITY, f64::min);
            let target = rho * map.positive_total();
            if !cells.is_empty() && (covered - target).abs() > 1e-12 {
                prop_assert!(covered - smallest < target);
            }
        }

        #[test]
        fn factors_disjoint_and_connected(d in arb_map(), rho in 0.05..=1.0f64) {
            let map = map_from(d);
            let factors = extract_critical_factors(&map, rho).unwrap();
            let mut all = BTreeSet::new();
            for f in &factors {
                prop_assert!(!f.cells.is_empty());
                for &c in &f.cells {
                    prop_assert!(all.insert(c));
                }
                // every cell reachable from the first through 4-neighbours inside the factor
                let set: BTreeSet<Cell> = f.cells.iter().copied().collect();
                let mut seen = BTreeSet::from([f.cells[0]]);
                let mut stack = vec![f.cells[0]];
                while let Some((r, c)) = stack.pop() {
                    for nb in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                        if set.contains(&nb) && seen.insert(nb) {
                            stack.push(nb);
                        }
                    }
                }
                prop_assert_eq!(seen.len(), f.cells.len());
            }
        }

        #[test]
        fn heat_in_unit_range(d in prop::collection::vec(-1.0..1.0f64, 1..64)) {
            let h = normalize_heat(&d);
            prop_assert!(h.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(h.iter().copied().fold(0.0, f64::max), 1.0);
        }
    }
}
