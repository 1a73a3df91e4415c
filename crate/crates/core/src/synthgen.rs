//! Procedural solder-joint images with ground-truth defect masks, dataset
//! manifests and class-stratified splits.
//!
//! A joint is rendered in two stages. The base stage (board, copper pad,
//! solder dome) depends only on `seed`, `pad_radius_px` and `board_hue`; the
//! defect stage then overwrites a set of pixels and records exactly that set
//! in the mask. A defective image therefore differs from its `kind = none`
//! twin only inside its mask.

use std::collections::HashSet;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;
use crate::mask::Mask;

pub const JOINT_SIZE: u32 = 256;
pub const PAD_RADIUS_RANGE: (u32, u32) = (40, 90);
/// Solder dome radius as a fraction of the pad radius.
pub const SOLDER_FRACTION: f64 = 0.68;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    None,
    Splash,
    Crack,
    PoorWetting,
    Fiber,
    Burn,
    Disturbed,
}

impl DefectKind {
    pub const DEFECTS: [DefectKind; 6] = [
        DefectKind::Splash,
        DefectKind::Crack,
        DefectKind::PoorWetting,
        DefectKind::Fiber,
        DefectKind::Burn,
        DefectKind::Disturbed,
    ];

    pub fn label(self) -> Label {
        if self == DefectKind::None {
            Label::NonDefective
        } else {
            Label::Defective
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DefectKind::None => "none",
            DefectKind::Splash => "splash",
            DefectKind::Crack => "crack",
            DefectKind::PoorWetting => "poor_wetting",
            DefectKind::Fiber => "fiber",
            DefectKind::Burn => "burn",
            DefectKind::Disturbed => "disturbed",
        }
    }

    fn salt(self) -> u64 {
        match self {
            DefectKind::None => 0,
            DefectKind::Splash => 0x51a5,
            DefectKind::Crack => 0xc4ac,
            DefectKind::PoorWetting => 0x7e77,
            DefectKind::Fiber => 0xf1be,
            DefectKind::Burn => 0xb0b0,
            DefectKind::Disturbed => 0xd157,
        }
    }
}

impl fmt::Display for DefectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DefectKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(DefectKind::None)
            .chain(DefectKind::DEFECTS)
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown defect kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub seed: u64,
    pub kind: DefectKind,
    pub pad_radius_px: u32,
    pub board_hue: f64,
}

impl JointSpec {
    pub fn new(seed: u64, kind: DefectKind) -> Self {
        JointSpec {
            seed,
            kind,
            pad_radius_px: 60,
            board_hue: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = PAD_RADIUS_RANGE;
        if !(lo..=hi).contains(&self.pad_radius_px) {
            return Err(Error::param(format!(
                "pad_radius_px {} outside [{lo}, {hi}]",
                self.pad_radius_px
            )));
        }
        if !(0.0..=1.0).contains(&self.board_hue) {
            return Err(Error::param(format!("board_hue {} outside [0, 1]", self.board_hue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub label: Label,
    pub defect_mask: Mask,
    pub kind: DefectKind,
}

/// Where the renderer placed the joint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointGeometry {
    pub center: (f64, f64),
    pub pad_radius: f64,
    pub solder_radius: f64,
}

impl JointGeometry {
    /// True when the pixel lies on the pad disc `(x−cx)² + (y−cy)² ≤ r²`.
    pub fn on_pad(&self, x: u32, y: u32) -> bool {
        let (dx, dy) = (x as f64 - self.center.0, y as f64 - self.center.1);
        dx * dx + dy * dy <= self.pad_radius * self.pad_radius
    }

    pub fn in_solder(&self, x: u32, y: u32) -> bool {
        let (dx, dy) = (x as f64 - self.center.0, y as f64 - self.center.1);
        dx * dx + dy * dy < self.solder_radius * self.solder_radius
    }

    fn polar(&self, x: u32, y: u32) -> (f64, f64) {
        let (dx, dy) = (x as f64 - self.center.0, y as f64 - self.center.1);
        (dx.hypot(dy), dy.atan2(dx))
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedJoint {
    pub image: RgbImage,
    pub truth: GroundTruth,
    pub geometry: JointGeometry,
}

/// Renders one joint. Identical specs give bit-identical images and masks.
pub fn generate_joint(spec: &JointSpec) -> Result<GeneratedJoint> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = f64::from(spec.pad_radius_px);
    let jitter = 12.0;
    let geometry = JointGeometry {
        center: (
            127.5 + rng.random_range(-jitter..=jitter),
            127.5 + rng.random_range(-jitter..=jitter),
        ),
        pad_radius: r,
        solder_radius: SOLDER_FRACTION * r,
    };
    let board = board_color(spec.board_hue);
    let mut image = RgbImage::new(JOINT_SIZE, JOINT_SIZE);
    for y in 0..JOINT_SIZE {
        for x in 0..JOINT_SIZE {
            let (d, _) = geometry.polar(x, y);
            let c = if d < geometry.solder_radius {
                solder_color(spec.seed, x, y, d / geometry.solder_radius)
            } else if d * d <= r * r {
                copper_color(spec.seed, x, y)
            } else {
                board_texture(spec.seed, x, y, board)
            };
            put(&mut image, x, y, c);
        }
    }

    let mut mask = Mask::new(JOINT_SIZE, JOINT_SIZE);
    if spec.kind != DefectKind::None {
        // separate stream so the base render is independent of the kind
        let mut drng = ChaCha8Rng::seed_from_u64(spec.seed ^ spec.kind.salt().wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let ctx = DefectCtx {
            seed: spec.seed,
            geometry,
        };
        match spec.kind {
            DefectKind::None => unreachable!(),
            DefectKind::Splash => ctx.splash(&mut image, &mut mask, &mut drng),
            DefectKind::Crack => ctx.crack(&mut image, &mut mask, &mut drng),
            DefectKind::PoorWetting => ctx.poor_wetting(&mut image, &mut mask, &mut drng),
            DefectKind::Fiber => ctx.fiber(&mut image, &mut mask, &mut drng),
            DefectKind::Burn => ctx.burn(&mut image, &mut mask, &mut drng),
            DefectKind::Disturbed => ctx.disturbed(&mut image, &mut mask, &mut drng),
        }
        debug_assert!(!mask.is_empty(), "{:?} produced an empty mask", spec.kind);
    }

    Ok(GeneratedJoint {
        image,
        truth: GroundTruth {
            label: spec.kind.label(),
            defect_mask: mask,
            kind: spec.kind,
        },
        geometry,
    })
}

/// Paints a solder-coloured disc at `(cx, cy)` and marks it in `mask`.
pub fn paint_splash(image: &mut RgbImage, mask: &mut Mask, cx: f64, cy: f64, radius: f64) {
    for_disc(cx, cy, radius, |x, y, d| {
        let c = solder_color(0x5eed, x, y, d / radius);
        put(image, x, y, c);
        mask.set(x, y, true);
    });
}

fn for_disc(cx: f64, cy: f64, radius: f64, mut f: impl FnMut(u32, u32, f64)) {
    let x0 = (cx - radius).floor().max(0.0) as u32;
    let y0 = (cy - radius).floor().max(0.0) as u32;
    let x1 = ((cx + radius).ceil() as u32).min(JOINT_SIZE - 1);
    let y1 = ((cy + radius).ceil() as u32).min(JOINT_SIZE - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let d = (x as f64 - cx).hypot(y as f64 - cy);
            if d < radius {
                f(x, y, d);
            }
        }
    }
}

struct DefectCtx {
    seed: u64,
    geometry: JointGeometry,
}

impl DefectCtx {
    fn splash(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let radius = rng.random_range(6.0..12.0);
        let gap = rng.random_range(8.0..20.0);
        let mut angle = rng.random_range(0.0..TAU);
        let margin = radius + 2.0;
        let lim = JOINT_SIZE as f64 - 1.0 - margin;
        let dist = g.pad_radius + radius + gap;
        // walk around the pad until the splash fits on the board
        let mut placed = None;
        for _ in 0..72 {
            let (cx, cy) = (g.center.0 + dist * angle.cos(), g.center.1 + dist * angle.sin());
            if (margin..=lim).contains(&cx) && (margin..=lim).contains(&cy) {
                placed = Some((cx, cy));
                break;
            }
            angle += TAU / 72.0;
        }
        // a 90 px pad always leaves a corner free for a 12 px splash
        let (cx, cy) = placed.unwrap_or_else(|| {
            let corner = |c: f64| if c > 127.5 { margin } else { lim };
            (corner(g.center.0), corner(g.center.1))
        });
        paint_splash(img, mask, cx, cy, radius);
    }

    fn crack(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let rs = g.solder_radius;
        let a = rng.random_range(0.0..TAU);
        let b = a + PI + rng.random_range(-0.5..0.5);
        let ra = rng.random_range(0.55..0.85) * rs;
        let rb = rng.random_range(0.55..0.85) * rs;
        let start = (g.center.0 + ra * a.cos(), g.center.1 + ra * a.sin());
        let end = (g.center.0 + rb * b.cos(), g.center.1 + rb * b.sin());
        let (nx, ny) = (-(end.1 - start.1), end.0 - start.0);
        let nlen = nx.hypot(ny).max(1e-9);
        let mut pts = vec![start];
        for t in [1.0 / 3.0, 2.0 / 3.0] {
            let off = rng.random_range(-0.12..0.12) * rs;
            pts.push((
                start.0 + (end.0 - start.0) * t + off * nx / nlen,
                start.1 + (end.1 - start.1) * t + off * ny / nlen,
            ));
        }
        pts.push(end);
        let half = rng.random_range(2.0..=4.0) / 2.0;
        for y in 0..JOINT_SIZE {
            for x in 0..JOINT_SIZE {
                let (d, _) = g.polar(x, y);
                if d >= rs - 1.0 {
                    continue;
                }
                let p = (x as f64, y as f64);
                let near = pts.windows(2).any(|w| seg_dist(p, w[0], w[1]) <= half);
                if near {
                    let n = 0.01 * noise(self.seed ^ 0xc4ac, x, y);
                    put(img, x, y, [0.08 + n, 0.07 + n, 0.06 + n]);
                    mask.set(x, y, true);
                }
            }
        }
    }

    fn poor_wetting(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let theta0 = rng.random_range(0.0..TAU);
        let half_width = rng.random_range(0.6..1.4);
        let depth = rng.random_range(0.25..0.40) * g.pad_radius;
        for y in 0..JOINT_SIZE {
            for x in 0..JOINT_SIZE {
                let (d, theta) = g.polar(x, y);
                if d >= g.solder_radius {
                    continue;
                }
                let delta = wrap_angle(theta - theta0);
                if delta.abs() >= half_width {
                    continue;
                }
                let erosion = depth * (1.0 - (delta / half_width).powi(2));
                if d > g.solder_radius - erosion {
                    put(img, x, y, copper_color(self.seed, x, y));
                    mask.set(x, y, true);
                }
            }
        }
    }

    fn fiber(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let a = rng.random_range(0.0..TAU);
        let d0 = rng.random_range(0.2..1.0) * g.pad_radius;
        let p0 = (g.center.0 + d0 * a.cos(), g.center.1 + d0 * a.sin());
        let dir = rng.random_range(0.0..TAU);
        let len = rng.random_range(60.0..110.0);
        let p2 = (p0.0 + len * dir.cos(), p0.1 + len * dir.sin());
        let bend = rng.random_range(-30.0..30.0);
        let p1 = (
            (p0.0 + p2.0) / 2.0 - bend * dir.sin(),
            (p0.1 + p2.1) / 2.0 + bend * dir.cos(),
        );
        let wide = rng.random_bool(0.5);
        let steps = (len * 6.0) as usize;
        let color = [0.97, 0.96, 0.90];
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let u = 1.0 - t;
            let x = u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0;
            let y = u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1;
            // tangent decides which way the second pixel of a 2 px fibre goes
            let tx = 2.0 * u * (p1.0 - p0.0) + 2.0 * t * (p2.0 - p1.0);
            let ty = 2.0 * u * (p1.1 - p0.1) + 2.0 * t * (p2.1 - p1.1);
            let (px, py) = (x.round(), y.round());
            let mut stamp = vec![(px, py)];
            if wide {
                if tx.abs() > ty.abs() {
                    stamp.push((px, py + 1.0));
                } else {
                    stamp.push((px + 1.0, py));
                }
            }
            for (sx, sy) in stamp {
                if sx >= 0.0 && sy >= 0.0 && sx < JOINT_SIZE as f64 && sy < JOINT_SIZE as f64 {
                    put(img, sx as u32, sy as u32, color);
                    mask.set(sx as u32, sy as u32, true);
                }
            }
        }
    }

    fn burn(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let a = rng.random_range(0.0..TAU);
        let dist = rng.random_range(0.75..1.1) * g.pad_radius;
        let (cx, cy) = (g.center.0 + dist * a.cos(), g.center.1 + dist * a.sin());
        let (ra, rb): (f64, f64) = (rng.random_range(8.0..16.0), rng.random_range(8.0..16.0));
        let rot = rng.random_range(0.0..PI);
        let phase = rng.random_range(0.0..TAU);
        let (s, c) = rot.sin_cos();
        for_disc(cx, cy, ra.max(rb) * 1.2, |x, y, _| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
            let phi = v.atan2(u);
            let e = (u / ra).powi(2) + (v / rb).powi(2);
            if e <= 1.0 + 0.15 * (5.0 * phi + phase).sin() {
                let n = 0.01 * noise(self.seed ^ 0xb0b0, x, y);
                put(img, x, y, [0.11 + n, 0.10 + n, 0.09 + n]);
                mask.set(x, y, true);
            }
        });
    }

    fn disturbed(&self, img: &mut RgbImage, mask: &mut Mask, rng: &mut ChaCha8Rng) {
        let g = &self.geometry;
        let rs = g.solder_radius;
        let a = rng.random_range(0.0..TAU);
        let off = rng.random_range(0.0..0.35) * rs;
        let (cx, cy) = (g.center.0 + off * a.cos(), g.center.1 + off * a.sin());
        let radius = rng.random_range(0.45..0.6) * rs;
        let phi = rng.random_range(0.0..PI);
        let period = rng.random_range(4.0..6.0);
        let (s, c) = phi.sin_cos();
        for_disc(cx, cy, radius, |x, y, _| {
            if !g.in_solder(x, y) {
                return;
            }
            let (d, _) = g.polar(x, y);
            let base = solder_color(self.seed, x, y, d / rs);
            let wave = 1.0 + 0.22 * (TAU * (x as f64 * c + y as f64 * s) / period).sin();
            put(img, x, y, base.map(|v| v * wave as f32));
            mask.set(x, y, true);
        });
    }
}

fn seg_dist(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - (a.0 + t * vx)).hypot(p.1 - (a.1 + t * vy))
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(TAU) - PI
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-pixel hash noise in `[-1, 1]`.
fn noise(seed: u64, x: u32, y: u32) -> f32 {
    let h = splitmix(seed ^ splitmix((u64::from(x) << 32) | u64::from(y)));
    (h >> 40) as f32 / (1u64 << 23) as f32 - 1.0
}

/// Bilinearly interpolated lattice noise with `cell`-pixel spacing, in `[-1, 1]`.
fn smooth_noise(seed: u64, x: u32, y: u32, cell: u32) -> f32 {
    let (gx, gy) = (x / cell, y / cell);
    let (tx, ty) = (
        (x % cell) as f32 / cell as f32,
        (y % cell) as f32 / cell as f32,
    );
    let n = |i: u32, j: u32| noise(seed ^ 0x5300, i, j);
    let top = n(gx, gy) * (1.0 - tx) + n(gx + 1, gy) * tx;
    let bot = n(gx, gy + 1) * (1.0 - tx) + n(gx + 1, gy + 1) * tx;
    top * (1.0 - ty) + bot * ty
}

/// Board hue maps onto the green-to-blue band typical of solder masks.
fn board_color(hue: f64) -> [f32; 3] {
    let h = (90.0 + 140.0 * hue) / 60.0;
    let (s, v) = (0.55, 0.40);
    let c = v * s;
    let xx = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as u32 {
        1 => (xx, c, 0.0),
        2 => (0.0, c, xx),
        3 => (0.0, xx, c),
        _ => (c, xx, 0.0),
    };
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

fn board_texture(seed: u64, x: u32, y: u32, base: [f32; 3]) -> [f32; 3] {
    let t = 0.03 * smooth_noise(seed, x, y, 16) + 0.012 * noise(seed, x, y);
    base.map(|v| v + t)
}

fn copper_color(seed: u64, x: u32, y: u32) -> [f32; 3] {
    let t = 1.0 + 0.04 * smooth_noise(seed ^ 0xc0, x, y, 12);
    let n = 0.01 * noise(seed ^ 0xc1, x, y);
    [0.82 * t + n, 0.52 * t + n, 0.26 * t + n]
}

/// Silver dome shading; `rel` is the distance from the dome centre over its radius.
fn solder_color(seed: u64, x: u32, y: u32, rel: f64) -> [f32; 3] {
    let h = (1.0 - rel.clamp(0.0, 1.0).powi(2)).sqrt() as f32;
    let l = 0.55 + 0.23 * h + 0.008 * noise(seed ^ 0x50, x, y);
    [0.97 * l, 0.98 * l, l]
}

fn put(img: &mut RgbImage, x: u32, y: u32, c: [f32; 3]) {
    img.put_pixel(x, y, image::Rgb(c.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)));
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::param(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub label: Label,
    pub kind: DefectKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Dataset entries; relative paths resolve against `root`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, root: impl Into<PathBuf>) -> Result<Self> {
        let m = DatasetManifest {
            entries,
            root: root.into(),
        };
        m.check_unique_ids()?;
        Ok(m)
    }

    fn check_unique_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid(format!("duplicate manifest id '{}'", e.id)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn get(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    /// Reads a line-delimited JSON manifest; blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| {
                Error::invalid(format!("{}:{}: {e}", path.display(), i + 1))
            })?;
            entries.push(entry);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        DatasetManifest::new(entries, root)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn count(&self, label: Label, split: Option<Split>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.label == label && (split.is_none() || e.split == split))
            .count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n: usize,
    pub defect_ratio: f64,
    /// Relative sampling weight per defect kind.
    pub kind_weights: Vec<(DefectKind, f64)>,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn uniform(n: usize, defect_ratio: f64, seed: u64) -> Self {
        DatasetConfig {
            n,
            defect_ratio,
            kind_weights: DefectKind::DEFECTS.iter().map(|&k| (k, 1.0)).collect(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedJoint {
    pub id: String,
    pub spec: JointSpec,
}

/// Decides ids, labels, kinds and render specs without touching the disk.
pub fn plan_dataset(cfg: &DatasetConfig) -> Result<Vec<PlannedJoint>> {
    if cfg.n == 0 {
        return Err(Error::param("dataset size must be at least 1"));
    }
    if !(0.0..=1.0).contains(&cfg.defect_ratio) {
        return Err(Error::param(format!("defect_ratio {} outside [0, 1]", cfg.defect_ratio)));
    }
    let n_defective = (cfg.n as f64 * cfg.defect_ratio).round() as usize;
    let weights: Vec<(DefectKind, f64)> = cfg
        .kind_weights
        .iter()
        .copied()
        .filter(|&(k, w)| k != DefectKind::None && w > 0.0)
        .collect();
    if n_defective > 0 && weights.is_empty() {
        return Err(Error::param("defect_ratio > 0 needs a non-empty defect kind weight table"));
    }
    if let Some((k, w)) = cfg.kind_weights.iter().find(|(_, w)| !w.is_finite() || *w < 0.0) {
        return Err(Error::param(format!("weight {w} for {k} must be finite and non-negative")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.shuffle(&mut rng);
    let mut defective = vec![false; cfg.n];
    for &i in &order[..n_defective] {
        defective[i] = true;
    }
    let dist = if weights.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(weights.iter().map(|(_, w)| *w)).map_err(|e| Error::param(e.to_string()))?)
    };
    let (lo, hi) = PAD_RADIUS_RANGE;
    Ok((0..cfg.n)
        .map(|i| {
            let kind = match (&dist, defective[i]) {
                (Some(d), true) => weights[d.sample(&mut rng)].0,
                _ => DefectKind::None,
            };
            PlannedJoint {
                id: format!("joint-{i:05}"),
                spec: JointSpec {
                    seed: rng.random(),
                    kind,
                    pad_radius_px: rng.random_range(lo..=hi),
                    board_hue: rng.random_range(0.0..=1.0),
                },
            }
        })
        .collect())
}

/// Renders a dataset into `out_dir` (`images/`, `masks/`, `manifest.jsonl`).
pub fn generate_dataset(cfg: &DatasetConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let plan = plan_dataset(cfg)?;
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let entries = plan
        .par_iter()
        .map(|p| -> Result<ManifestEntry> {
            let joint = generate_joint(&p.spec)?;
            let image_path = format!("images/{}.png", p.id);
            let mask_path = format!("masks/{}.png", p.id);
            joint.image.save(out_dir.join(&image_path))?;
            joint.truth.defect_mask.to_gray_image().save(out_dir.join(&mask_path))?;
            Ok(ManifestEntry {
                id: p.id.clone(),
                image_path,
                mask_path,
                label: joint.truth.label,
                kind: p.spec.kind,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(entries, out_dir)?;
    manifest.save(out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Assigns train/val/test within each class.
///
/// Each split first gets `floor(fraction · n_class)` samples; the few left
/// over go one each to train, then val, then test, so every count stays
/// within one sample of its exact share. Classes with fewer than three
/// samples go entirely to train with a warning.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitOutcome> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::param(format!("split fractions {fr:?} must lie in [0, 1]")));
    }
    if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param(format!("split fractions {fr:?} must sum to 1")));
    }
    let mut out = manifest.clone();
    let mut warnings = Vec::new();
    for label in Label::ALL {
        let mut idx: Vec<usize> = out
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect();
        let n = idx.len();
        if n == 0 {
            continue;
        }
        if n < 3 {
            warnings.push(format!("class {label} has only {n} samples; all assigned to train"));
            for &i in &idx {
                out.entries[i].split = Some(Split::Train);
            }
            continue;
        }
        let mut counts = split_counts(n, fr);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (label.index() as u64 + 1).wrapping_mul(0xa076_1d64_78bd_642f));
        idx.shuffle(&mut rng);
        let mut it = idx.into_iter();
        for (split, count) in [Split::Train, Split::Val, Split::Test].into_iter().zip(counts.iter_mut()) {
            for i in it.by_ref().take(*count) {
                out.entries[i].split = Some(split);
            }
        }
    }
    Ok(SplitOutcome {
        manifest: out,
        warnings,
    })
}

/// Per-split counts for a class of `n` samples.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let mut counts = fractions.map(|f| (f * n as f64 + 1e-9).floor() as usize);
    let mut rest = n - counts.iter().sum::<usize>();
    for c in counts.iter_mut() {
        if rest == 0 {
            break;
        }
        *c += 1;
        rest -= 1;
    }
    counts[0] += rest;
    counts
}
