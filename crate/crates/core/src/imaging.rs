//! Preprocessing and training-time augmentation.
//!
//! Every image entering the scorer is stretched to 256×256 with bilinear
//! interpolation and mapped to `[0, 1]` by dividing by 255. Augmentation
//! applies six independent, seeded ops on top of that normalized image.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every normalized image.
pub const IMAGE_SIZE: u32 = 256;

const N: usize = IMAGE_SIZE as usize;

/// A 256×256×3 image with every value in `[0, 1]`, stored row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    data: Vec<f32>,
}

impl NormalizedImage {
    /// Wraps raw interleaved RGB data, rejecting wrong lengths and out-of-range values.
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.len() != N * N * 3 {
            return Err(Error::param(format!(
                "normalized image needs {} values, got {}",
                N * N * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(NormalizedImage { data })
    }

    pub fn filled(color: [f32; 3]) -> Self {
        let c = color.map(|v| v.clamp(0.0, 1.0));
        let mut data = Vec::with_capacity(N * N * 3);
        for _ in 0..N * N {
            data.extend_from_slice(&c);
        }
        NormalizedImage { data }
    }

    /// Builds an image from a per-pixel function; results are clamped to `[0, 1]`.
    pub fn from_fn(mut f: impl FnMut(u32, u32) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(N * N * 3);
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                data.extend(f(x, y).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        NormalizedImage { data }
    }

    /// Exact `value / 255` conversion of a 256×256 8-bit image.
    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        if img.dimensions() != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(Error::param(format!(
                "expected {IMAGE_SIZE}×{IMAGE_SIZE} image, got {}×{}",
                img.width(),
                img.height()
            )));
        }
        let data = img.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
        Ok(NormalizedImage { data })
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        RgbImage::from_raw(IMAGE_SIZE, IMAGE_SIZE, raw).expect("buffer length matches dimensions")
    }

    pub fn size(&self) -> u32 {
        IMAGE_SIZE
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = (y as usize * N + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = (y as usize * N + x as usize) * 3;
        for c in 0..3 {
            self.data[i + c] = rgb[c].clamp(0.0, 1.0);
        }
    }

    /// Fills the rectangle `x0..x1` × `y0..y1` (clipped) with a constant colour.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [f32; 3]) {
        for y in y0..y1.min(IMAGE_SIZE) {
            for x in x0..x1.min(IMAGE_SIZE) {
                self.set_pixel(x, y, rgb);
            }
        }
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Per-channel mean colour.
    pub fn mean_color(&self) -> [f32; 3] {
        let mut sum = [0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += f64::from(px[c]);
            }
        }
        sum.map(|s| (s / (N * N) as f64) as f32)
    }

    /// Mean over all values of all channels.
    pub fn mean_value(&self) -> f32 {
        (self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64) as f32
    }

    /// Rec. 601 luma of a pixel.
    #[inline]
    pub fn luma(&self, x: u32, y: u32) -> f32 {
        let [r, g, b] = self.pixel(x, y);
        luma(r, g, b)
    }
}

#[inline]
pub fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Stretches `image` to 256×256 (aspect ratio not preserved) and divides by 255.
pub fn preprocess(image: &RgbImage) -> Result<NormalizedImage> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::param(format!("image has a zero dimension ({w}×{h})")));
    }
    if w < 8 || h < 8 {
        return Err(Error::param(format!("image {w}×{h} is smaller than 8×8")));
    }
    let src: Vec<f32> = image.as_raw().iter().map(|&v| f32::from(v) / 255.0).collect();
    let sx = w as f32 / IMAGE_SIZE as f32;
    let sy = h as f32 / IMAGE_SIZE as f32;
    let at = |x: u32, y: u32, c: usize| src[(y as usize * w as usize + x as usize) * 3 + c];
    Ok(NormalizedImage::from_fn(|x, y| {
        // half-pixel centres
        let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
        let mut out = [0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let top = at(x0, y0, c) * (1.0 - tx) + at(x1, y0, c) * tx;
            let bot = at(x0, y1, c) * (1.0 - tx) + at(x1, y1, c) * tx;
            *o = top * (1.0 - ty) + bot * ty;
        }
        out
    }))
}

/// Which augmentation ops are enabled and their ranges. `None` disables an op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Rotation angle range in degrees, sampled uniformly.
    pub rotation_deg: Option<(f32, f32)>,
    pub hflip: bool,
    pub vflip: bool,
    /// Maximum shift per axis as a fraction of the side length.
    pub translate_frac: Option<f32>,
    /// Additive brightness offset bound.
    pub brightness_jitter: Option<f32>,
    /// Contrast factor is sampled in `[1 - c, 1 + c]`.
    pub contrast_jitter: Option<f32>,
    pub per_op_probability: f32,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            rotation_deg: Some((0.0, 45.0)),
            hflip: true,
            vflip: true,
            translate_frac: Some(0.10),
            brightness_jitter: Some(0.20),
            contrast_jitter: Some(0.20),
            per_op_probability: 0.5,
        }
    }
}

impl AugmentPolicy {
    /// Every op disabled.
    pub fn none() -> Self {
        AugmentPolicy {
            rotation_deg: None,
            hflip: false,
            vflip: false,
            translate_frac: None,
            brightness_jitter: None,
            contrast_jitter: None,
            per_op_probability: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.per_op_probability) {
            return Err(Error::param(format!(
                "per_op_probability {} outside [0, 1]",
                self.per_op_probability
            )));
        }
        if let Some((lo, hi)) = self.rotation_deg {
            if lo > hi || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::param(format!("bad rotation range [{lo}, {hi}]")));
            }
        }
        for (name, v) in [
            ("translate_frac", self.translate_frac),
            ("brightness_jitter", self.brightness_jitter),
            ("contrast_jitter", self.contrast_jitter),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::param(format!("{name} {v} outside [0, 1]")));
                }
            }
        }
        Ok(())
    }
}

/// Applies the policy's ops in a fixed order (rotation, hflip, vflip,
/// translation, brightness, contrast), each with probability
/// `per_op_probability`. Deterministic in `seed`; output clamped to `[0, 1]`.
pub fn augment(image: &NormalizedImage, policy: &AugmentPolicy, seed: u64) -> NormalizedImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = f64::from(policy.per_op_probability.clamp(0.0, 1.0));
    let mut img = image.clone();

    // Every enabled op consumes the same draws whether or not it fires, so
    // toggling one op never reshuffles another op's parameters.
    if let Some((lo, hi)) = policy.rotation_deg {
        let fire = rng.random_bool(p);
        let angle = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        if fire && angle != 0.0 {
            img = rotate(&img, angle);
        }
    }
    if policy.hflip && rng.random_bool(p) {
        img = hflip(&img);
    }
    if policy.vflip && rng.random_bool(p) {
        img = vflip(&img);
    }
    if let Some(t) = policy.translate_frac {
        let fire = rng.random_bool(p);
        let dx = rng.random_range(-t..=t) * IMAGE_SIZE as f32;
        let dy = rng.random_range(-t..=t) * IMAGE_SIZE as f32;
        if fire {
            img = translate(&img, dx, dy);
        }
    }
    if let Some(b) = policy.brightness_jitter {
        let fire = rng.random_bool(p);
        let delta = rng.random_range(-b..=b);
        if fire {
            img = NormalizedImage {
                data: img.data.iter().map(|v| (v + delta).clamp(0.0, 1.0)).collect(),
            };
        }
    }
    if let Some(c) = policy.contrast_jitter {
        let fire = rng.random_bool(p);
        let factor = rng.random_range(1.0 - c..=1.0 + c);
        if fire {
            let mean = img.mean_value();
            img = NormalizedImage {
                data: img
                    .data
                    .iter()
                    .map(|v| ((v - mean) * factor + mean).clamp(0.0, 1.0))
                    .collect(),
            };
        }
    }
    img
}

pub fn hflip(img: &NormalizedImage) -> NormalizedImage {
    NormalizedImage::from_fn(|x, y| img.pixel(IMAGE_SIZE - 1 - x, y))
}

pub fn vflip(img: &NormalizedImage) -> NormalizedImage {
    NormalizedImage::from_fn(|x, y| img.pixel(x, IMAGE_SIZE - 1 - y))
}

/// Rotates counter-clockwise about the image centre; uncovered pixels take the mean colour.
pub fn rotate(img: &NormalizedImage, degrees: f32) -> NormalizedImage {
    let fill = img.mean_color();
    let (s, c) = (degrees.to_radians() as f64).sin_cos();
    let centre = (IMAGE_SIZE as f64 - 1.0) / 2.0;
    NormalizedImage::from_fn(|x, y| {
        let (dx, dy) = (x as f64 - centre, y as f64 - centre);
        let sx = c * dx - s * dy + centre;
        let sy = s * dx + c * dy + centre;
        sample_bilinear(img, sx, sy, fill)
    })
}

/// Shifts content by `(dx, dy)` pixels; uncovered pixels take the mean colour.
pub fn translate(img: &NormalizedImage, dx: f32, dy: f32) -> NormalizedImage {
    let fill = img.mean_color();
    NormalizedImage::from_fn(|x, y| {
        sample_bilinear(img, x as f64 - dx as f64, y as f64 - dy as f64, fill)
    })
}

fn sample_bilinear(img: &NormalizedImage, sx: f64, sy: f64, fill: [f32; 3]) -> [f32; 3] {
    let max = (IMAGE_SIZE - 1) as f64;
    if !(0.0..=max).contains(&sx) || !(0.0..=max).contains(&sy) {
        return fill;
    }
    let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(IMAGE_SIZE - 1), (y0 + 1).min(IMAGE_SIZE - 1));
    let (tx, ty) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
    let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
    let mut out = [0f32; 3];
    for k in 0..3 {
        let top = a[k] * (1.0 - tx) + b[k] * tx;
        let bot = c[k] * (1.0 - tx) + d[k] * tx;
        out[k] = top * (1.0 - ty) + bot * ty;
    }
    out
}
