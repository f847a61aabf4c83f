//! Resampling, cropping and the train/eval preprocessing paths.

use alloc::format;

use rand::Rng;

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::tensor::Map2;

/// Source coordinate and blend weight for half-pixel-centred bilinear
/// sampling along one axis.
#[inline]
fn source_coord(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let lo = (libm::floor(s) as usize).min(in_len - 1);
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, s - lo as f64)
}

fn bilinear(height: usize, width: usize, out_h: usize, out_w: usize, get: impl Fn(usize, usize) -> f64, mut put: impl FnMut(usize, usize, f64)) {
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, height, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = source_coord(x, width, out_w);
            let top = get(y0, x0) * (1.0 - fx) + get(y0, x1) * fx;
            let bottom = get(y1, x0) * (1.0 - fx) + get(y1, x1) * fx;
            put(y, x, top * (1.0 - fy) + bottom * fy);
        }
    }
}

/// Bilinear resize of a map (half-pixel centres, edge clamping).
pub fn resize_map(map: &Map2, out_h: usize, out_w: usize) -> Map2 {
    let mut out = Map2::zeros(out_h, out_w);
    if map.is_empty() {
        return out;
    }
    bilinear(map.height(), map.width(), out_h, out_w, |y, x| map.get(y, x), |y, x, v| out.set(y, x, v));
    out
}

pub fn resize_image(image: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::zeros(out_h, out_w);
    for c in 0..Image::CHANNELS {
        bilinear(
            image.height(),
            image.width(),
            out_h,
            out_w,
            |y, x| image.get(c, y, x),
            |y, x, v| out.set(c, y, x, v),
        );
    }
    out
}

pub fn crop(image: &Image, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
    if top + height > image.height() || left + width > image.width() {
        return Err(Error::Shape(format!(
            "crop {height}x{width}+{top}+{left} exceeds {}x{}",
            image.height(),
            image.width()
        )));
    }
    let mut out = Image::zeros(height, width);
    for c in 0..Image::CHANNELS {
        for y in 0..height {
            for x in 0..width {
                out.set(c, y, x, image.get(c, top + y, left + x));
            }
        }
    }
    Ok(out)
}

pub fn flip_horizontal(image: &Image) -> Image {
    let mut out = image.clone();
    let w = image.width();
    for c in 0..Image::CHANNELS {
        for y in 0..image.height() {
            for x in 0..w {
                out.set(c, y, x, image.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Per-channel `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Standardization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Standardization {
    /// ImageNet statistics.
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

impl Standardization {
    pub fn apply(&self, image: &Image) -> Image {
        let mut out = image.clone();
        let plane = image.height() * image.width();
        for (c, chunk) in out.as_mut_slice().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|v| *v = (*v - self.mean[c]) / self.std[c]);
        }
        out
    }
}

/// Geometry of the preprocessing pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub resize: usize,
    pub crop: usize,
    pub flip_prob: f64,
    pub standardization: Standardization,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { resize: 256, crop: 224, flip_prob: 0.5, standardization: Standardization::default() }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::Config(format!("crop {} must be in 1..={}", self.crop, self.resize)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("flip probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Resize to `resize²`, random `crop²` window, horizontal flip with
/// `flip_prob`, then standardise.
pub fn augment_train<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Result<Image> {
    let resized = resize_image(image, cfg.resize, cfg.resize);
    let slack = cfg.resize - cfg.crop;
    let top = rng.random_range(0..=slack);
    let left = rng.random_range(0..=slack);
    let mut out = crop(&resized, top, left, cfg.crop, cfg.crop)?;
    if rng.random_bool(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    Ok(cfg.standardization.apply(&out))
}

/// Deterministic evaluation input: the whole image resized to `crop²` and
/// standardised, so predictions cover the full frame.
pub fn prepare_eval(image: &Image, cfg: &AugmentConfig) -> Image {
    cfg.standardization.apply(&resize_image(image, cfg.crop, cfg.crop))
}
