//! Stochastic view generation: random resized crop plus colour jitter.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Raster;
use crate::{Error, Result};

/// Parameters for one augmentation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// (min, max) fraction of the source area retained by the crop.
    pub crop_scale_range: (f64, f64),
    /// (height, width) of the emitted view.
    pub output_size: (usize, usize),
    /// Colour jitter strengths, all >= 0; zero disables the corresponding jitter.
    pub jitter: JitterStrengths,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct JitterStrengths {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of the full hue circle, in [0, 0.5].
    pub hue: f64,
}

/// Aspect-ratio window sampled for non-degenerate crops.
const ASPECT_RANGE: (f64, f64) = (3.0 / 4.0, 4.0 / 3.0);

impl AugmentSpec {
    /// Identity pipeline for the given output size.
    pub fn identity(output_size: (usize, usize)) -> Self {
        AugmentSpec {
            crop_scale_range: (1.0, 1.0),
            output_size,
            jitter: JitterStrengths::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Data(format!(
                "crop_scale_range must satisfy 0 < min <= max <= 1, got ({lo}, {hi})"
            )));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Data("augment output dimensions must be >= 1".into()));
        }
        let j = self.jitter;
        for (name, v) in [
            ("brightness", j.brightness),
            ("contrast", j.contrast),
            ("saturation", j.saturation),
            ("hue", j.hue),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Data(format!("jitter strength {name} must be >= 0, got {v}")));
            }
        }
        if j.hue > 0.5 {
            return Err(Error::Data(format!(
                "hue jitter must be <= 0.5 (fraction of the hue circle), got {}",
                j.hue
            )));
        }
        Ok(())
    }
}

/// Produce one augmented view of `img`. Deterministic in `seed`; with zero
/// jitter, a full-area crop range and matching output size the result is
/// pixel-identical to the input.
pub fn augment(img: &Raster, spec: &AugmentSpec, seed: u64) -> Result<Raster> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let (h, w) = (img.height(), img.width());
    let area = (h * w) as f64;
    let (lo, hi) = spec.crop_scale_range;
    let frac = if lo == hi { lo } else { rng.gen_range(lo..=hi) };

    let cropped = if frac >= 1.0 - 1e-12 {
        img.clone()
    } else {
        let target_area = frac * area;
        // Log-uniform aspect sample keeps the distribution symmetric.
        let (alo, ahi) = ASPECT_RANGE;
        let aspect = rng.gen_range(alo.ln()..=ahi.ln()).exp();
        let cw = ((target_area * aspect).sqrt().round() as usize).clamp(1, w);
        let ch = ((target_area / aspect).sqrt().round() as usize).clamp(1, h);
        let top = if ch < h { rng.gen_range(0..=h - ch) } else { 0 };
        let left = if cw < w { rng.gen_range(0..=w - cw) } else { 0 };
        img.crop(top, left, ch, cw)
    };

    let resized = cropped.resize_bilinear(spec.output_size.0, spec.output_size.1);
    Ok(apply_jitter(resized, &spec.jitter, &mut rng))
}

fn apply_jitter(mut img: Raster, j: &JitterStrengths, rng: &mut ChaCha8Rng) -> Raster {
    if j.brightness > 0.0 {
        let f = rng.gen_range((1.0 - j.brightness).max(0.0)..=1.0 + j.brightness) as f32;
        map_pixels(&mut img, |rgb| rgb.map(|v| v * f));
    }
    if j.contrast > 0.0 {
        let f = rng.gen_range((1.0 - j.contrast).max(0.0)..=1.0 + j.contrast) as f32;
        let mean = gray_mean(&img);
        map_pixels(&mut img, |rgb| rgb.map(|v| mean + f * (v - mean)));
    }
    if j.saturation > 0.0 {
        let f = rng.gen_range((1.0 - j.saturation).max(0.0)..=1.0 + j.saturation) as f32;
        map_pixels(&mut img, |rgb| {
            let gray = luma(rgb);
            rgb.map(|v| gray + f * (v - gray))
        });
    }
    if j.hue > 0.0 {
        let shift = rng.gen_range(-j.hue..=j.hue) as f32 * 360.0;
        map_pixels(&mut img, |rgb| {
            let (hdeg, s, v) = rgb_to_hsv(rgb);
            hsv_to_rgb(((hdeg + shift) % 360.0 + 360.0) % 360.0, s, v)
        });
    }
    img
}

fn map_pixels(img: &mut Raster, f: impl Fn([f32; 3]) -> [f32; 3]) {
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let rgb = img.get(y, x);
            let out = f([rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]);
            img.set(y, x, out.map(|v| v.round().clamp(0.0, 255.0) as u8));
        }
    }
}

#[inline]
fn luma(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn gray_mean(img: &Raster) -> f32 {
    let mut sum = 0.0f64;
    let (h, w) = (img.height(), img.width());
    for y in 0..h {
        for x in 0..w {
            let p = img.get(y, x);
            sum += luma([p[0] as f32, p[1] as f32, p[2] as f32]) as f64;
        }
    }
    (sum / (h * w) as f64) as f32
}

fn rgb_to_hsv(rgb: [f32; 3]) -> (f32, f32, f32) {
    let r = rgb[0] / 255.0;
    let g = rgb[1] / 255.0;
    let b = rgb[2] / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}
