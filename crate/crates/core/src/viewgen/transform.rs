//! Handcrafted augmentations: random-resized-crop, horizontal flip, color jitter.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelzoo::ImageTensor;
use crate::rng::StreamRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrengthPreset {
    Full,
    Weak,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    /// Fraction of the image area kept by the crop.
    pub crop_scale_range: (f64, f64),
    /// Aspect ratio range of the crop (width / height).
    pub crop_ratio_range: (f64, f64),
    pub flip_probability: f64,
    /// Brightness and contrast factors are drawn from `[1 - s, 1 + s]` per channel.
    pub color_jitter_strength: f64,
    pub channel_shuffle_probability: f64,
    pub strength_preset: StrengthPreset,
}

impl TransformConfig {
    pub fn full() -> Self {
        TransformConfig {
            crop_scale_range: (0.2, 1.0),
            crop_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            color_jitter_strength: 0.4,
            channel_shuffle_probability: 0.2,
            strength_preset: StrengthPreset::Full,
        }
    }

    /// Mild crop and flip only.
    pub fn weak() -> Self {
        TransformConfig {
            crop_scale_range: (0.8, 1.0),
            crop_ratio_range: (3.0 / 4.0, 4.0 / 3.0),
            flip_probability: 0.5,
            color_jitter_strength: 0.0,
            channel_shuffle_probability: 0.0,
            strength_preset: StrengthPreset::Weak,
        }
    }

    pub fn preset(p: StrengthPreset) -> Self {
        match p {
            StrengthPreset::Full => Self::full(),
            StrengthPreset::Weak => Self::weak(),
        }
    }

    /// Leaves every image unchanged.
    pub fn identity() -> Self {
        TransformConfig {
            crop_scale_range: (1.0, 1.0),
            crop_ratio_range: (1.0, 1.0),
            flip_probability: 0.0,
            color_jitter_strength: 0.0,
            channel_shuffle_probability: 0.0,
            strength_preset: StrengthPreset::Weak,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale range must satisfy 0 < low <= high <= 1, got ({lo}, {hi})")));
        }
        let (rlo, rhi) = self.crop_ratio_range;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return Err(Error::config(format!("crop ratio range ({rlo}, {rhi}) is invalid")));
        }
        for (name, p) in [
            ("flip_probability", self.flip_probability),
            ("channel_shuffle_probability", self.channel_shuffle_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.color_jitter_strength >= 0.0 && self.color_jitter_strength < 1.0) {
            return Err(Error::config("color_jitter_strength must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Crop {
    top: usize,
    left: usize,
    height: usize,
    width: usize,
}

fn sample_crop(h: usize, w: usize, cfg: &TransformConfig, rng: &mut StreamRng) -> Crop {
    let full = Crop {
        top: 0,
        left: 0,
        height: h,
        width: w,
    };
    let (lo, hi) = cfg.crop_scale_range;
    let (rlo, rhi) = cfg.crop_ratio_range;
    if lo == 1.0 && hi == 1.0 {
        return full;
    }
    let area = (h * w) as f64;
    for _ in 0..10 {
        let scale = rng.random_range(lo..=hi);
        let ratio = rng.random_range(rlo.ln()..=rhi.ln()).exp();
        let cw = (area * scale * ratio).sqrt().round() as usize;
        let ch = (area * scale / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return Crop {
                top,
                left,
                height: ch,
                width: cw,
            };
        }
    }
    full
}

/// Bilinear resample of `crop` back to `h x w` (half-pixel centres).
fn resize_crop(x: &[f64], c: usize, h: usize, w: usize, crop: Crop) -> Vec<f64> {
    if crop.height == h && crop.width == w {
        return x.to_vec();
    }
    let sy = crop.height as f64 / h as f64;
    let sx = crop.width as f64 / w as f64;
    let axis = |dst: usize, scale: f64, len: usize, offset: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (offset + i0, offset + i1, src - i0 as f64)
    };
    let ys: Vec<_> = (0..h).map(|y| axis(y, sy, crop.height, crop.top)).collect();
    let xs: Vec<_> = (0..w).map(|x| axis(x, sx, crop.width, crop.left)).collect();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * h + oy) * w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Random-resized-crop, then horizontal flip, then color jitter; output keeps
/// the input shape and stays in `[0, 1]`.
pub fn expert_transform(x: &ImageTensor, cfg: &TransformConfig, rng: &mut StreamRng) -> Result<ImageTensor> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::shape("image", &[3, 0, 0], shape));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let crop = sample_crop(h, w, cfg, rng);
    let mut out = resize_crop(x.data(), c, h, w, crop);

    if cfg.flip_probability > 0.0 && rng.random_bool(cfg.flip_probability) {
        for row in out.chunks_mut(w) {
            row.reverse();
        }
    }

    let s = cfg.color_jitter_strength;
    if s > 0.0 {
        for plane in out.chunks_mut(h * w) {
            let brightness = rng.random_range(1.0 - s..=1.0 + s);
            let contrast = rng.random_range(1.0 - s..=1.0 + s);
            let mean = plane.iter().sum::<f64>() / plane.len() as f64;
            for v in plane.iter_mut() {
                *v = (contrast * (*v - mean) + brightness * mean).clamp(0.0, 1.0);
            }
        }
    }

    if cfg.channel_shuffle_probability > 0.0 && rng.random_bool(cfg.channel_shuffle_probability) {
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(rng);
        let src = out.clone();
        for (dst, &from) in order.iter().enumerate() {
            out[dst * h * w..(dst + 1) * h * w].copy_from_slice(&src[from * h * w..(from + 1) * h * w]);
        }
    }

    Ok(ImageTensor::new(shape.to_vec(), out))
}
