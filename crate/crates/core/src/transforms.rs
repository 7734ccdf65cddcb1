//! Deterministic preprocessing (resize, normalization) and the stochastic
//! classifier augmentation (horizontal flip, small rotation).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Split};
use crate::error::{Error, Result};
use crate::image::TensorImage;

/// Floor applied to per-channel standard deviations.
pub const STD_EPSILON: f32 = 1e-6;

/// Bilinear resize with half-pixel centres and edge clamping. Aspect ratio
/// is not preserved.
pub fn resize(img: &TensorImage, target: (usize, usize)) -> Result<TensorImage> {
    let (oh, ow) = target;
    if oh == 0 || ow == 0 {
        return Err(Error::usage(format!("resize target must be positive, got {oh}x{ow}")));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::usage("cannot resize an empty image"));
    }
    if (oh, ow) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let src = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, src - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(oh, img.height), axis(ow, img.width));
    let mut data = Vec::with_capacity(img.channels * oh * ow);
    for c in 0..img.channels {
        let p = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = p[y0 * img.width + x0] * (1.0 - fx) + p[y0 * img.width + x1] * fx;
                let bot = p[y1 * img.width + x0] * (1.0 - fx) + p[y1 * img.width + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(TensorImage::new(img.channels, oh, ow, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Per-channel mean and population standard deviation over every pixel of
/// `images`; standard deviations are floored at [`STD_EPSILON`].
pub fn norm_stats_of<'a>(images: impl IntoIterator<Item = &'a TensorImage>) -> Result<NormStats> {
    let images: Vec<&TensorImage> = images.into_iter().collect();
    let first = images
        .first()
        .ok_or_else(|| Error::usage("normalization statistics need at least one image"))?;
    let channels = first.channels;
    if images.iter().any(|i| i.channels != channels) {
        return Err(Error::usage("images disagree on channel count"));
    }
    let mut sum = vec![0.0f64; channels];
    let mut count = 0usize;
    for img in &images {
        for (c, s) in sum.iter_mut().enumerate() {
            *s += img.plane(c).iter().map(|&v| v as f64).sum::<f64>();
        }
        count += img.height * img.width;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; channels];
    for img in &images {
        for (c, s) in sq.iter_mut().enumerate() {
            *s += img.plane(c).iter().map(|&v| (v as f64 - mean[c]).powi(2)).sum::<f64>();
        }
    }
    Ok(NormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq
            .iter()
            .map(|&s| ((s / count as f64).sqrt() as f32).max(STD_EPSILON))
            .collect(),
    })
}

/// Normalization statistics of a training manifest, computed on images
/// resized to `target`.
pub fn compute_norm_stats(train: &Manifest, target: (usize, usize)) -> Result<NormStats> {
    if train.split() != Split::Train {
        return Err(Error::usage(format!(
            "normalization statistics come from the train split, got {}",
            train.split()
        )));
    }
    if train.is_empty() {
        return Err(Error::usage("normalization statistics need a non-empty manifest"));
    }
    let images = train
        .records()
        .iter()
        .map(|r| TensorImage::load(&r.path).and_then(|i| resize(&i, target)))
        .collect::<Result<Vec<_>>>()?;
    norm_stats_of(&images)
}

fn check_channels(img: &TensorImage, stats: &NormStats) -> Result<()> {
    if stats.mean.len() != img.channels || stats.std.len() != img.channels {
        return Err(Error::usage(format!(
            "image has {} channels, statistics have {}",
            img.channels,
            stats.mean.len()
        )));
    }
    Ok(())
}

/// `(img - mean) / std`, per channel.
pub fn normalize(img: &TensorImage, stats: &NormStats) -> Result<TensorImage> {
    check_channels(img, stats)?;
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / n;
            (v - stats.mean[c]) / stats.std[c]
        })
        .collect();
    Ok(TensorImage::new(img.channels, img.height, img.width, data))
}

/// Inverse of [`normalize`].
pub fn denormalize(img: &TensorImage, stats: &NormStats) -> Result<TensorImage> {
    check_channels(img, stats)?;
    let n = img.height * img.width;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = i / n;
            v * stats.std[c] + stats.mean[c]
        })
        .collect();
    Ok(TensorImage::new(img.channels, img.height, img.width, data))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub hflip_probability: f64,
    pub rotation_limit_degrees: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_probability: 0.5,
            rotation_limit_degrees: 5.0,
        }
    }
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy {
            hflip_probability: 0.0,
            rotation_limit_degrees: 0.0,
        }
    }
}

pub fn hflip(img: &TensorImage) -> TensorImage {
    TensorImage::from_fn(img.channels, img.height, img.width, |c, y, x| {
        img.at(c, y, img.width - 1 - x)
    })
}

/// Rotates about the image centre by `degrees` (counter-clockwise on
/// screen), sampling bilinearly with border replication.
pub fn rotate(img: &TensorImage, degrees: f64) -> TensorImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let (hmax, wmax) = ((img.height - 1) as f64, (img.width - 1) as f64);
    let mut data = Vec::with_capacity(img.data.len());
    for ch in 0..img.channels {
        let p = img.plane(ch);
        for y in 0..img.height {
            for x in 0..img.width {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let sx = (c * dx - s * dy + cx).clamp(0.0, wmax);
                let sy = (s * dx + c * dy + cy).clamp(0.0, hmax);
                let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
                let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
                let top = p[y0 * img.width + x0] * (1.0 - fx) + p[y0 * img.width + x1] * fx;
                let bot = p[y1 * img.width + x0] * (1.0 - fx) + p[y1 * img.width + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    TensorImage::new(img.channels, img.height, img.width, data)
}

/// Draws a flip (with `hflip_probability`) and a rotation angle uniform in
/// `[-limit, +limit]`, then applies flip followed by rotation.
pub fn augment_classifier<R: Rng + ?Sized>(img: &TensorImage, policy: &AugmentPolicy, rng: &mut R) -> TensorImage {
    let flip = rng.random::<f64>() < policy.hflip_probability;
    let limit = policy.rotation_limit_degrees;
    let angle = if limit > 0.0 {
        rng.random_range(-limit..=limit)
    } else {
        0.0
    };
    let out = if flip { hflip(img) } else { img.clone() };
    rotate(&out, angle)
}
