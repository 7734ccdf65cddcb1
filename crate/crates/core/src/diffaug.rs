//! Differentiable augmentation applied to discriminator inputs.
//!
//! A policy is an ordered list of ops. [`DiffAugPolicy::sample`] draws the
//! per-sample random parameters once, producing an [`AugDraw`] that can be
//! applied to any batch of the same shape; applying one draw to both the
//! real and the generated batch gives them identical transforms. Every op
//! is built from tensor ops, so gradients flow back to the pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum DiffAugOp {
    /// Brightness offset in `[-brightness, brightness]`, then saturation and
    /// contrast factors drawn uniformly from their ranges.
    Color {
        brightness: f32,
        saturation: [f32; 2],
        contrast: [f32; 2],
    },
    /// Integer shift of up to `round(fraction * size)` pixels per axis,
    /// zero-filled.
    Translation { fraction: f32 },
    /// Zeroes one square of side `round(fraction * size)` per sample.
    Cutout { fraction: f32 },
}

impl DiffAugOp {
    pub fn color() -> Self {
        DiffAugOp::Color {
            brightness: 0.5,
            saturation: [0.0, 2.0],
            contrast: [0.5, 1.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DiffAugPolicy {
    pub ops: Vec<DiffAugOp>,
}

impl Default for DiffAugPolicy {
    fn default() -> Self {
        DiffAugPolicy {
            ops: vec![
                DiffAugOp::color(),
                DiffAugOp::Translation { fraction: 0.125 },
                DiffAugOp::Cutout { fraction: 0.5 },
            ],
        }
    }
}

impl DiffAugPolicy {
    pub fn none() -> Self {
        DiffAugPolicy { ops: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Draws per-sample parameters for a batch of `n` images of size `h × w`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, h: usize, w: usize, rng: &mut R) -> AugDraw {
        let uniform = |rng: &mut R, lo: f32, hi: f32| -> f32 {
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        };
        let ops = self
            .ops
            .iter()
            .map(|op| match *op {
                DiffAugOp::Color {
                    brightness,
                    saturation,
                    contrast,
                } => DrawnOp::Color {
                    brightness: (0..n).map(|_| uniform(rng, -brightness, brightness)).collect(),
                    saturation: (0..n).map(|_| uniform(rng, saturation[0], saturation[1])).collect(),
                    contrast: (0..n).map(|_| uniform(rng, contrast[0], contrast[1])).collect(),
                },
                DiffAugOp::Translation { fraction } => {
                    let sy = (h as f32 * fraction + 0.5) as i64;
                    let sx = (w as f32 * fraction + 0.5) as i64;
                    DrawnOp::Translation {
                        shifts: (0..n)
                            .map(|_| {
                                let dy = rng.random_range(-sy..=sy) as isize;
                                let dx = rng.random_range(-sx..=sx) as isize;
                                (dy, dx)
                            })
                            .collect(),
                    }
                }
                DiffAugOp::Cutout { fraction } => {
                    let ch = (h as f32 * fraction + 0.5) as usize;
                    let cw = (w as f32 * fraction + 0.5) as usize;
                    let boxes = (0..n)
                        .map(|_| {
                            let cy = rng.random_range(0..(h + 1 - ch % 2) as u64) as usize;
                            let cx = rng.random_range(0..(w + 1 - cw % 2) as u64) as usize;
                            let y0 = cy.saturating_sub(ch / 2);
                            let x0 = cx.saturating_sub(cw / 2);
                            let y1 = (cy + ch / 2).min(h);
                            let x1 = (cx + cw / 2).min(w);
                            if ch == 0 || cw == 0 {
                                (0, 0, 0, 0)
                            } else {
                                (y0, y1, x0, x1)
                            }
                        })
                        .collect();
                    DrawnOp::Cutout { boxes }
                }
            })
            .collect();
        AugDraw { n, h, w, ops }
    }
}

/// Concrete per-sample parameters of one op.
#[derive(Clone, Debug, PartialEq)]
pub enum DrawnOp {
    Color {
        brightness: Vec<f32>,
        saturation: Vec<f32>,
        contrast: Vec<f32>,
    },
    Translation {
        shifts: Vec<(isize, isize)>,
    },
    /// `(y0, y1, x0, x1)` half-open boxes.
    Cutout {
        boxes: Vec<(usize, usize, usize, usize)>,
    },
}

/// A sampled augmentation, reusable across batches of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct AugDraw {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ops: Vec<DrawnOp>,
}

fn per_sample(values: &[f32]) -> Tensor {
    Tensor::from_vec(values.to_vec(), &[values.len(), 1, 1, 1])
}

impl DrawnOp {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let s = x.shape().to_vec();
        match self {
            DrawnOp::Color {
                brightness,
                saturation,
                contrast,
            } => {
                let mut out = x.clone();
                if brightness.iter().any(|&b| b != 0.0) {
                    out = out.add(&per_sample(brightness));
                }
                if saturation.iter().any(|&f| f != 1.0) {
                    let mean = out.mean_to(&[s[0], 1, s[2], s[3]]);
                    out = out.sub(&mean).mul(&per_sample(saturation)).add(&mean);
                }
                if contrast.iter().any(|&f| f != 1.0) {
                    let mean = out.mean_to(&[s[0], 1, 1, 1]);
                    out = out.sub(&mean).mul(&per_sample(contrast)).add(&mean);
                }
                out
            }
            DrawnOp::Translation { shifts } => {
                if shifts.iter().all(|&d| d == (0, 0)) {
                    x.clone()
                } else {
                    x.translate(shifts)
                }
            }
            DrawnOp::Cutout { boxes } => {
                if boxes.iter().all(|b| b.0 == b.1 || b.2 == b.3) {
                    return x.clone();
                }
                let (h, w) = (s[2], s[3]);
                let mut mask = vec![1.0; s[0] * h * w];
                for (n, &(y0, y1, x0, x1)) in boxes.iter().enumerate() {
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            mask[(n * h + y) * w + xx] = 0.0;
                        }
                    }
                }
                x.mul(&Tensor::from_vec(mask, &[s[0], 1, h, w]))
            }
        }
    }
}

impl AugDraw {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        assert_eq!(
            (x.dim(0), x.dim(2), x.dim(3)),
            (self.n, self.h, self.w),
            "augmentation drawn for a different batch shape"
        );
        self.ops.iter().fold(x.clone(), |acc, op| op.apply(&acc))
    }
}

/// Samples a draw from `policy` and applies it to `batch` (`[N, C, H, W]`).
pub fn diff_augment<R: Rng + ?Sized>(batch: &Tensor, policy: &DiffAugPolicy, rng: &mut R) -> Tensor {
    let s = batch.shape();
    policy.sample(s[0], s[2], s[3], rng).apply(batch)
}
