//! Procedural two-class corpus used by tests, benchmarks and the desk-scale
//! experiment.
//!
//! Every image is a grayscale chest-like scene: a bright body with two dark
//! elliptical lung fields plus smooth texture. Positive images add a few
//! soft bright opacities inside the lung fields.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ImageRecord, Label, Manifest, Source, Split};
use crate::error::Result;
use crate::image::TensorImage;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySpec {
    pub size: usize,
    pub train_positive: usize,
    pub train_negative: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    /// Peak brightness range of a positive-class opacity.
    pub opacity: [f32; 2],
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            size: 64,
            train_positive: 30,
            train_negative: 200,
            val_per_class: 20,
            test_per_class: 50,
            opacity: [0.12, 0.3],
            seed: 0,
        }
    }
}

fn split_tag(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

/// Renders image `index` of `label` in `split`; a pure function of its
/// arguments.
pub fn toy_image(spec: &ToySpec, split: Split, label: Label, index: usize) -> TensorImage {
    let mut r = rng::stream(
        spec.seed,
        "toy",
        &[split_tag(split), label.index() as u64, index as u64],
    );
    let s = spec.size as f32;
    let body = r.random_range(0.55f32..0.7);
    let lung = r.random_range(0.18f32..0.3);
    let cy = s * r.random_range(0.45f32..0.55);
    let (ry, rx) = (s * r.random_range(0.28f32..0.34), s * r.random_range(0.14f32..0.18));
    let gap = s * r.random_range(0.2f32..0.24);
    let lungs = [(cy, s / 2.0 - gap), (cy, s / 2.0 + gap)];
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                r.random_range(0.01f32..0.04),
                r.random_range(0.05f32..0.3),
                r.random_range(0.05f32..0.3),
                // Phase range is part of the corpus definition; kept literal.
                #[allow(clippy::approx_constant)]
                r.random_range(0.0f32..6.28),
            )
        })
        .collect();
    let blobs: Vec<(f32, f32, f32, f32)> = if label == Label::Positive {
        let k = r.random_range(2..=4);
        (0..k)
            .map(|_| {
                let (ly, lx) = lungs[r.random_range(0..2usize)];
                let by = ly + r.random_range(-0.6f32..0.6) * ry;
                let bx = lx + r.random_range(-0.5f32..0.5) * rx;
                let rad = s * r.random_range(0.06f32..0.12);
                let amp = r.random_range(spec.opacity[0]..spec.opacity[1]);
                (by, bx, rad, amp)
            })
            .collect()
    } else {
        Vec::new()
    };
    let noise: Vec<f32> = (0..spec.size * spec.size)
        .map(|_| r.random_range(-0.03f32..0.03))
        .collect();
    TensorImage::from_fn(1, spec.size, spec.size, |_, y, x| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let mut v = body;
        for &(ly, lx) in &lungs {
            let d = ((yf - ly) / ry).powi(2) + ((xf - lx) / rx).powi(2);
            v -= (body - lung) * (-(d * d) * 1.5).exp();
        }
        for &(a, fy, fx, ph) in &waves {
            v += a * (fy * yf + fx * xf + ph).sin();
        }
        for &(by, bx, rad, amp) in &blobs {
            let d2 = ((yf - by).powi(2) + (xf - bx).powi(2)) / (rad * rad);
            v += amp * (-d2).exp();
        }
        (v + noise[y * spec.size + x]).clamp(0.0, 1.0)
    })
}

#[derive(Clone, Debug)]
pub struct ToyCorpus {
    pub train: Manifest,
    pub val: Manifest,
    pub test: Manifest,
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub test_path: PathBuf,
}

/// Writes the corpus under `dir` as PNGs plus `train.csv`, `val.csv` and
/// `test.csv`.
pub fn write_toy_corpus(dir: &Path, spec: &ToySpec) -> Result<ToyCorpus> {
    let dir = std::path::absolute(dir).map_err(|e| crate::Error::io(dir, e))?;
    let build = |split: Split, counts: [(Label, usize); 2]| -> Result<(Manifest, PathBuf)> {
        let tag = match split {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        };
        let img_dir = dir.join(tag);
        std::fs::create_dir_all(&img_dir).map_err(|e| crate::Error::io(&img_dir, e))?;
        let mut records = Vec::new();
        for (label, n) in counts {
            for i in 0..n {
                let id = format!("toy-{tag}-{label}-{i:04}");
                let path = img_dir.join(format!("{id}.png"));
                toy_image(spec, split, label, i).save_gray_png(&path)?;
                records.push(ImageRecord {
                    record_id: id.clone(),
                    patient_id: id,
                    path,
                    label,
                    source: Source::Real,
                    view: None,
                });
            }
        }
        let manifest = Manifest::new(tag, split, records)?;
        let path = dir.join(format!("{tag}.csv"));
        manifest.write(&path)?;
        Ok((manifest, path))
    };
    let (train, train_path) = build(
        Split::Train,
        [
            (Label::Positive, spec.train_positive),
            (Label::Negative, spec.train_negative),
        ],
    )?;
    let (val, val_path) = build(
        Split::Validation,
        [
            (Label::Positive, spec.val_per_class),
            (Label::Negative, spec.val_per_class),
        ],
    )?;
    let (test, test_path) = build(
        Split::Test,
        [
            (Label::Positive, spec.test_per_class),
            (Label::Negative, spec.test_per_class),
        ],
    )?;
    Ok(ToyCorpus {
        train,
        val,
        test,
        train_path,
        val_path,
        test_path,
    })
}
