//! Sampling per-class generators into image files plus a synthetic
//! training manifest.
//!
//! Image `i` of a class depends only on `(bundle, seed, class, i)`. Latents
//! are drawn in fixed, index-aligned chunks so a partial rerun renders
//! exactly the same pixels as a full one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::dataset::{ImageRecord, Label, Manifest, Source, Split, SYNTHETIC_PREFIX};
use crate::error::{Error, Result};
use crate::gan::{map_latent, synthesize, GeneratorBundle};
use crate::image::{unstack, TensorImage};
use crate::rng;
use crate::tensor::{no_grad, Tensor};

/// Images rendered per generator call; also the alignment of index chunks.
const CHUNK: usize = 16;

/// Sampling options independent of the generators themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisParams {
    pub n_per_class: usize,
    pub seed: u64,
    /// Pulls `w` towards the tracked average by this factor when set.
    /// Off by default.
    pub truncation_psi: Option<f32>,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        SynthesisParams {
            n_per_class: 500,
            seed: 0,
            truncation_psi: None,
        }
    }
}

pub struct SynthesisJob<'a> {
    pub bundle_pos: &'a GeneratorBundle,
    pub bundle_neg: &'a GeneratorBundle,
    pub out_dir: PathBuf,
    pub params: SynthesisParams,
}

/// Renders the chunk starting at `start`, mapped to `[0, 1]`.
fn render_chunk(bundle: &GeneratorBundle, start: usize, seed: u64, psi: Option<f32>) -> Vec<TensorImage> {
    let _g = no_grad();
    let class = bundle.class_label.index() as u64;
    let chunk = (start / CHUNK) as u64;
    let z = Tensor::randn(
        &[CHUNK, bundle.config.latent_dim],
        &mut rng::stream(seed, "synthesis-z", &[class, chunk]),
    );
    let mut w = map_latent(bundle, &z).expect("latent width comes from the bundle");
    if let Some(psi) = psi {
        let avg = bundle.w_avg().reshape(&[1, bundle.config.latent_dim]);
        w = avg.add(&w.sub(&avg).scale(psi));
    }
    let noise_seed = rng::derive_key(seed, "synthesis-noise", &[class, chunk]);
    let img = synthesize(bundle, &w, noise_seed).add_scalar(1.0).scale(0.5);
    unstack(&img)
        .into_iter()
        .map(|mut im| {
            im.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            im
        })
        .collect()
}

/// `n` images in `[0, 1]` with latents from a standard normal.
pub fn generate_class(bundle: &GeneratorBundle, n: usize, seed: u64) -> Vec<TensorImage> {
    generate_class_with(bundle, n, seed, None)
}

/// [`generate_class`] with optional latent truncation.
pub fn generate_class_with(bundle: &GeneratorBundle, n: usize, seed: u64, psi: Option<f32>) -> Vec<TensorImage> {
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let take = CHUNK.min(n - start);
        out.extend(render_chunk(bundle, start, seed, psi).into_iter().take(take));
    }
    out
}

pub fn image_path(out_dir: &Path, label: Label, index: usize) -> PathBuf {
    out_dir.join(label.as_str()).join(format!("syn_{index:06}.png"))
}

pub fn record_id(label: Label, index: usize) -> String {
    format!("{SYNTHETIC_PREFIX}{label}:{index}")
}

/// Writes `n_per_class` images per class under `out_dir/{positive,negative}/`
/// and `out_dir/manifest.csv`. Files already present are kept; since every
/// file is written atomically, an existing file is a complete one.
pub fn run_job(job: &SynthesisJob) -> Result<Manifest> {
    let (pos, neg) = (job.bundle_pos, job.bundle_neg);
    if pos.class_label == neg.class_label {
        return Err(Error::usage(format!(
            "both generators are for the {} class",
            pos.class_label
        )));
    }
    let n = job.params.n_per_class;
    let mut records = Vec::with_capacity(2 * n);
    for bundle in [pos, neg] {
        let label = bundle.class_label;
        let dir = job.out_dir.join(label.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut written = 0;
        for start in (0..n).step_by(CHUNK) {
            let indices = start..(start + CHUNK).min(n);
            let missing: Vec<usize> = indices
                .clone()
                .filter(|&i| !image_path(&job.out_dir, label, i).exists())
                .collect();
            if !missing.is_empty() {
                let images = render_chunk(bundle, start, job.params.seed, job.params.truncation_psi);
                for i in missing {
                    write_atomic(
                        &image_path(&job.out_dir, label, i),
                        &images[i - start].encode_gray_png()?,
                    )?;
                    written += 1;
                }
            }
            records.extend(indices.map(|i| ImageRecord {
                record_id: record_id(label, i),
                patient_id: record_id(label, i),
                path: image_path(&job.out_dir, label, i),
                label,
                source: Source::Synthetic,
                view: None,
            }));
        }
        log::info!("synthesis: {label}: wrote {written} of {n} images");
    }
    let manifest = Manifest::new("synthetic", Split::Train, records)?;
    manifest.write(&job.out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
