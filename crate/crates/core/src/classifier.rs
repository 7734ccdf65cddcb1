//! Two-class residual CNN and its two-phase fine-tuning loop.
//!
//! Training runs `freeze_epochs` epochs that update only the classification
//! head (backbone normalization statistics held fixed), then `main_epochs`
//! epochs over every parameter under a one-cycle learning-rate schedule.

use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::dataset::{Label, Manifest, Source, Split};
use crate::error::{Error, Result};
use crate::image::{stack, TensorImage};
use crate::nn::{Adam, BatchNorm2d, Conv2d, Linear, NormMode, Param, ParamKind, ParamStore};
use crate::rng;
use crate::schedule::one_cycle_lr;
use crate::tensor::{grad, no_grad, Tensor};
use crate::transforms::{augment_classifier, norm_stats_of, normalize, resize, AugmentPolicy, NormStats};

pub const NUM_CLASSES: usize = 2;
const HEAD: &str = "head";
/// Inputs beyond this magnitude suggest the batch was not normalized.
const INPUT_RANGE: f32 = 20.0;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backbone {
    #[serde(rename = "tiny-resnet")]
    TinyResnet,
    #[serde(rename = "reference-resnet50-shape")]
    ReferenceResnet50Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub backbone: Backbone,
    pub pretrained_weights: Option<PathBuf>,
    pub num_classes: usize,
    /// Channel width of the first stage of the tiny backbone.
    pub width: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            backbone: Backbone::TinyResnet,
            pretrained_weights: None,
            num_classes: NUM_CLASSES,
            width: 16,
        }
    }
}

#[derive(Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        conv_name: &str,
        bn_name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        ConvBn {
            conv: Conv2d::new(store, conv_name, c_in, c_out, kernel, stride, kernel / 2, rng),
            bn: BatchNorm2d::new(store, bn_name, c_out),
        }
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        self.bn.forward(&self.conv.forward(x), mode)
    }
}

/// Two 3×3 convolutions with an identity or 1×1 shortcut; downsampling is
/// a 2×2 average pool in front of the block.
#[derive(Clone)]
struct BasicBlock {
    pool: bool,
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        pool: bool,
        rng: &mut R,
    ) -> Self {
        BasicBlock {
            pool,
            a: ConvBn::new(
                store,
                &format!("{name}.conv1"),
                &format!("{name}.bn1"),
                c_in,
                c_out,
                3,
                1,
                rng,
            ),
            b: ConvBn::new(
                store,
                &format!("{name}.conv2"),
                &format!("{name}.bn2"),
                c_out,
                c_out,
                3,
                1,
                rng,
            ),
            shortcut: (c_in != c_out).then(|| {
                ConvBn::new(
                    store,
                    &format!("{name}.downsample.0"),
                    &format!("{name}.downsample.1"),
                    c_in,
                    c_out,
                    1,
                    1,
                    rng,
                )
            }),
        }
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        let x = if self.pool { x.avg_pool2() } else { x.clone() };
        let h = self.b.forward(&self.a.forward(&x, mode).relu(), mode);
        let s = self
            .shortcut
            .as_ref()
            .map_or_else(|| x.clone(), |c| c.forward(&x, mode));
        h.add(&s).relu()
    }
}

/// 1×1 → 3×3 (strided) → 1×1 bottleneck with expansion 4.
#[derive(Clone)]
struct Bottleneck {
    a: ConvBn,
    b: ConvBn,
    c: ConvBn,
    shortcut: Option<ConvBn>,
}

impl Bottleneck {
    fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        mid: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let out = mid * 4;
        Bottleneck {
            a: ConvBn::new(
                store,
                &format!("{name}.conv1"),
                &format!("{name}.bn1"),
                c_in,
                mid,
                1,
                1,
                rng,
            ),
            b: ConvBn::new(
                store,
                &format!("{name}.conv2"),
                &format!("{name}.bn2"),
                mid,
                mid,
                3,
                stride,
                rng,
            ),
            c: ConvBn::new(
                store,
                &format!("{name}.conv3"),
                &format!("{name}.bn3"),
                mid,
                out,
                1,
                1,
                rng,
            ),
            shortcut: (c_in != out || stride != 1).then(|| {
                ConvBn::new(
                    store,
                    &format!("{name}.downsample.0"),
                    &format!("{name}.downsample.1"),
                    c_in,
                    out,
                    1,
                    stride,
                    rng,
                )
            }),
        }
    }

    fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        let h = self.a.forward(x, mode).relu();
        let h = self.b.forward(&h, mode).relu();
        let h = self.c.forward(&h, mode);
        let s = self.shortcut.as_ref().map_or_else(|| x.clone(), |c| c.forward(x, mode));
        h.add(&s).relu()
    }
}

#[derive(Clone)]
enum Body {
    Tiny(Vec<BasicBlock>),
    Resnet50(Vec<Bottleneck>),
}

/// A residual backbone followed by global average pooling and a fresh
/// two-output linear head.
#[derive(Clone)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    /// Statistics applied to every input before the forward pass.
    pub norm_stats: NormStats,
    stem: ConvBn,
    body: Body,
    head: Linear,
}

/// Builds a classifier; weights are initialized from streams keyed by
/// `seed`, then overwritten from `cfg.pretrained_weights` (head excluded)
/// when given.
pub fn build_model(cfg: &ClassifierConfig, seed: u64) -> Result<Classifier> {
    if cfg.num_classes != NUM_CLASSES {
        return Err(Error::usage(format!(
            "num_classes must be {NUM_CLASSES}, got {}",
            cfg.num_classes
        )));
    }
    let mut store = ParamStore::new();
    let mut r = rng::stream(seed, "classifier-init", &[]);
    let (stem, body, features) = match cfg.backbone {
        Backbone::TinyResnet => {
            if cfg.width == 0 {
                return Err(Error::usage("tiny backbone width must be positive"));
            }
            let w = cfg.width;
            let stem = ConvBn::new(&mut store, "backbone.conv1", "backbone.bn1", 3, w, 3, 1, &mut r);
            let blocks = vec![
                BasicBlock::new(&mut store, "backbone.layer1.0", w, w, false, &mut r),
                BasicBlock::new(&mut store, "backbone.layer2.0", w, 2 * w, true, &mut r),
                BasicBlock::new(&mut store, "backbone.layer3.0", 2 * w, 4 * w, true, &mut r),
            ];
            (stem, Body::Tiny(blocks), 4 * w)
        }
        Backbone::ReferenceResnet50Shape => {
            let stem = ConvBn::new(&mut store, "backbone.conv1", "backbone.bn1", 3, 64, 7, 2, &mut r);
            let mut blocks = Vec::new();
            let mut c_in = 64;
            for (stage, (&depth, &mid)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
                for i in 0..depth {
                    let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                    let name = format!("backbone.layer{}.{i}", stage + 1);
                    blocks.push(Bottleneck::new(&mut store, &name, c_in, mid, stride, &mut r));
                    c_in = mid * 4;
                }
            }
            (stem, Body::Resnet50(blocks), c_in)
        }
    };
    let mut head_rng = rng::stream(seed, "classifier-head", &[]);
    let head = Linear::new(&mut store, HEAD, features, NUM_CLASSES, &mut head_rng);
    let model = Classifier {
        config: cfg.clone(),
        store,
        norm_stats: NormStats {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        },
        stem,
        body,
        head,
    };
    if let Some(path) = &cfg.pretrained_weights {
        let tensors = checkpoint::load_tensors(path)?;
        model.load_backbone(&tensors)?;
    }
    Ok(model)
}

fn is_head(name: &str) -> bool {
    name.split('.').next() == Some(HEAD)
}

impl Classifier {
    /// Pooled backbone features, `[N, F]`.
    pub fn features(&self, x: &Tensor, mode: NormMode) -> Tensor {
        let mut h = self.stem.forward(x, mode).relu();
        match &self.body {
            Body::Tiny(blocks) => {
                for b in blocks {
                    h = b.forward(&h, mode);
                }
            }
            Body::Resnet50(blocks) => {
                h = h.max_pool2d(3, 2, 1);
                for b in blocks {
                    h = b.forward(&h, mode);
                }
            }
        }
        let c = h.dim(1);
        h.mean_to(&[h.dim(0), c, 1, 1]).reshape(&[h.dim(0), c])
    }

    /// Logits, `[N, 2]`.
    pub fn forward(&self, x: &Tensor, mode: NormMode) -> Tensor {
        self.head.forward(&self.features(x, mode))
    }

    pub fn head_forward(&self, features: &Tensor) -> Tensor {
        self.head.forward(features)
    }

    pub fn output_dim(&self) -> usize {
        self.head.bias.shape()[0]
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_weights()
    }

    pub fn head_params(&self) -> Vec<Param> {
        self.store
            .all()
            .iter()
            .filter(|p| is_head(&p.name()))
            .cloned()
            .collect()
    }

    /// Backbone weights and normalization buffers.
    pub fn backbone_params(&self) -> Vec<Param> {
        self.store
            .all()
            .iter()
            .filter(|p| !is_head(&p.name()))
            .cloned()
            .collect()
    }

    fn set_backbone_trainable(&self, trainable: bool) {
        for p in self.backbone_params() {
            if p.kind() == ParamKind::Weight {
                p.set_trainable(trainable);
            }
        }
    }

    /// Loads every backbone tensor from `tensors`; head tensors in the file
    /// are ignored. Unknown, missing or mis-shaped tensors are an error
    /// naming them.
    pub fn load_backbone(&self, tensors: &[NamedTensor]) -> Result<()> {
        self.store.load(tensors, is_head, true)
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>, history: &TrainHistory) -> Result<()> {
        checkpoint::save_tensors(path, &self.store.named_tensors())?;
        let sidecar = ClassifierSidecar {
            config: SidecarConfig {
                classifier: self.config.clone(),
                train: train.cloned(),
            },
            norm_stats: self.norm_stats.clone(),
            history: history.epochs.clone(),
        };
        checkpoint::write_json(&checkpoint::sidecar_path(path), &sidecar)
    }

    /// Restores a model written by [`Classifier::save`].
    pub fn load(path: &Path) -> Result<(Classifier, ClassifierSidecar)> {
        let sidecar: ClassifierSidecar = checkpoint::read_json(&checkpoint::sidecar_path(path))?;
        let mut cfg = sidecar.config.classifier.clone();
        cfg.pretrained_weights = None;
        let mut model = build_model(&cfg, 0)?;
        model.config = sidecar.config.classifier.clone();
        let tensors = checkpoint::load_tensors(path)?;
        model.store.load(&tensors, |_| false, true)?;
        model.norm_stats = sidecar.norm_stats.clone();
        Ok((model, sidecar))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SidecarConfig {
    pub classifier: ClassifierConfig,
    pub train: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSidecar {
    pub config: SidecarConfig,
    pub norm_stats: NormStats,
    pub history: Vec<EpochRecord>,
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let e = logits.sub(&row_max(logits)).exp();
    let n = logits.dim(0);
    e.div(&e.sum_to(&[n, 1]))
}

fn row_max(logits: &Tensor) -> Tensor {
    let k = logits.dim(1);
    let m: Vec<f32> = logits
        .data()
        .chunks_exact(k)
        .map(|r| r.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect();
    Tensor::from_vec(m, &[logits.dim(0), 1])
}

pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let z = logits.sub(&row_max(logits));
    let n = logits.dim(0);
    z.sub(&z.exp().sum_to(&[n, 1]).ln())
}

/// Mean cross-entropy of `[N, 2]` logits against class labels.
pub fn cross_entropy(logits: &Tensor, targets: &[Label]) -> Tensor {
    let (n, k) = (logits.dim(0), logits.dim(1));
    assert_eq!(n, targets.len(), "one target per row");
    let mut onehot = vec![0.0; n * k];
    for (i, t) in targets.iter().enumerate() {
        onehot[i * k + t.index()] = 1.0;
    }
    log_softmax_rows(logits)
        .mul(&Tensor::from_vec(onehot, &[n, k]))
        .sum()
        .scale(-1.0 / n as f32)
}

/// Most probable class; exact ties go to class index 0.
pub fn argmax_label(row: &[f32]) -> Label {
    if row[1] > row[0] {
        Label::from_index(1)
    } else {
        Label::from_index(0)
    }
}

/// Class probabilities `[N, 2]` for an already normalized batch.
pub fn predict(model: &Classifier, batch: &Tensor) -> Tensor {
    if batch.data().iter().any(|v| v.abs() > INPUT_RANGE) {
        warn!("classifier input has values outside [-{INPUT_RANGE}, {INPUT_RANGE}]; was it normalized?");
    }
    let _g = no_grad();
    softmax_rows(&model.forward(batch, NormMode::Frozen))
}

/// Loads every image of `manifest` resized to `size × size`.
pub fn load_images(manifest: &Manifest, size: usize) -> Result<Vec<TensorImage>> {
    manifest
        .records()
        .iter()
        .map(|r| TensorImage::load(&r.path).and_then(|i| resize(&i, (size, size))))
        .collect()
}

fn normalized_batch(images: &[&TensorImage], stats: &NormStats) -> Result<Tensor> {
    let norm = images.iter().map(|i| normalize(i, stats)).collect::<Result<Vec<_>>>()?;
    Ok(stack(&norm.iter().collect::<Vec<_>>()))
}

/// Probabilities for raw `[0, 1]` images, normalized with the model's
/// statistics.
pub fn predict_images(model: &Classifier, images: &[TensorImage]) -> Result<Vec<[f32; 2]>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let x = normalized_batch(&chunk.iter().collect::<Vec<_>>(), &model.norm_stats)?;
        out.extend(predict(model, &x).data().chunks_exact(2).map(|r| [r[0], r[1]]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub initial_lr: f64,
    pub max_lr: f64,
    pub freeze_epochs: usize,
    pub main_epochs: usize,
    pub seed: u64,
    /// Side length images are resized to before augmentation.
    pub image_size: usize,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            initial_lr: 0.001,
            max_lr: 0.006,
            freeze_epochs: 5,
            main_epochs: 30,
            seed: 0,
            image_size: 32,
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::usage(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.initial_lr > 0.0 && self.max_lr > self.initial_lr) {
            return bad("learning rates must satisfy 0 < initial_lr < max_lr");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Frozen,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub phase: Phase,
    pub epoch: usize,
    pub global_step: usize,
    pub current_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate of the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Learning rate of every optimizer step, in order.
    pub step_lrs: Vec<f64>,
}

/// Trains `model` in place; see [`train_with_observer`].
pub fn train(model: &mut Classifier, train: &Manifest, val: &Manifest, cfg: &TrainConfig) -> Result<TrainHistory> {
    train_with_observer(model, train, val, cfg, &mut |_, _, _| {})
}

/// Two-phase training. `observer` runs after every epoch with the epoch's
/// record, the schedule state and the model.
pub fn train_with_observer(
    model: &mut Classifier,
    train: &Manifest,
    val: &Manifest,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord, &ScheduleState, &Classifier),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::usage("training and validation manifests must be non-empty"));
    }
    if train.split() != Split::Train || val.split() != Split::Validation {
        return Err(Error::usage(format!(
            "expected train and validation manifests, got {} and {}",
            train.split(),
            val.split()
        )));
    }
    let images = load_images(train, cfg.image_size)?;
    let labels = train.labels();
    let real: Vec<&TensorImage> = train
        .records()
        .iter()
        .zip(&images)
        .filter(|(r, _)| r.source == Source::Real)
        .map(|(_, i)| i)
        .collect();
    model.norm_stats = if real.is_empty() {
        norm_stats_of(&images)?
    } else {
        norm_stats_of(real)?
    };
    let val_images = load_images(val, cfg.image_size)?;
    let val_labels = val.labels();

    let n = images.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let phase2_total = steps_per_epoch * cfg.main_epochs;
    if cfg.main_epochs > 0 && phase2_total < 2 {
        return Err(Error::usage("the one-cycle phase needs at least 2 optimizer steps"));
    }

    let mut adam = Adam::new(cfg.beta1, cfg.beta2);
    let mut history = TrainHistory::default();
    let mut global_step = 0;
    for epoch in 0..cfg.freeze_epochs + cfg.main_epochs {
        let phase = if epoch < cfg.freeze_epochs {
            Phase::Frozen
        } else {
            Phase::Full
        };
        model.set_backbone_trainable(phase == Phase::Full);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, "classifier-shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0f64;
        let mut lr = cfg.initial_lr;
        for chunk in order.chunks(cfg.batch_size) {
            let augmented: Vec<TensorImage> = chunk
                .iter()
                .map(|&i| {
                    let mut r = rng::stream(cfg.seed, "classifier-augment", &[epoch as u64, i as u64]);
                    augment_classifier(&images[i], &cfg.augment, &mut r)
                })
                .collect();
            let x = normalized_batch(&augmented.iter().collect::<Vec<_>>(), &model.norm_stats)?;
            let y: Vec<Label> = chunk.iter().map(|&i| labels[i]).collect();
            let logits = match phase {
                Phase::Frozen => {
                    let feats = {
                        let _g = no_grad();
                        model.features(&x, NormMode::Frozen)
                    };
                    model.head_forward(&feats)
                }
                Phase::Full => {
                    lr = one_cycle_lr(
                        global_step - cfg.freeze_epochs * steps_per_epoch,
                        phase2_total,
                        cfg.initial_lr,
                        cfg.max_lr,
                    )?;
                    model.forward(&x, NormMode::Train)
                }
            };
            let loss = cross_entropy(&logits, &y);
            if !loss.all_finite() {
                return Err(Error::NonFinite {
                    what: "classifier training loss".into(),
                    epoch,
                    step: global_step,
                    lr,
                });
            }
            let params = model.store.trainable();
            let values: Vec<Tensor> = params.iter().map(Param::value).collect();
            let grads = grad(&loss, &values.iter().collect::<Vec<_>>(), false);
            adam.step(&params, &grads, lr);
            history.step_lrs.push(lr);
            loss_sum += loss.item() as f64 * chunk.len() as f64;
            global_step += 1;
        }
        let (val_loss, val_accuracy) = evaluate_loss(model, &val_images, &val_labels)?;
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / n as f64,
            val_loss,
            val_accuracy,
            lr,
        };
        let state = ScheduleState {
            phase,
            epoch,
            global_step,
            current_lr: lr,
        };
        observer(&record, &state, model);
        history.epochs.push(record);
    }
    model.set_backbone_trainable(true);
    Ok(history)
}

/// Mean cross-entropy and accuracy of `model` on raw images.
pub fn evaluate_loss(model: &Classifier, images: &[TensorImage], labels: &[Label]) -> Result<(f64, f64)> {
    let _g = no_grad();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    for (imgs, ys) in images.chunks(EVAL_CHUNK).zip(labels.chunks(EVAL_CHUNK)) {
        let x = normalized_batch(&imgs.iter().collect::<Vec<_>>(), &model.norm_stats)?;
        let logits = model.forward(&x, NormMode::Frozen);
        loss += cross_entropy(&logits, ys).item() as f64 * ys.len() as f64;
        correct += logits
            .data()
            .chunks_exact(2)
            .zip(ys)
            .filter(|(row, y)| argmax_label(row) == **y)
            .count();
    }
    Ok((loss / labels.len() as f64, correct as f64 / labels.len() as f64))
}

/// Argmax predictions for every record of `manifest`.
pub fn predict_manifest(model: &Classifier, manifest: &Manifest, image_size: usize) -> Result<Vec<Label>> {
    let images = load_images(manifest, image_size)?;
    Ok(predict_images(model, &images)?
        .iter()
        .map(|p| argmax_label(p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad;

    #[test]
    fn softmax_closed_forms() {
        let p = softmax_rows(&Tensor::from_vec(vec![0.0, 0.0, 2.0, 0.0], &[2, 2]));
        let e2 = 2.0f64.exp();
        assert!((p.data()[0] - 0.5).abs() < 1e-7);
        assert!((p.data()[2] as f64 - e2 / (e2 + 1.0)).abs() < 1e-6);
        assert!((p.data()[3] as f64 - 1.0 / (e2 + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_scalar_oracle() {
        let logits = [1.5f32, -0.25, -3.0, 4.0];
        let ce = cross_entropy(
            &Tensor::from_vec(logits.to_vec(), &[2, 2]),
            &[Label::Negative, Label::Negative],
        );
        let nll = |a: f64, b: f64, t: f64| -(t - (a.exp() + b.exp()).ln());
        let expect = (nll(1.5, -0.25, 1.5) + nll(-3.0, 4.0, -3.0)) / 2.0;
        assert!((ce.item() as f64 - expect).abs() < 1e-6);
        assert!(ce.item() >= 0.0);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let x = Tensor::leaf(vec![0.3, -1.2], &[1, 2]);
        let g = grad(&cross_entropy(&x, &[Label::Positive]), &[&x], false);
        let p = softmax_rows(&x);
        assert!((g[0].data()[0] - p.data()[0]).abs() < 1e-6);
        assert!((g[0].data()[1] - (p.data()[1] - 1.0)).abs() < 1e-6);
    }

    #[test]
    fn argmax_ties_and_shift_invariance() {
        assert_eq!(argmax_label(&[0.5, 0.5]), Label::Negative);
        assert_eq!(argmax_label(&[0.2, 0.8]), Label::Positive);
        let a = softmax_rows(&Tensor::from_vec(vec![0.7, 1.1], &[1, 2]));
        let b = softmax_rows(&Tensor::from_vec(vec![100.7, 101.1], &[1, 2]));
        assert_eq!(argmax_label(a.data()), argmax_label(b.data()));
    }

    #[test]
    fn tiny_model_outputs_two_probabilities_per_row() {
        let model = build_model(
            &ClassifierConfig {
                width: 4,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        assert_eq!(model.output_dim(), 2);
        let x = Tensor::randn(&[3, 3, 16, 16], &mut rng::stream(0, "x", &[]));
        let p = predict(&model, &x);
        assert_eq!(p.shape(), &[3, 2]);
        for row in p.data().chunks(2) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn num_classes_other_than_two_is_rejected() {
        let cfg = ClassifierConfig {
            num_classes: 3,
            ..Default::default()
        };
        assert!(matches!(build_model(&cfg, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn config_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.freeze_epochs, c.main_epochs), (16, 5, 30));
        assert_eq!((c.beta1, c.beta2, c.initial_lr, c.max_lr), (0.9, 0.999, 0.001, 0.006));
        let bad = TrainConfig { max_lr: 0.001, ..c };
        assert!(matches!(bad.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig {
            seed: 42,
            ..Default::default()
        };
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let cc: ClassifierConfig = serde_json::from_str(r#"{"backbone":"tiny-resnet","width":8}"#).unwrap();
        assert_eq!(cc.width, 8);
        assert_eq!(cc.num_classes, 2);
    }
}
