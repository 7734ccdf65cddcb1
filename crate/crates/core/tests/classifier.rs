use std::path::Path;
use std::time::Instant;

use rand::Rng;
use synthaug_core::checkpoint;
use synthaug_core::classifier::{
    build_model, predict_manifest, train, train_with_observer, Backbone, Classifier, ClassifierConfig, Phase,
    TrainConfig, TrainHistory,
};
use synthaug_core::dataset::{ImageRecord, Label, Manifest, Source, Split};
use synthaug_core::image::TensorImage;
use synthaug_core::nn::ParamKind;
use synthaug_core::rng;
use synthaug_core::schedule::one_cycle_lr;
use synthaug_core::transforms::AugmentPolicy;
use synthaug_core::Error;

/// Bright images are positive, dark ones negative.
fn separable_set(dir: &Path, split: Split, per_class: usize, size: usize) -> Manifest {
    let mut records = Vec::new();
    for label in Label::ALL {
        for i in 0..per_class {
            let mut r = rng::stream(7, "separable", &[label.index() as u64, i as u64, split as u64]);
            let base = if label == Label::Positive { 0.75 } else { 0.25 };
            let noise: Vec<f32> = (0..size * size).map(|_| r.random_range(-0.15f32..0.15)).collect();
            let img = TensorImage::from_fn(1, size, size, |_, y, x| base + noise[y * size + x]);
            let id = format!("{split}-{label}-{i}");
            let path = dir.join(format!("{id}.png"));
            img.save_gray_png(&path).unwrap();
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
    Manifest::new(split.to_string(), split, records).unwrap()
}

fn small_cfg() -> (ClassifierConfig, TrainConfig) {
    (
        ClassifierConfig {
            width: 4,
            ..Default::default()
        },
        TrainConfig {
            image_size: 16,
            ..Default::default()
        },
    )
}

fn backbone_weights(m: &Classifier) -> Vec<(String, Vec<f32>)> {
    m.backbone_params()
        .iter()
        .map(|p| (p.name(), p.value().to_vec()))
        .collect()
}

fn head_weights(m: &Classifier) -> Vec<Vec<f32>> {
    m.head_params().iter().map(|p| p.value().to_vec()).collect()
}

#[test]
fn separable_set_is_fit_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let tr = separable_set(dir.path(), Split::Train, 16, 16);
    let val = separable_set(dir.path(), Split::Validation, 4, 16);
    let (cc, tc) = small_cfg();
    let mut model = build_model(&cc, tc.seed).unwrap();
    let t0 = Instant::now();
    let history = train(&mut model, &tr, &val, &tc).unwrap();
    eprintln!("35 epochs on 32 images: {:?}", t0.elapsed());
    assert_eq!(history.epochs.len(), 35);
    let preds = predict_manifest(&model, &tr, tc.image_size).unwrap();
    let acc = preds.iter().zip(tr.labels()).filter(|(p, t)| **p == *t).count() as f64 / tr.len() as f64;
    assert_eq!(acc, 1.0);
}

#[test]
fn freeze_phase_leaves_backbone_untouched_and_schedule_is_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let tr = separable_set(dir.path(), Split::Train, 10, 16);
    let val = separable_set(dir.path(), Split::Validation, 2, 16);
    let (cc, mut tc) = small_cfg();
    tc.main_epochs = 2;
    tc.seed = 3;
    let mut model = build_model(&cc, tc.seed).unwrap();
    let init_backbone = backbone_weights(&model);
    let init_head = head_weights(&model);
    let mut after_phase1 = None;
    let history = train_with_observer(&mut model, &tr, &val, &tc, &mut |rec, state, m| {
        assert_eq!(state.phase == Phase::Frozen, state.epoch < tc.freeze_epochs);
        assert!(state.current_lr > 0.0);
        if rec.epoch + 1 == tc.freeze_epochs {
            after_phase1 = Some((backbone_weights(m), head_weights(m)));
        }
    })
    .unwrap();
    let (bb1, head1) = after_phase1.unwrap();
    for ((name, a), (_, b)) in init_backbone.iter().zip(&bb1) {
        let max_diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert_eq!(max_diff, 0.0, "{name} moved during the frozen phase");
        assert_eq!(a, b);
    }
    assert_ne!(init_head, head1);
    let end = backbone_weights(&model);
    let moved = model
        .backbone_params()
        .iter()
        .zip(bb1.iter().zip(&end))
        .filter(|(p, _)| p.kind() == ParamKind::Weight)
        .filter(|(_, ((_, a), (_, b)))| a != b)
        .count();
    assert!(moved > 0);

    let per_epoch = tr.len().div_ceil(tc.batch_size);
    assert_eq!(history.step_lrs.len(), per_epoch * (tc.freeze_epochs + tc.main_epochs));
    let (frozen, full) = history.step_lrs.split_at(per_epoch * tc.freeze_epochs);
    assert!(frozen.iter().all(|&lr| lr == tc.initial_lr));
    for (s, &lr) in full.iter().enumerate() {
        assert_eq!(lr, one_cycle_lr(s, full.len(), tc.initial_lr, tc.max_lr).unwrap());
    }
}

fn run(tr: &Manifest, val: &Manifest, tc: &TrainConfig) -> TrainHistory {
    let (cc, _) = small_cfg();
    let mut model = build_model(&cc, tc.seed).unwrap();
    train(&mut model, tr, val, tc).unwrap()
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let tr = separable_set(dir.path(), Split::Train, 6, 16);
    let val = separable_set(dir.path(), Split::Validation, 2, 16);
    let tc = TrainConfig {
        image_size: 16,
        freeze_epochs: 1,
        main_epochs: 2,
        ..Default::default()
    };
    let a = run(&tr, &val, &tc);
    let b = run(&tr, &val, &tc);
    let losses = |h: &TrainHistory| {
        h.epochs
            .iter()
            .map(|e| (e.train_loss.to_bits(), e.val_loss.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&a), losses(&b));
    let c = run(&tr, &val, &TrainConfig { seed: 1, ..tc });
    assert_ne!(losses(&a), losses(&c));
}

#[test]
fn manifest_preconditions() {
    let dir = tempfile::tempdir().unwrap();
    let tr = separable_set(dir.path(), Split::Train, 2, 8);
    let val = separable_set(dir.path(), Split::Validation, 1, 8);
    let (cc, tc) = small_cfg();
    let mut model = build_model(&cc, 0).unwrap();
    let empty = Manifest::new("empty", Split::Train, vec![]).unwrap();
    assert!(matches!(train(&mut model, &empty, &val, &tc), Err(Error::Usage(_))));
    assert!(matches!(train(&mut model, &tr, &tr, &tc), Err(Error::Usage(_))));
    let tc = TrainConfig {
        augment: AugmentPolicy::identity(),
        ..tc
    };
    assert!(matches!(train(&mut model, &val, &val, &tc), Err(Error::Usage(_))));
}

#[test]
fn pretrained_backbone_loads_and_head_is_fresh() {
    let dir = tempfile::tempdir().unwrap();
    let (cc, _) = small_cfg();
    let donor = build_model(&cc, 11).unwrap();
    let path = dir.path().join("donor.safetensors");
    checkpoint::save_tensors(&path, &donor.store.named_tensors()).unwrap();
    let model = build_model(
        &ClassifierConfig {
            pretrained_weights: Some(path.clone()),
            ..cc.clone()
        },
        12,
    )
    .unwrap();
    assert_eq!(backbone_weights(&model), backbone_weights(&donor));
    assert_ne!(head_weights(&model), head_weights(&donor));
    assert_eq!(model.output_dim(), 2);

    let mut tensors = donor.store.named_tensors();
    tensors.push((
        "backbone.extra.weight".into(),
        synthaug_core::tensor::Tensor::zeros(&[2]),
    ));
    checkpoint::save_tensors(&path, &tensors).unwrap();
    let err = build_model(
        &ClassifierConfig {
            pretrained_weights: Some(path.clone()),
            ..cc.clone()
        },
        0,
    )
    .err()
    .unwrap();
    assert!(err.to_string().contains("backbone.extra.weight"), "{err}");

    let wide = build_model(&ClassifierConfig { width: 8, ..cc.clone() }, 0).unwrap();
    checkpoint::save_tensors(&path, &wide.store.named_tensors()).unwrap();
    let err = build_model(
        &ClassifierConfig {
            pretrained_weights: Some(path),
            ..cc
        },
        0,
    )
    .err()
    .unwrap();
    assert!(err.to_string().contains("backbone.conv1.weight"), "{err}");
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (cc, tc) = small_cfg();
    let mut model = build_model(&cc, 5).unwrap();
    model.norm_stats.mean = vec![0.1, 0.2, 0.3];
    let path = dir.path().join("clf.safetensors");
    model.save(&path, Some(&tc), &TrainHistory::default()).unwrap();
    let (back, sidecar) = Classifier::load(&path).unwrap();
    assert_eq!(back.store.snapshot(), model.store.snapshot());
    assert_eq!(back.norm_stats, model.norm_stats);
    assert_eq!(sidecar.config.train, Some(tc));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("clf.json")).unwrap()).unwrap();
    for key in ["config", "norm_stats", "history"] {
        assert!(json.get(key).is_some(), "sidecar lacks {key}");
    }
}

/// Learned-parameter count of the 50-layer bottleneck network, tallied
/// from its layer table: 7×7 stem, stages of [3, 4, 6, 3] bottlenecks with
/// widths [64, 128, 256, 512] and expansion 4, every convolution followed
/// by a batch norm (scale and shift), and a `2048 × classes` linear head.
fn resnet50_param_oracle(classes: usize) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let bn = |c: usize| 2 * c;
    let mut total = conv(3, 64, 7) + bn(64);
    let mut cin = 64;
    for (blocks, width) in [(3, 64), (4, 128), (6, 256), (3, 512)] {
        for b in 0..blocks {
            total += conv(cin, width, 1) + bn(width);
            total += conv(width, width, 3) + bn(width);
            total += conv(width, 4 * width, 1) + bn(4 * width);
            if b == 0 {
                total += conv(cin, 4 * width, 1) + bn(4 * width);
            }
            cin = 4 * width;
        }
    }
    total + 2048 * classes + classes
}

#[test]
fn reference_resnet50_parameter_count() {
    assert_eq!(resnet50_param_oracle(1000), 25_557_032);
    let model = build_model(
        &ClassifierConfig {
            backbone: Backbone::ReferenceResnet50Shape,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(model.num_parameters(), resnet50_param_oracle(2));
    assert_eq!(model.num_parameters(), 23_512_130);
    assert_eq!(model.output_dim(), 2);
    let x = synthaug_core::tensor::Tensor::zeros(&[1, 3, 32, 32]);
    let p = synthaug_core::classifier::predict(&model, &x);
    assert_eq!(p.shape(), &[1, 2]);
}
