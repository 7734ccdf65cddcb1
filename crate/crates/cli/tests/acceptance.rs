//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 3 6`.

// `!(a <= b)` checks are deliberate: they also fail on NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;

use synthaug_cli::{Arm, ArmConfigs, DataConfig, Experiment, ExperimentConfig, GanPair, RunOptions};
use synthaug_core::classifier::{build_model, train_with_observer, ClassifierConfig, Phase, TrainConfig};
use synthaug_core::dataset::{check_disjoint, class_counts, merge, ImageRecord, Label, Manifest, Source, Split};
use synthaug_core::diffaug::{DiffAugOp, DiffAugPolicy};
use synthaug_core::gan::{r1_penalty, train_gan_on_images, Critic, GanConfig, GanTrainer};
use synthaug_core::image::TensorImage;
use synthaug_core::metrics::{compare, report, ConfusionMatrix, EvalReport};
use synthaug_core::nn::ParamKind;
use synthaug_core::rng;
use synthaug_core::schedule::one_cycle_lr;
use synthaug_core::synthesis::{generate_class, SynthesisParams};
use synthaug_core::tensor::{grad, Tensor};
use synthaug_core::toy::ToySpec;

const METRIC_TOL: f64 = 5e-5;
const LR_TOL: f64 = 1e-12;
const JVP_STEP: f32 = 1e-3;
const JVP_REL_TOL: f32 = 1e-3;
const R1_TOL: f32 = 1e-4;
const CONVERGENCE_TOL: f32 = 0.1;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn within_budget(start: Instant, budget: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure!(
        t < budget,
        "took {:.1} s, budget {:.0} s",
        t.as_secs_f64(),
        budget.as_secs_f64()
    );
    Ok(t)
}

// 1 ------------------------------------------------------------------------

fn table2_arithmetic() -> Check {
    let t0 = Instant::now();
    // Published testing-data rows: accuracy, F1, precision, recall (pos, neg).
    let rows = [
        (
            ConfusionMatrix::new(84, 26, 9, 214),
            [0.8949, 0.8276, 0.9244, 0.9032, 0.8917, 0.7636, 0.9596],
        ),
        (
            ConfusionMatrix::new(105, 5, 20, 203),
            [0.9249, 0.8936, 0.9420, 0.8400, 0.9760, 0.9545, 0.9103],
        ),
    ];
    let mut reports = Vec::new();
    for (cm, cells) in rows {
        let r = report(&cm, "model", "test").map_err(|e| e.to_string())?;
        let (p, n) = (r.class(Label::Positive), r.class(Label::Negative));
        let got = [r.accuracy, p.f1, n.f1, p.precision, n.precision, p.recall, n.recall];
        for (g, want) in got.iter().zip(cells) {
            ensure!((g - want).abs() <= METRIC_TOL, "{cm:?}: {g} vs published {want}");
        }
        reports.push(r);
    }
    let d = compare(&reports[0], &reports[1]).map_err(|e| e.to_string())?;
    let prec = format!("{:.2}", d.per_class[&Label::Positive].precision);
    let rec = format!("{:.2}", d.per_class[&Label::Positive].recall);
    let acc = format!("{:.2}", d.accuracy);
    ensure!(prec == "-6.32", "precision delta {prec}");
    ensure!(acc == "3.00", "accuracy delta {acc}");
    ensure!(rec == "19.09", "recall delta {rec}");
    let t = within_budget(t0, Duration::from_secs(1))?;
    Ok(format!(
        "14 cells within {METRIC_TOL:e}; deltas {prec} / {acc} pp ({:.3} s)",
        t.as_secs_f64()
    ))
}

// 2 ------------------------------------------------------------------------

fn records(prefix: &str, positive: usize, negative: usize, source: Source) -> Vec<ImageRecord> {
    [(Label::Positive, positive), (Label::Negative, negative)]
        .into_iter()
        .flat_map(|(label, n)| {
            (0..n).map(move |i| {
                let id = format!("{prefix}{label}:{i}");
                ImageRecord {
                    record_id: id.clone(),
                    patient_id: id.clone(),
                    path: PathBuf::from(format!("{id}.png")),
                    label,
                    source,
                    view: None,
                }
            })
        })
        .collect()
}

fn dataset_bookkeeping() -> Check {
    let t0 = Instant::now();
    let e = |e: synthaug_core::Error| e.to_string();
    let real = Manifest::new("train", Split::Train, records("train-", 2158, 13794, Source::Real)).map_err(e)?;
    let syn = Manifest::new(
        "synthetic",
        Split::Train,
        records("syn:", 10000, 10000, Source::Synthetic),
    )
    .map_err(e)?;
    let merged = merge(&real, &syn).map_err(e)?;
    let c = class_counts(&merged);
    ensure!((c.positive, c.negative) == (12158, 23794), "merged counts {c:?}");
    let test = Manifest::new("test", Split::Test, records("test-", 110, 223, Source::Real)).map_err(e)?;
    let shared = check_disjoint(&real, &test);
    ensure!(shared.is_empty(), "{} shared patients", shared.len());
    let t = within_budget(t0, Duration::from_secs(1))?;
    Ok(format!(
        "merged ({}, {}), train/test disjoint ({:.3} s)",
        c.positive,
        c.negative,
        t.as_secs_f64()
    ))
}

// 3 ------------------------------------------------------------------------

/// Bright images are positive, dark ones negative.
fn separable_set(dir: &Path, split: Split, per_class: usize, size: usize) -> Manifest {
    let mut recs = Vec::new();
    for label in Label::ALL {
        for i in 0..per_class {
            let mut r = rng::stream(
                7,
                "acceptance-separable",
                &[label.index() as u64, i as u64, split as u64],
            );
            let base = if label == Label::Positive { 0.75 } else { 0.25 };
            let noise: Vec<f32> = (0..size * size).map(|_| r.random_range(-0.15f32..0.15)).collect();
            let img = TensorImage::from_fn(1, size, size, |_, y, x| base + noise[y * size + x]);
            let id = format!("{split}-{label}-{i}");
            let path = dir.join(format!("{id}.png"));
            img.save_gray_png(&path).unwrap();
            recs.push(ImageRecord {
                record_id: id.clone(),
                patient_id: id,
                path,
                label,
                source: Source::Real,
                view: None,
            });
        }
    }
    Manifest::new(split.to_string(), split, recs).unwrap()
}

fn schedule_suite() -> Check {
    let t0 = Instant::now();
    let (init, max, total) = (0.001, 0.006, 1000);
    let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, init, max).unwrap()).collect();
    ensure!((lrs[0] - init).abs() <= LR_TOL, "first lr {}", lrs[0]);
    ensure!((lrs[300] - max).abs() <= LR_TOL, "lr at step 300 is {}", lrs[300]);
    ensure!((lrs[total - 1] - 1e-5).abs() <= LR_TOL, "last lr {}", lrs[total - 1]);
    let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
    let at_peak: Vec<usize> = (0..total).filter(|&s| lrs[s] == peak).collect();
    ensure!(at_peak == [300], "maximum reached at steps {at_peak:?}");
    ensure!(lrs[..=300].windows(2).all(|w| w[0] < w[1]), "warmup is not increasing");
    ensure!(
        lrs[300..].windows(2).all(|w| w[0] > w[1]),
        "annealing is not decreasing"
    );

    let dir = tempfile::tempdir().unwrap();
    let train = separable_set(dir.path(), Split::Train, 5, 8);
    let val = separable_set(dir.path(), Split::Validation, 1, 8);
    let tc = TrainConfig {
        image_size: 8,
        batch_size: 4,
        freeze_epochs: 1,
        main_epochs: 3,
        ..Default::default()
    };
    let mut model = build_model(
        &ClassifierConfig {
            width: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let history = train_with_observer(&mut model, &train, &val, &tc, &mut |_, _, _| {}).map_err(|e| e.to_string())?;
    let per_epoch = train.len().div_ceil(tc.batch_size);
    let (frozen, full) = history.step_lrs.split_at(per_epoch * tc.freeze_epochs);
    ensure!(
        frozen.iter().all(|&lr| lr == tc.initial_lr),
        "frozen-phase lr log {frozen:?}"
    );
    for (s, &lr) in full.iter().enumerate() {
        let want = one_cycle_lr(s, full.len(), tc.initial_lr, tc.max_lr).unwrap();
        ensure!(lr == want, "step {s}: logged {lr}, closed form {want}");
    }
    let t = within_budget(t0, Duration::from_secs(1))?;
    Ok(format!(
        "0.001 -> 0.006 at 300 -> 1e-5; {} logged steps match ({:.3} s)",
        history.step_lrs.len(),
        t.as_secs_f64()
    ))
}

// 4 ------------------------------------------------------------------------

fn freeze_invariant() -> Check {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train = separable_set(dir.path(), Split::Train, 8, 16);
    let val = separable_set(dir.path(), Split::Validation, 2, 16);
    let tc = TrainConfig {
        image_size: 16,
        freeze_epochs: 5,
        main_epochs: 2,
        ..Default::default()
    };
    let mut model = build_model(
        &ClassifierConfig {
            width: 4,
            ..Default::default()
        },
        1,
    )
    .unwrap();
    let snapshot = |m: &synthaug_core::classifier::Classifier| -> Vec<(String, ParamKind, Vec<u32>)> {
        m.backbone_params()
            .iter()
            .map(|p| {
                (
                    p.name(),
                    p.kind(),
                    p.value().data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect()
    };
    let head = |m: &synthaug_core::classifier::Classifier| -> Vec<Vec<f32>> {
        m.head_params().iter().map(|p| p.value().to_vec()).collect()
    };
    let (bb0, head0) = (snapshot(&model), head(&model));
    let mut after_frozen = None;
    let mut phases = Vec::new();
    train_with_observer(&mut model, &train, &val, &tc, &mut |rec, _, m| {
        phases.push(rec.phase);
        if rec.epoch + 1 == tc.freeze_epochs {
            after_frozen = Some((snapshot(m), head(m)));
        }
    })
    .map_err(|e| e.to_string())?;
    let (bb5, head5) = after_frozen.ok_or("no frozen-phase snapshot")?;
    ensure!(
        phases.iter().take(5).all(|p| *p == Phase::Frozen),
        "first five epochs were {:?}",
        &phases[..5]
    );
    for (a, b) in bb0.iter().zip(&bb5) {
        ensure!(a == b, "{} changed during the frozen phase", a.0);
    }
    ensure!(head0 != head5, "head did not change during the frozen phase");
    let bb_end = snapshot(&model);
    let moved = bb5
        .iter()
        .zip(&bb_end)
        .filter(|(a, b)| a.1 == ParamKind::Weight && a.2 != b.2)
        .count();
    ensure!(moved > 0, "no backbone tensor changed in phase 2");
    let t = within_budget(t0, Duration::from_secs(30))?;
    Ok(format!(
        "{} backbone tensors bit-identical after 5 frozen epochs, {moved} moved in phase 2 ({:.2} s)",
        bb0.len(),
        t.as_secs_f64()
    ))
}

// 5 ------------------------------------------------------------------------

fn norm(x: &[f32]) -> f32 {
    x.iter().map(|v| v * v).sum::<f32>().sqrt()
}

/// Relative error between the autodiff JVP and central differences for
/// one policy, on an 8×8 batch.
fn jvp_error(policy: &DiffAugPolicy, seed: u64) -> f32 {
    let shape = [4, 3, 8, 8];
    let x = Tensor::randn(&shape, &mut rng::stream(seed, "jvp-x", &[])).scale(0.5);
    let v = Tensor::randn(&shape, &mut rng::stream(seed, "jvp-v", &[]));
    let draw = policy.sample(4, 8, 8, &mut rng::stream(seed, "jvp-draw", &[]));

    // J v via two reverse passes: u -> J^T u is linear in u, and the
    // gradient of <J^T u, v> with respect to u is J v.
    let xg = x.detach().requires_grad_();
    let y = draw.apply(&xg);
    let u = Tensor::zeros(y.shape()).requires_grad_();
    let vjp = grad(&y.mul(&u).sum(), &[&xg], true).remove(0);
    let jvp = grad(&vjp.mul(&v).sum(), &[&u], false).remove(0);

    let plus = draw.apply(&x.add(&v.scale(JVP_STEP)));
    let minus = draw.apply(&x.sub(&v.scale(JVP_STEP)));
    let fd = plus.sub(&minus).scale(0.5 / JVP_STEP);
    let diff: Vec<f32> = jvp.data().iter().zip(fd.data()).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(fd.data()).max(f32::MIN_POSITIVE)
}

fn differentiable_augmentation() -> Check {
    let t0 = Instant::now();
    let policies = [
        (
            "color",
            DiffAugPolicy {
                ops: vec![DiffAugOp::color()],
            },
        ),
        (
            "translation",
            DiffAugPolicy {
                ops: vec![DiffAugOp::Translation { fraction: 0.125 }],
            },
        ),
        (
            "cutout",
            DiffAugPolicy {
                ops: vec![DiffAugOp::Cutout { fraction: 0.5 }],
            },
        ),
        ("full policy", DiffAugPolicy::default()),
    ];
    let mut worst: f32 = 0.0;
    for (name, policy) in &policies {
        for seed in 0..3 {
            let err = jvp_error(policy, seed);
            ensure!(err <= JVP_REL_TOL, "{name}, seed {seed}: relative error {err:e}");
            worst = worst.max(err);
        }
    }
    let cfg = GanConfig {
        resolution: 8,
        latent_dim: 8,
        channels_base: 64,
        channels_max: 8,
        batch_size: 4,
        ..Default::default()
    };
    let trainer = GanTrainer::new(&cfg, Label::Positive).map_err(|e| e.to_string())?;
    let (_, params, grads, draw, _) = trainer.generator_loss_and_grads(4);
    ensure!(draw.ops.len() == 3, "generator step used {} ops", draw.ops.len());
    for (p, g) in params.iter().zip(&grads) {
        ensure!(
            norm(g.data()) > 0.0,
            "generator parameter {} has a zero gradient",
            p.name()
        );
    }
    let t = within_budget(t0, Duration::from_secs(30))?;
    Ok(format!(
        "worst JVP relative error {worst:.1e}; {} generator tensors with nonzero gradient ({:.2} s)",
        params.len(),
        t.as_secs_f64()
    ))
}

// 6 ------------------------------------------------------------------------

struct PixelSum;

impl Critic for PixelSum {
    fn score(&self, x: &Tensor) -> Tensor {
        let n = x.dim(0);
        x.reshape(&[n, x.numel() / n]).sum_to(&[n, 1])
    }
}

fn r1_oracle() -> Check {
    let x = Tensor::randn(&[1, 3, 8, 8], &mut rng::stream(0, "r1-x", &[]));
    let r1 = r1_penalty(&PixelSum, &x, 10.0).item();
    ensure!((r1 - 960.0).abs() <= R1_TOL, "penalty {r1}");
    Ok(format!("penalty {r1}"))
}

// 7 ------------------------------------------------------------------------

fn degenerate_convergence() -> Check {
    let t0 = Instant::now();
    let level = 0.3f32;
    let corpus = vec![TensorImage::filled(1, 16, 16, level); 8];
    let cfg = GanConfig {
        resolution: 16,
        channels_max: 16,
        total_steps: 2000,
        seed: 7,
        ..Default::default()
    };
    let run =
        || train_gan_on_images(&corpus, Label::Negative, &cfg, None, &mut |_, _| Ok(())).map_err(|e| e.to_string());
    let (g1, h1) = run()?;
    ensure!(h1.losses.len() == 2000, "{} steps recorded", h1.losses.len());
    let finite = h1
        .losses
        .iter()
        .all(|l| l.d_loss.is_finite() && l.g_loss.is_finite() && l.r1.is_none_or(f32::is_finite));
    ensure!(finite, "non-finite loss in the sequence");
    let images = generate_class(&g1, 64, 0);
    let mean = images.iter().flat_map(|im| im.data.iter()).sum::<f32>()
        / images.iter().map(|im| im.data.len()).sum::<usize>() as f32;
    ensure!(
        (mean - level).abs() <= CONVERGENCE_TOL,
        "mean generated pixel {mean:.4}, corpus {level}"
    );
    let (g2, h2) = run()?;
    ensure!(h1 == h2, "loss sequences differ between reruns");
    ensure!(
        g1.store.snapshot() == g2.store.snapshot(),
        "generator weights differ between reruns"
    );
    let t = within_budget(t0, Duration::from_secs(600))?;
    Ok(format!(
        "mean generated pixel {mean:.4} vs {level}; 2000 finite steps, reruns identical ({:.0} s)",
        t.as_secs_f64()
    ))
}

// 8, 9 ---------------------------------------------------------------------

/// Desk-scale experiment on the 64×64 toy corpus with 200:30 imbalance.
fn desk_config(out: &Path) -> ExperimentConfig {
    let gan = GanConfig {
        resolution: 32,
        channels_max: 16,
        total_steps: 1000,
        ..Default::default()
    };
    ExperimentConfig {
        output_dir: out.to_path_buf(),
        seed: 0,
        data: DataConfig {
            // Faint lesions keep real-only recall well below 1.
            toy: Some(ToySpec {
                opacity: [0.06, 0.16],
                ..Default::default()
            }),
            ..Default::default()
        },
        classifier: ClassifierConfig::default(),
        arms: ArmConfigs::same(TrainConfig {
            image_size: 32,
            ..Default::default()
        }),
        gan: GanPair::same(gan),
        synthesis: SynthesisParams {
            n_per_class: 500,
            ..Default::default()
        },
        log_every: 250,
    }
}

fn run_desk(out: &Path, seed: u64) -> Result<Experiment, String> {
    let exp = Experiment::new(desk_config(out).with_seed(seed), RunOptions::default()).map_err(|e| e.to_string())?;
    exp.run().map_err(|e| e.to_string())?;
    Ok(exp)
}

/// Seed-0 run shared by criteria 8 and 9.
struct Shared {
    root: tempfile::TempDir,
}

impl Shared {
    fn dir(&self, seed: u64) -> PathBuf {
        self.root.path().join(format!("seed{seed}"))
    }
}

fn recall(r: &EvalReport) -> f64 {
    r.class(Label::Positive).recall
}

type Criterion<'a> = Box<dyn Fn() -> Check + 'a>;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn toy_ab(shared: &Shared) -> Check {
    let t0 = Instant::now();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for seed in 0..3 {
        let exp = run_desk(&shared.dir(seed), seed)?;
        let hashes: Vec<String> = Arm::ALL
            .iter()
            .map(|&arm| {
                let info: serde_json::Value =
                    serde_json::from_str(&std::fs::read_to_string(exp.layout.arm_info(arm)).unwrap()).unwrap();
                info["train_config_hash"].as_str().unwrap().to_string()
            })
            .collect();
        ensure!(
            hashes[0] == hashes[1],
            "seed {seed}: arms trained with different settings"
        );
        let counts = class_counts(&exp.arm_manifest(Arm::Augmented).map_err(|e| e.to_string())?);
        ensure!(
            (counts.positive, counts.negative) == (530, 700),
            "seed {seed}: augmented arm counts {counts:?}"
        );
        a.push(recall(&exp.read_report(Arm::Baseline).map_err(|e| e.to_string())?));
        b.push(recall(&exp.read_report(Arm::Augmented).map_err(|e| e.to_string())?));
    }
    let (ma, mb) = (median(a.clone()), median(b.clone()));
    ensure!(
        mb >= ma,
        "median minority recall: augmented {mb:.4} < real-only {ma:.4} (per seed {a:?} vs {b:?})"
    );
    let t = within_budget(t0, Duration::from_secs(45 * 60))?;
    Ok(format!(
        "median minority recall real-only {ma:.4}, augmented {mb:.4} (per seed {a:?} vs {b:?}; {:.0} s)",
        t.as_secs_f64()
    ))
}

/// Reports and manifests of an experiment directory, by relative path.
fn artifacts(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for rel in [
        "data/train.csv",
        "data/val.csv",
        "data/test.csv",
        "synthetic/manifest.csv",
        "reports/baseline.json",
        "reports/augmented.json",
        "reports/delta.json",
    ] {
        out.push((rel.to_string(), std::fs::read(root.join(rel)).unwrap_or_default()));
    }
    out
}

fn determinism(shared: &Shared) -> Check {
    let t0 = Instant::now();
    let first = shared.dir(0);
    if !first.join("reports/_DONE").exists() {
        run_desk(&first, 0)?;
    }
    let second = shared.root.path().join("seed0-rerun");
    run_desk(&second, 0)?;
    let (a, b) = (artifacts(&first), artifacts(&second));
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        ensure!(!x.is_empty(), "{name} missing");
        ensure!(x == y, "{name} differs between runs");
    }
    Ok(format!(
        "{} reports and manifests byte-identical ({:.0} s)",
        a.len(),
        t0.elapsed().as_secs_f64()
    ))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let shared = Shared {
        root: tempfile::tempdir().unwrap(),
    };
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "metric arithmetic", Box::new(table2_arithmetic)),
        (2, "dataset bookkeeping", Box::new(dataset_bookkeeping)),
        (3, "one-cycle schedule", Box::new(schedule_suite)),
        (4, "freeze invariant", Box::new(freeze_invariant)),
        (5, "differentiable augmentation", Box::new(differentiable_augmentation)),
        (6, "R1 oracle", Box::new(r1_oracle)),
        (7, "degenerate GAN convergence", Box::new(degenerate_convergence)),
        (8, "toy A/B experiment", Box::new(|| toy_ab(&shared))),
        (9, "end-to-end determinism", Box::new(|| determinism(&shared))),
    ];
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !wanted(*n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS - {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL - {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
