//! The staged pipeline: prepare data, train one GAN per class, synthesize,
//! train both classifier arms, evaluate and compare.
//!
//! Each stage owns one directory under the output root. A stage is complete
//! when its `_DONE` file holds the stage's input hash, which covers the
//! relevant config and the hashes of upstream stages. `_STARTED` records
//! the hash an interrupted attempt was working towards, so `--resume` only
//! reuses partial outputs produced for the same inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use synthaug_core::checkpoint::{read_json, write_atomic, write_json};
use synthaug_core::classifier::{build_model, predict_manifest, train_with_observer, Phase};
use synthaug_core::dataset::{check_disjoint, class_counts, load_manifest, merge, Label, Manifest, Split};
use synthaug_core::gan::{train_gan_with, GeneratorBundle};
use synthaug_core::metrics::{compare, confusion, render_delta, render_table, report, DeltaReport, EvalReport};
use synthaug_core::synthesis::{run_job, SynthesisJob};
use synthaug_core::toy::write_toy_corpus;

use crate::config::{sha256_hex, train_config_hash, Arm, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::events::emit;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    Gan(Label),
    Synthesize,
    Classifier(Arm),
    Report,
}

impl Stage {
    pub const ORDER: [Stage; 7] = [
        Stage::Prepare,
        Stage::Gan(Label::Positive),
        Stage::Gan(Label::Negative),
        Stage::Synthesize,
        Stage::Classifier(Arm::Baseline),
        Stage::Classifier(Arm::Augmented),
        Stage::Report,
    ];

    pub fn name(self) -> String {
        match self {
            Stage::Prepare => "prepare-data".into(),
            Stage::Gan(l) => format!("train-gan-{l}"),
            Stage::Synthesize => "synthesize".into(),
            Stage::Classifier(a) => format!("train-classifier-{}", a.as_str()),
            Stage::Report => "report".into(),
        }
    }
}

/// File locations inside an experiment directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Prepare => self.root.join("data"),
            Stage::Gan(l) => self.root.join("gan").join(l.as_str()),
            Stage::Synthesize => self.root.join("synthetic"),
            Stage::Classifier(a) => self.root.join("classifier").join(a.as_str()),
            Stage::Report => self.root.join("reports"),
        }
    }

    pub fn manifest(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "train.csv",
            Split::Validation => "val.csv",
            Split::Test => "test.csv",
        };
        self.stage_dir(Stage::Prepare).join(name)
    }

    pub fn generator(&self, label: Label) -> PathBuf {
        self.stage_dir(Stage::Gan(label)).join("generator.safetensors")
    }

    pub fn synthetic_manifest(&self) -> PathBuf {
        self.stage_dir(Stage::Synthesize).join("manifest.csv")
    }

    pub fn model(&self, arm: Arm) -> PathBuf {
        self.stage_dir(Stage::Classifier(arm)).join("model.safetensors")
    }

    pub fn predictions(&self, arm: Arm) -> PathBuf {
        self.stage_dir(Stage::Classifier(arm)).join("predictions.csv")
    }

    pub fn arm_info(&self, arm: Arm) -> PathBuf {
        self.stage_dir(Stage::Classifier(arm)).join("arm.json")
    }

    pub fn report(&self, arm: Arm) -> PathBuf {
        self.stage_dir(Stage::Report).join(format!("{}.json", arm.as_str()))
    }

    pub fn delta(&self) -> PathBuf {
        self.stage_dir(Stage::Report).join("delta.json")
    }
}

/// What a classifier arm trained on, written next to its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmInfo {
    pub arm: Arm,
    pub train_config_hash: String,
    pub train_manifest: String,
    pub train_counts: synthaug_core::dataset::ClassCounts,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep partial outputs of an interrupted stage with unchanged inputs.
    pub resume: bool,
    /// Train the two GANs in separate child processes at the same time.
    /// Needs `config_path`, which the children re-read.
    pub parallel_gans: bool,
    pub config_path: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<String>,
    pub skipped: Vec<String>,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub opts: RunOptions,
}

fn read_marker(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    synthaug_core::Error::io(path, e).into()
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig, opts: RunOptions) -> CliResult<Self> {
        cfg.validate()?;
        let layout = Layout {
            root: cfg.output_dir.clone(),
        };
        Ok(Experiment { cfg, layout, opts })
    }

    /// Input hash of `stage`, chained through its upstream stages.
    pub fn stage_hash(&self, stage: Stage) -> CliResult<String> {
        let cfg = &self.cfg;
        let inputs = match stage {
            Stage::Prepare => {
                let mut files = BTreeMap::new();
                for m in [
                    &cfg.data.train_manifest,
                    &cfg.data.val_manifest,
                    &cfg.data.test_manifest,
                ]
                .into_iter()
                .flatten()
                {
                    let bytes = fs::read(m).map_err(|e| io_err(m, e))?;
                    files.insert(m.display().to_string(), sha256_hex(&bytes));
                }
                json!({"data": cfg.data, "files": files})
            }
            Stage::Gan(l) => json!({"data": self.stage_hash(Stage::Prepare)?, "gan": cfg.gan.get(l)}),
            Stage::Synthesize => json!({
                "positive": self.stage_hash(Stage::Gan(Label::Positive))?,
                "negative": self.stage_hash(Stage::Gan(Label::Negative))?,
                "synthesis": cfg.synthesis,
            }),
            Stage::Classifier(arm) => {
                let synthetic = match arm {
                    Arm::Baseline => None,
                    Arm::Augmented => Some(self.stage_hash(Stage::Synthesize)?),
                };
                json!({
                    "data": self.stage_hash(Stage::Prepare)?,
                    "synthetic": synthetic,
                    "classifier": cfg.classifier,
                    "train": train_config_hash(cfg.arms.get(arm)),
                })
            }
            Stage::Report => json!({
                "baseline": self.stage_hash(Stage::Classifier(Arm::Baseline))?,
                "augmented": self.stage_hash(Stage::Classifier(Arm::Augmented))?,
            }),
        };
        let doc = json!({"stage": stage.name(), "inputs": inputs});
        Ok(sha256_hex(doc.to_string().as_bytes()))
    }

    pub fn is_done(&self, stage: Stage) -> CliResult<bool> {
        let marker = self.layout.stage_dir(stage).join("_DONE");
        Ok(read_marker(&marker).as_deref() == Some(self.stage_hash(stage)?.as_str()))
    }

    fn require_done(&self, stages: &[Stage]) -> CliResult<()> {
        for &s in stages {
            if !self.is_done(s)? {
                return Err(CliError::config(format!(
                    "stage {} has not completed for this configuration; run it first",
                    s.name()
                )));
            }
        }
        Ok(())
    }

    fn upstream(stage: Stage) -> Vec<Stage> {
        match stage {
            Stage::Prepare => vec![],
            Stage::Gan(_) | Stage::Classifier(Arm::Baseline) => vec![Stage::Prepare],
            Stage::Synthesize => vec![Stage::Gan(Label::Positive), Stage::Gan(Label::Negative)],
            Stage::Classifier(Arm::Augmented) => vec![Stage::Prepare, Stage::Synthesize],
            Stage::Report => vec![Stage::Classifier(Arm::Baseline), Stage::Classifier(Arm::Augmented)],
        }
    }

    /// Runs `stage` unless it is already complete (or `force` is set).
    /// Returns whether it ran.
    pub fn execute(&self, stage: Stage, force: bool) -> CliResult<bool> {
        let name = stage.name();
        let wrap = |e: CliError| e.in_stage(&name);
        self.require_done(&Self::upstream(stage)).map_err(wrap)?;
        let hash = self.stage_hash(stage).map_err(wrap)?;
        let dir = self.layout.stage_dir(stage);
        let (done, started) = (dir.join("_DONE"), dir.join("_STARTED"));
        if !force && read_marker(&done).as_deref() == Some(hash.as_str()) {
            emit(&name, "skip", json!({"hash": hash}));
            return Ok(false);
        }
        let keep = self.opts.resume && read_marker(&started).as_deref() == Some(hash.as_str());
        if !keep && dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(io_err(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(io_err(&dir, e)))?;
        if done.exists() {
            fs::remove_file(&done).map_err(|e| wrap(io_err(&done, e)))?;
        }
        write_atomic(&started, hash.as_bytes()).map_err(|e| wrap(e.into()))?;
        emit(&name, "start", json!({"hash": hash, "resumed": keep}));
        let t0 = Instant::now();
        let result = match stage {
            Stage::Prepare => self.prepare(&dir),
            Stage::Gan(l) => self.train_gan(l, &dir),
            Stage::Synthesize => self.synthesize(&dir),
            Stage::Classifier(a) => self.train_classifier(a, &dir),
            Stage::Report => self.report(),
        };
        if let Err(e) = result {
            emit(&name, "failed", json!({"error": e.to_string()}));
            return Err(wrap(e));
        }
        write_atomic(&done, hash.as_bytes()).map_err(|e| wrap(e.into()))?;
        emit(&name, "done", json!({"seconds": t0.elapsed().as_secs_f64()}));
        Ok(true)
    }

    /// Runs every stage in order, skipping completed ones.
    pub fn run(&self) -> CliResult<RunSummary> {
        let mut summary = RunSummary::default();
        if self.opts.parallel_gans {
            self.run_gans_in_parallel()?;
        }
        for stage in Stage::ORDER {
            if self.execute(stage, false)? {
                summary.executed.push(stage.name());
            } else {
                summary.skipped.push(stage.name());
            }
        }
        Ok(summary)
    }

    fn run_gans_in_parallel(&self) -> CliResult<()> {
        let config = self
            .opts
            .config_path
            .as_ref()
            .ok_or_else(|| CliError::config("parallel GAN training needs a config file"))?;
        self.execute(Stage::Prepare, false)?;
        let exe = std::env::current_exe().map_err(|e| io_err(Path::new("synthaug"), e))?;
        let mut children = Vec::new();
        for label in Label::ALL {
            let stage = Stage::Gan(label);
            if self.is_done(stage)? {
                continue;
            }
            let mut cmd = std::process::Command::new(&exe);
            cmd.arg("train-gan")
                .arg("--config")
                .arg(config)
                .arg("--class")
                .arg(label.as_str())
                .arg("--seed")
                .arg(self.cfg.seed.to_string())
                .arg("--output-dir")
                .arg(&self.layout.root);
            if self.opts.resume {
                cmd.arg("--resume");
            }
            let child = cmd.spawn().map_err(|e| io_err(&exe, e).in_stage(&stage.name()))?;
            children.push((stage, child));
        }
        for (stage, mut child) in children {
            let status = child.wait().map_err(|e| io_err(&exe, e).in_stage(&stage.name()))?;
            if !status.success() {
                let code = status.code().unwrap_or(1);
                let err = match code {
                    2 => CliError::config("child process rejected its arguments"),
                    _ => synthaug_core::Error::Integrity(format!("child process exited with code {code}")).into(),
                };
                return Err(err.in_stage(&stage.name()));
            }
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split) -> CliResult<Manifest> {
        Ok(load_manifest(&self.layout.manifest(split), split)?)
    }

    fn prepare(&self, dir: &Path) -> CliResult<()> {
        let d = &self.cfg.data;
        if let Some(spec) = &d.toy {
            write_toy_corpus(dir, spec)?;
        } else {
            let load = |p: &Option<PathBuf>, split| -> CliResult<Manifest> {
                Ok(load_manifest(p.as_ref().expect("validated"), split)?)
            };
            let train = load(&d.train_manifest, Split::Train)?;
            let val = load(&d.val_manifest, Split::Validation)?;
            let test = load(&d.test_manifest, Split::Test)?;
            for (a, b) in [(&train, &test), (&train, &val), (&val, &test)] {
                let shared = check_disjoint(a, b);
                if !shared.is_empty() {
                    return Err(synthaug_core::Error::Integrity(format!(
                        "{} patients appear in both {} and {} (first: {})",
                        shared.len(),
                        a.name(),
                        b.name(),
                        shared[0]
                    ))
                    .into());
                }
            }
            for m in [&train, &val, &test] {
                m.write(&self.layout.manifest(m.split()))?;
            }
        }
        for split in [Split::Train, Split::Validation, Split::Test] {
            let m = self.load_split(split)?;
            let c = class_counts(&m);
            emit(
                &Stage::Prepare.name(),
                "counts",
                json!({"split": split.to_string(), "positive": c.positive, "negative": c.negative}),
            );
        }
        Ok(())
    }

    fn train_gan(&self, label: Label, dir: &Path) -> CliResult<()> {
        let name = Stage::Gan(label).name();
        let cfg = self.cfg.gan.get(label);
        let corpus = self.load_split(Split::Train)?.filter_label(label);
        let every = self.cfg.log_every;
        let total = cfg.total_steps;
        let (bundle, history) = train_gan_with(&corpus, cfg, Some(&dir.join("checkpoints")), &mut |step, losses| {
            if (step + 1) % every == 0 || step + 1 == total {
                emit(
                    &name,
                    "step",
                    json!({"step": step + 1, "d_loss": losses.d_loss, "g_loss": losses.g_loss, "r1": losses.r1, "lr": cfg.lr_g}),
                );
            }
            Ok(())
        })?;
        bundle.save(&self.layout.generator(label), total)?;
        write_json(&dir.join("history.json"), &history)?;
        Ok(())
    }

    fn synthesize(&self, dir: &Path) -> CliResult<()> {
        let (pos, _) = GeneratorBundle::load(&self.layout.generator(Label::Positive))?;
        let (neg, _) = GeneratorBundle::load(&self.layout.generator(Label::Negative))?;
        let manifest = run_job(&SynthesisJob {
            bundle_pos: &pos,
            bundle_neg: &neg,
            out_dir: dir.to_path_buf(),
            params: self.cfg.synthesis.clone(),
        })?;
        let c = class_counts(&manifest);
        emit(
            &Stage::Synthesize.name(),
            "counts",
            json!({"positive": c.positive, "negative": c.negative}),
        );
        Ok(())
    }

    /// Training manifest of `arm`; the only input that differs between arms.
    pub fn arm_manifest(&self, arm: Arm) -> CliResult<Manifest> {
        let real = self.load_split(Split::Train)?;
        Ok(match arm {
            Arm::Baseline => real,
            Arm::Augmented => merge(&real, &load_manifest(&self.layout.synthetic_manifest(), Split::Train)?)?,
        })
    }

    fn train_classifier(&self, arm: Arm, dir: &Path) -> CliResult<()> {
        let name = Stage::Classifier(arm).name();
        let cfg = self.cfg.arms.get(arm);
        let hash = train_config_hash(cfg);
        let reference = train_config_hash(&self.cfg.arms.baseline);
        if hash != reference {
            return Err(CliError::config(format!(
                "arm {} trains with settings {hash}, expected {reference}",
                arm.as_str()
            )));
        }
        let train = self.arm_manifest(arm)?;
        let val = self.load_split(Split::Validation)?;
        let test = self.load_split(Split::Test)?;
        write_json(
            &self.layout.arm_info(arm),
            &ArmInfo {
                arm,
                train_config_hash: hash,
                train_manifest: train.name().to_string(),
                train_counts: class_counts(&train),
            },
        )?;
        let mut model = build_model(&self.cfg.classifier, cfg.seed)?;
        let history = train_with_observer(&mut model, &train, &val, cfg, &mut |rec, _, _| {
            let phase = match rec.phase {
                Phase::Frozen => "frozen",
                Phase::Full => "full",
            };
            emit(
                &name,
                "epoch",
                json!({
                    "epoch": rec.epoch,
                    "phase": phase,
                    "train_loss": rec.train_loss,
                    "val_loss": rec.val_loss,
                    "val_accuracy": rec.val_accuracy,
                    "lr": rec.lr,
                }),
            );
        })?;
        model.save(&self.layout.model(arm), Some(cfg), &history)?;
        let preds = predict_manifest(&model, &test, cfg.image_size)?;
        write_predictions(&dir.join("predictions.csv"), &test, &preds)
    }

    fn report(&self) -> CliResult<()> {
        let test = self.layout.manifest(Split::Test);
        let mut reports = Vec::new();
        for arm in Arm::ALL {
            let r = evaluate_predictions(&self.layout.predictions(arm), &test, arm.as_str())?;
            write_json(&self.layout.report(arm), &r)?;
            reports.push(r);
        }
        let delta = compare(&reports[0], &reports[1])?;
        write_json(&self.layout.delta(), &delta)?;
        eprint!("{}", render_table(&reports));
        eprint!("{}", render_delta(&delta));
        Ok(())
    }

    pub fn read_report(&self, arm: Arm) -> CliResult<EvalReport> {
        Ok(read_json(&self.layout.report(arm))?)
    }

    pub fn read_delta(&self) -> CliResult<DeltaReport> {
        Ok(read_json(&self.layout.delta())?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictionRow {
    record_id: String,
    prediction: Label,
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => synthaug_core::Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            reason: format!("{other:?}"),
        }
        .into(),
    }
}

/// Writes `record_id,prediction` rows in manifest order.
pub fn write_predictions(path: &Path, manifest: &Manifest, preds: &[Label]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (r, &p) in manifest.records().iter().zip(preds) {
        w.serialize(PredictionRow {
            record_id: r.record_id.clone(),
            prediction: p,
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_predictions(path: &Path) -> CliResult<BTreeMap<String, Label>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = BTreeMap::new();
    for (i, row) in rd.deserialize::<PredictionRow>().enumerate() {
        let row = row.map_err(|e| synthaug_core::Error::Parse {
            path: path.to_path_buf(),
            row: i + 2,
            reason: e.to_string(),
        })?;
        if out.insert(row.record_id.clone(), row.prediction).is_some() {
            return Err(synthaug_core::Error::Integrity(format!("duplicate prediction for {}", row.record_id)).into());
        }
    }
    Ok(out)
}

/// Scores a predictions file against the labels of a test manifest. Every
/// manifest record needs exactly one prediction and no others may appear.
pub fn evaluate_predictions(predictions: &Path, manifest: &Path, model: &str) -> CliResult<EvalReport> {
    let test = load_manifest(manifest, Split::Test)?;
    let mut preds = read_predictions(predictions)?;
    let mut ordered = Vec::with_capacity(test.len());
    for r in test.records() {
        let p = preds
            .remove(&r.record_id)
            .ok_or_else(|| synthaug_core::Error::Integrity(format!("no prediction for test record {}", r.record_id)))?;
        ordered.push(p);
    }
    if let Some(extra) = preds.keys().next() {
        return Err(synthaug_core::Error::Integrity(format!("prediction for unknown record {extra}")).into());
    }
    let cm = confusion(&ordered, &test.labels())?;
    Ok(report(&cm, model, test.name())?)
}
