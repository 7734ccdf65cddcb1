//! Experiment configuration: one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use synthaug_core::classifier::{ClassifierConfig, TrainConfig};
use synthaug_core::dataset::Label;
use synthaug_core::gan::GanConfig;
use synthaug_core::rng;
use synthaug_core::synthesis::SynthesisParams;
use synthaug_core::toy::ToySpec;

use crate::error::{CliError, CliResult};

/// Where the real images come from: three manifests, or a procedurally
/// generated corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub toy: Option<ToySpec>,
}

/// Training settings of the two classifier arms. They must be identical;
/// the arms differ only in their training manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfigs {
    pub baseline: TrainConfig,
    pub augmented: TrainConfig,
}

impl ArmConfigs {
    pub fn same(cfg: TrainConfig) -> Self {
        ArmConfigs {
            baseline: cfg.clone(),
            augmented: cfg,
        }
    }

    pub fn get(&self, arm: Arm) -> &TrainConfig {
        match arm {
            Arm::Baseline => &self.baseline,
            Arm::Augmented => &self.augmented,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanPair {
    pub positive: GanConfig,
    pub negative: GanConfig,
}

impl GanPair {
    pub fn same(cfg: GanConfig) -> Self {
        GanPair {
            positive: cfg.clone(),
            negative: cfg,
        }
    }

    pub fn get(&self, label: Label) -> &GanConfig {
        match label {
            Label::Positive => &self.positive,
            Label::Negative => &self.negative,
        }
    }
}

/// Classifier arm: real images only, or real plus synthetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Baseline,
    Augmented,
}

impl Arm {
    pub const ALL: [Arm; 2] = [Arm::Baseline, Arm::Augmented];

    pub fn as_str(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Master seed. Every component seed is derived from it, overriding the
    /// `seed` fields of the nested configs.
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub arms: ArmConfigs,
    pub gan: GanPair,
    #[serde(default)]
    pub synthesis: SynthesisParams,
    /// GAN steps between progress events.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    100
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a serialized training configuration.
pub fn train_config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("training configs serialize"))
}

impl ExperimentConfig {
    /// Parses a config file; relative paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let base = std::path::absolute(base).map_err(|e| CliError::config(e.to_string()))?;
        resolve(&base, &mut cfg.output_dir);
        for p in [
            &mut cfg.data.train_manifest,
            &mut cfg.data.val_manifest,
            &mut cfg.data.test_manifest,
            &mut cfg.classifier.pretrained_weights,
        ]
        .into_iter()
        .flatten()
        {
            resolve(&base, p);
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// Copy with every component seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.arms.baseline.seed = seed;
        cfg.arms.augmented.seed = seed;
        cfg.gan.positive.seed = rng::derive_key(seed, "experiment-gan", &[Label::Positive.index() as u64]);
        cfg.gan.negative.seed = rng::derive_key(seed, "experiment-gan", &[Label::Negative.index() as u64]);
        cfg.synthesis.seed = rng::derive_key(seed, "experiment-synthesis", &[]);
        cfg
    }

    /// Checks cross-field rules, including that both arms train with
    /// hash-identical settings.
    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        let manifests = [&d.train_manifest, &d.val_manifest, &d.test_manifest];
        match (&d.toy, manifests.iter().filter(|m| m.is_some()).count()) {
            (Some(_), 0) => {}
            (None, 3) => {
                for m in manifests.into_iter().flatten() {
                    if !m.is_file() {
                        return Err(CliError::config(format!("manifest {} does not exist", m.display())));
                    }
                }
            }
            _ => {
                return Err(CliError::config(
                    "data needs either a toy corpus or all of train_manifest, val_manifest and test_manifest",
                ))
            }
        }
        let (a, b) = (
            train_config_hash(&self.arms.baseline),
            train_config_hash(&self.arms.augmented),
        );
        if a != b {
            return Err(CliError::config(format!(
                "the two arms must train with identical settings (hashes {a} and {b})"
            )));
        }
        self.arms.baseline.validate()?;
        for label in Label::ALL {
            self.gan.get(label).validate()?;
        }
        if self.log_every == 0 {
            return Err(CliError::config("log_every must be positive"));
        }
        Ok(())
    }
}
