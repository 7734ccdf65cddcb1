//! Command-line orchestration of the synthetic-augmentation experiment:
//! prepare data, train one generator per class, synthesize, train the
//! real-only and real-plus-synthetic classifier arms, evaluate and compare.

pub mod commands;
pub mod config;
pub mod error;
pub mod events;
pub mod experiment;

pub use config::{Arm, ArmConfigs, DataConfig, ExperimentConfig, GanPair};
pub use error::{CliError, CliResult};
pub use experiment::{Experiment, Layout, RunOptions, RunSummary, Stage};
