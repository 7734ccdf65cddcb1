//! Argument parsing and dispatch for the `synthaug` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use synthaug_core::checkpoint::{read_json, write_json};
use synthaug_core::dataset::Label;
use synthaug_core::metrics::{compare, render_delta, render_table, EvalReport};

use crate::config::{Arm, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::events;
use crate::experiment::{evaluate_predictions, Experiment, RunOptions, Stage};

#[derive(Debug, Parser)]
#[command(name = "synthaug", version, about = "Synthetic-data augmentation experiment runner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every config-driven command.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Master seed; overrides the config file.
    #[arg(long, env = "SYNTHAUG_SEED")]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Reuse partial outputs of an interrupted stage.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ClassArg {
    Positive,
    Negative,
}

impl From<ClassArg> for Label {
    fn from(c: ClassArg) -> Label {
        match c {
            ClassArg::Positive => Label::Positive,
            ClassArg::Negative => Label::Negative,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every stage, skipping those already complete.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Train the two GANs in concurrent child processes.
        #[arg(long)]
        parallel_gans: bool,
    },
    /// Validate the manifests (or generate the toy corpus) into the output directory.
    PrepareData {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train the generator for one class.
    TrainGan {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, value_enum)]
        class: ClassArg,
    },
    /// Sample both generators into the synthetic training set.
    Synthesize {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Train one classifier arm and predict the test split.
    TrainClassifier {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long, value_enum)]
        arm: Arm,
    },
    /// Score predictions against a test manifest.
    Evaluate {
        /// `record_id,prediction` CSV.
        #[arg(long)]
        predictions: PathBuf,
        /// Test manifest with ground-truth labels.
        #[arg(long)]
        manifest: PathBuf,
        /// Model name recorded in the report.
        #[arg(long, default_value = "model")]
        model: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-metric differences between two reports, in percentage points.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        /// Write the delta report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn experiment(common: &ConfigArgs, parallel_gans: bool) -> CliResult<Experiment> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = std::path::absolute(dir).map_err(|e| CliError::config(e.to_string()))?;
    }
    let seed = common.seed.unwrap_or(cfg.seed);
    Experiment::new(
        cfg.with_seed(seed),
        RunOptions {
            resume: common.resume,
            parallel_gans,
            config_path: Some(common.config.clone()),
        },
    )
}

fn print_or_write<T: serde::Serialize>(value: &T, out: Option<&PathBuf>) -> CliResult<()> {
    match out {
        Some(path) => Ok(write_json(path, value)?),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("reports serialize"));
            Ok(())
        }
    }
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run { common, parallel_gans } => {
            let summary = experiment(&common, parallel_gans)?.run()?;
            events::emit(
                "run",
                "summary",
                serde_json::json!({"executed": summary.executed, "skipped": summary.skipped}),
            );
            Ok(())
        }
        Command::PrepareData { common } => experiment(&common, false)?.execute(Stage::Prepare, true).map(drop),
        Command::TrainGan { common, class } => experiment(&common, false)?
            .execute(Stage::Gan(class.into()), true)
            .map(drop),
        Command::Synthesize { common } => experiment(&common, false)?.execute(Stage::Synthesize, true).map(drop),
        Command::TrainClassifier { common, arm } => experiment(&common, false)?
            .execute(Stage::Classifier(arm), true)
            .map(drop),
        Command::Evaluate {
            predictions,
            manifest,
            model,
            out,
        } => {
            let report = evaluate_predictions(&predictions, &manifest, &model)?;
            eprint!("{}", render_table(std::slice::from_ref(&report)));
            print_or_write(&report, out.as_ref())
        }
        Command::Compare {
            baseline,
            candidate,
            out,
        } => {
            let a: EvalReport = read_json(&baseline)?;
            let b: EvalReport = read_json(&candidate)?;
            let delta = compare(&a, &b)?;
            eprint!("{}", render_table(&[a, b]));
            eprint!("{}", render_delta(&delta));
            print_or_write(&delta, out.as_ref())
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    events::init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
