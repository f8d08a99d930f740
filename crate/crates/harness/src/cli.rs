use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, GateKind, Overrides, SweepMode, OUTPUT_ENV};
use crate::error::HarnessError;
use crate::pipeline::Harness;

#[derive(Debug, Parser)]
#[command(
    name = "ctxsteer",
    version,
    about = "Context preference vector extraction and steering on a toy model"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML experiment config; built-in defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for every artifact.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Strength on the visual-fidelity vector.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub alpha: Option<f64>,
    /// Strength on the modality-reliance vector.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Injection window, e.g. `11,12,13,14`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long, global = true, value_enum)]
    pub gate: Option<GateKind>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the model, conflict corpus, probe set, images, and annotations.
    Synth,
    /// Fit both preference vectors.
    Extract,
    /// Estimate the position prior.
    Calibrate,
    /// Caption the evaluation images with the configured injection.
    Eval,
    /// Evaluate a grid of strengths or windows.
    Sweep {
        #[arg(long, value_enum)]
        mode: Option<SweepMode>,
    },
    /// Compare per-token decode time with and without injection.
    Latency {
        #[arg(long)]
        n_tokens: Option<usize>,
    },
    /// Score a yes/no question file.
    Qa {
        #[arg(long)]
        input: PathBuf,
    },
    /// synth, extract, calibrate, eval, and sweep in one go.
    Run,
}

impl Cli {
    pub fn overrides(&self) -> Overrides {
        let c = &self.common;
        let (mode, n_tokens) = match &self.command {
            Command::Sweep { mode } => (*mode, None),
            Command::Latency { n_tokens } => (None, *n_tokens),
            _ => (None, None),
        };
        Overrides {
            out: c.out.clone(),
            seed: c.seed,
            alpha: c.alpha,
            beta: c.beta,
            layers: c.layers.clone(),
            gate: c.gate,
            temperature: c.temperature,
            mode,
            n_tokens,
        }
    }

    pub fn resolve_config(&self) -> Result<ExperimentConfig, HarnessError> {
        let mut config = match &self.common.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&self.overrides());
        Ok(config)
    }
}

/// Runs one command and prints its summary as JSON on stdout.
pub fn run(cli: &Cli) -> Result<(), HarnessError> {
    let harness = Harness::new(cli.resolve_config()?)?;
    let summary = match &cli.command {
        Command::Synth => to_value(harness.synth()?),
        Command::Extract => to_value(harness.extract()?),
        Command::Calibrate => to_value(harness.calibrate()?),
        Command::Eval => to_value(harness.eval()?),
        Command::Sweep { .. } => to_value(harness.sweep()?),
        Command::Latency { .. } => to_value(harness.latency()?),
        Command::Qa { input } => to_value(harness.qa(input)?),
        Command::Run => to_value(harness.run_all()?),
    };
    println!("{}", serde_json::to_string_pretty(&summary).unwrap_or_default());
    Ok(())
}

fn to_value<T: serde::Serialize>(v: T) -> serde_json::Value {
    serde_json::to_value(v).unwrap_or(serde_json::Value::Null)
}
