//! Command-line front end for the `fematch` crate.
//!
//! Every subcommand accepts the full set of run knobs (see [`config`]),
//! writes its outputs under `--out` and leaves a
//! `<subcommand>.manifest.json` beside them. Exit status is 0 on success,
//! 1 for bad input or configuration and 2 for numerical failures.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{ConfigArgs, RunConfig};
use crate::manifest::Manifest;

#[derive(Debug, Parser)]
#[command(name = "fematch", version, about = "TICA free-energy matching for coarse-grained potentials")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub knobs: ConfigArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pairwise site distances from a trajectory of (x, y, z) site coordinates
    Featurize {
        /// Coordinate trajectory, 3 columns per site
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit TICA on one or more feature trajectories
    Tica {
        /// Feature trajectory (repeatable)
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Boltzmann-inverted free-energy targets per trajectory
    Targets {
        /// TICA model JSON
        #[arg(long)]
        tica: PathBuf,
        /// Feature trajectory (repeatable)
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Prior energy record per trajectory (repeatable); default evaluates the configured prior
        #[arg(long)]
        prior: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the potential on force and free-energy targets
    Train {
        /// Force record (repeatable)
        #[arg(long, required = true)]
        forces: Vec<PathBuf>,
        /// Target file paired with each force record (repeatable)
        #[arg(long, required = true)]
        targets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Overdamped Langevin sampling of a reference landscape or a trained potential
    Sample {
        /// Trained potential JSON; without it `--system` is sampled
        #[arg(long)]
        potential: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// KL divergence of model against truth on the first two TICA components
    Evaluate {
        /// TICA model JSON; without it TICA is fit on the truth trajectories
        #[arg(long)]
        tica: Option<PathBuf>,
        /// Ground-truth trajectory (repeatable)
        #[arg(long, required = true)]
        truth: Vec<PathBuf>,
        /// Model trajectory (repeatable)
        #[arg(long, required = true)]
        model: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean free-energy grid over the first two TICA components
    Landscape {
        /// TICA model JSON
        #[arg(long)]
        tica: PathBuf,
        /// Feature trajectory (repeatable)
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        /// Target file paired with each trajectory (repeatable)
        #[arg(long, required = true)]
        targets: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Markov state model in TICA space
    Msm {
        /// TICA model JSON
        #[arg(long)]
        tica: PathBuf,
        /// Feature trajectory (repeatable)
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample truth, fit TICA, build targets, train, sample the model and evaluate
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Featurize { .. } => "featurize",
            Command::Tica { .. } => "tica",
            Command::Targets { .. } => "targets",
            Command::Train { .. } => "train",
            Command::Sample { .. } => "sample",
            Command::Evaluate { .. } => "evaluate",
            Command::Landscape { .. } => "landscape",
            Command::Msm { .. } => "msm",
            Command::Pipeline { .. } => "pipeline",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Featurize { common, .. }
            | Command::Tica { common, .. }
            | Command::Targets { common, .. }
            | Command::Train { common, .. }
            | Command::Sample { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Landscape { common, .. }
            | Command::Msm { common, .. }
            | Command::Pipeline { common } => common,
        }
    }
}

fn default_text(value: &serde_json::Value) -> String {
    match value {
        serde_json::Value::Null => "auto".into(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// The clap command with each knob's default appended to its help line.
pub fn command() -> clap::Command {
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let mut cmd = Cli::command();
    let names: Vec<String> = cmd.get_subcommands().map(|s| s.get_name().to_string()).collect();
    for name in names {
        cmd = cmd.mut_subcommand(name, |mut sub| {
            for field in RunConfig::FIELDS {
                let shown = default_text(&defaults[*field]);
                sub = sub.mut_arg(*field, |arg| {
                    let help = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
                    arg.help(format!("{help} [default: {shown}]"))
                });
            }
            sub
        });
    }
    cmd
}

/// Runs one parsed command and writes its manifest.
pub fn execute(command: &Command) -> anyhow::Result<()> {
    let common = command.common();
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.knobs)?;
    std::fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    let mut manifest = Manifest::new(command.name(), &cfg);
    if let Some(path) = &common.config {
        manifest.add_input(path)?;
    }
    match command {
        Command::Featurize { input, .. } => commands::featurize(input, &cfg, &mut manifest)?,
        Command::Tica { input, .. } => commands::tica(input, &cfg, &mut manifest)?,
        Command::Targets { tica, input, prior, .. } => commands::targets(tica, input, prior, &cfg, &mut manifest)?,
        Command::Train { forces, targets, .. } => commands::train_cmd(forces, targets, &cfg, &mut manifest)?,
        Command::Sample { potential, .. } => commands::sample(potential.as_deref(), &cfg, &mut manifest)?,
        Command::Evaluate { tica, truth, model, .. } => {
            commands::evaluate(tica.as_deref(), truth, model, &cfg, &mut manifest)?
        }
        Command::Landscape { tica, input, targets, .. } => {
            commands::landscape(tica, input, targets, &cfg, &mut manifest)?
        }
        Command::Msm { tica, input, .. } => commands::msm(tica, input, &cfg, &mut manifest)?,
        Command::Pipeline { .. } => {
            let summary = pipeline::run(&cfg, &mut manifest)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    manifest.write()?;
    Ok(())
}

/// Exit status for an error: 2 when a numerical failure is anywhere in the chain.
pub fn exit_status(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .any(|e| e.downcast_ref::<fematch::Error>().is_some_and(fematch::Error::is_numerical));
    if numerical {
        2
    } else {
        1
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match execute(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}
