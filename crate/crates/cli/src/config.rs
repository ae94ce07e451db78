//! Run configuration shared by every subcommand.
//!
//! One flat set of knobs is read from `--config <file.json>` and then
//! overridden by flags of the same name (`lambda_energy` ↔ `--lambda-energy`).
//! The field list below generates the config struct, the clap flags and the
//! merge step, so they cannot drift apart.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use fematch::freeenergy::DensityParams;
use fematch::trajectory::FileFormat;
use fematch::{DensityKind, LossConfig, PriorTerm, ReferenceLandscape};
use serde::{Deserialize, Serialize};

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])+ $name:ident : $ty:ty = $default:expr, )*) => {
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct RunConfig {
            $( $(#[doc = $doc])+ pub $name: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $name: $default, )* }
            }
        }

        /// Flag overrides for [`RunConfig`]; unset flags keep the file or default value.
        #[derive(Debug, Clone, Default, clap::Args)]
        pub struct ConfigArgs {
            $( $(#[doc = $doc])+ #[arg(long)] pub $name: Option<$ty>, )*
        }

        impl RunConfig {
            pub fn apply(&mut self, args: &ConfigArgs) {
                $( if let Some(v) = &args.$name { self.$name = v.clone(); } )*
            }

            /// Field names in declaration order.
            pub const FIELDS: &'static [&'static str] = &[$( stringify!($name), )*];
        }
    };
}

run_config! {
    /// Base seed; every stage derives its own stream from it
    seed: u64 = 0,
    /// Temperature in kelvin
    temperature: f64 = 300.0,
    /// Output directory
    out: PathBuf = PathBuf::from("fematch-out"),
    /// Trajectory output format (bin or csv)
    format: String = "bin".into(),
    /// TICA lag in frames
    lag: usize = 10,
    /// Number of TICA components kept
    components: usize = 2,
    /// Ridge added to C0; unset means 1e-6·trace(C0)/n_features
    ridge: Option<f64> = None,
    /// Explained-variance threshold checked over the first two components
    variance_threshold: f64 = 0.70,
    /// Marginal density estimator (histogram or kde)
    kind: String = "histogram".into(),
    /// Histogram bins per TICA component
    bins: usize = 100,
    /// KDE bandwidth; unset means Scott's rule
    bandwidth: Option<f64> = None,
    /// Probability floor applied before the logarithm
    floor_epsilon: f64 = 1e-12,
    /// Radial basis functions in the potential
    n_basis: usize = 32,
    /// Hidden tanh units in the potential
    n_hidden: usize = 32,
    /// Harmonic prior stiffness around the origin in kcal/mol per unit²; 0 disables the prior
    prior_stiffness: f64 = 0.5,
    /// Energy-matching weight λ_energy
    lambda_energy: f64 = 0.0,
    /// Force-matching weight λ_force; unset means 1 − λ_energy
    lambda_force: Option<f64> = None,
    /// Mini-batch size
    batch_size: usize = 256,
    /// Maximum training epochs
    max_epochs: usize = 500,
    /// Adam learning rate
    learning_rate: f64 = 1e-3,
    /// Keep every n-th frame for training
    train_stride: usize = 4,
    /// Reference landscape (double_well_1d, double_well_2d or mueller_brown)
    system: Option<String> = None,
    /// Integrator steps per chain
    steps: u64 = 1_000_000,
    /// Integrator time step
    dt: f64 = 1e-3,
    /// Friction coefficient
    gamma: f64 = 1.0,
    /// Record every n-th step
    stride: u64 = 100,
    /// Number of chains
    chains: usize = 8,
    /// Chain start points as "x,y;x,y"; unset means the landscape minima in turn
    starts: Option<String> = None,
    /// KL smoothing pseudo-count per bin
    epsilon: f64 = 0.5,
    /// KL grid bins per axis
    kl_bins: usize = 50,
    /// Landscape grid bins per axis
    grid_bins: usize = 100,
    /// Markov states
    n_states: usize = 50,
    /// MSM lag in frames; unset means the TICA lag
    msm_lag: Option<usize> = None,
}

/// Independent seeds for the stages of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    TruthSampling = 1,
    ModelInit = 2,
    Training = 3,
    ModelSampling = 4,
    Clustering = 5,
}

impl RunConfig {
    /// File config overlaid with flags.
    pub fn resolve(config_file: Option<&Path>, args: &ConfigArgs) -> anyhow::Result<Self> {
        let mut cfg = match config_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.apply(args);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.format.parse::<FileFormat>()?;
        self.kind.parse::<DensityKind>()?;
        if let Some(name) = &self.system {
            ReferenceLandscape::from_name(name)?;
        }
        if !(self.temperature > 0.0) {
            bail!("temperature must be positive, got {}", self.temperature);
        }
        if self.prior_stiffness < 0.0 {
            bail!("prior_stiffness must be non-negative");
        }
        if self.train_stride == 0 || self.chains == 0 || self.components == 0 {
            bail!("train_stride, chains and components must be positive");
        }
        self.loss_config().validate()?;
        if let Some(s) = &self.starts {
            parse_starts(s)?;
        }
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed
            .wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn trajectory_format(&self) -> FileFormat {
        self.format.parse().expect("validated")
    }

    pub fn extension(&self) -> &'static str {
        match self.trajectory_format() {
            FileFormat::Csv => "csv",
            FileFormat::Bin => "bin",
        }
    }

    pub fn density_params(&self) -> DensityParams {
        match self.kind.parse::<DensityKind>().expect("validated") {
            DensityKind::Kde => DensityParams::Kde {
                bandwidth: self.bandwidth,
            },
            DensityKind::Histogram => DensityParams::Histogram {
                n_bins: self.bins,
                range: None,
            },
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_force: self.lambda_force.unwrap_or(1.0 - self.lambda_energy),
            lambda_energy: self.lambda_energy,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            learning_rate: self.learning_rate,
            seed: self.stage_seed(Stage::Training),
        }
    }

    pub fn prior(&self, dim: usize) -> PriorTerm {
        if self.prior_stiffness == 0.0 {
            PriorTerm::None
        } else {
            PriorTerm::Harmonic {
                center: vec![0.0; dim],
                stiffness: self.prior_stiffness,
            }
        }
    }

    pub fn landscape(&self) -> anyhow::Result<Option<ReferenceLandscape>> {
        Ok(match &self.system {
            Some(name) => Some(ReferenceLandscape::from_name(name)?),
            None => None,
        })
    }

    /// One start per chain, cycling through `starts` or the landscape minima.
    pub fn initial_positions(&self, dim: usize) -> anyhow::Result<Vec<Vec<f64>>> {
        let pool = match (&self.starts, self.landscape()?) {
            (Some(s), _) => parse_starts(s)?,
            (None, Some(l)) => l.minima(),
            (None, None) => vec![vec![0.0; dim]],
        };
        if let Some(p) = pool.iter().find(|p| p.len() != dim) {
            bail!("start point {p:?} has {} coordinates, expected {dim}", p.len());
        }
        Ok((0..self.chains).map(|c| pool[c % pool.len()].clone()).collect())
    }
}

fn parse_starts(s: &str) -> anyhow::Result<Vec<Vec<f64>>> {
    s.split(';')
        .map(|point| {
            point
                .split(',')
                .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad start coordinate '{v}'")))
                .collect()
        })
        .collect()
}
