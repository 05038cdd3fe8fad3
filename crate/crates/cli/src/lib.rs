//! Pipeline commands behind the `phenoscribe` binary.

pub mod commands;
pub mod config;
pub mod store;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use phenoscribe::cohort::CohortError;
use phenoscribe::evalkit::experiment::{Architecture, ExperimentError};
use phenoscribe::fusion::{FusionError, Mode};
use phenoscribe::lm::LmError;
use phenoscribe::nn::NnError;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error("missing checkpoint {}", .0.display())]
    MissingCheckpoint(PathBuf),
    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("{failed} of {total} visits failed; details in {}", .log.display())]
    PartialFailure { failed: usize, total: usize, log: PathBuf },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// 2 for usage and config problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "phenoscribe", version, about = "Trimodal speech pipeline for longitudinal mental-health prediction")]
pub struct Cli {
    /// Root that every configured path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// JSON run config; relative paths are taken from the work directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with WAVs, transcripts, surveys and splits.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        arms: Option<usize>,
        #[arg(long)]
        effect: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Write per-visit landmark or biomarker caches.
    Extract {
        #[arg(long, value_enum, default_value_t = ExtractKind::All)]
        kind: ExtractKind,
    },
    /// Train one stage and save its checkpoint.
    Train {
        #[arg(long, value_enum)]
        stage: TrainStage,
        /// Model seed; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Selects the P-tuning input (text or text+landmarks) or the fusion mode.
        #[arg(long, value_parser = parse_architecture)]
        architecture: Option<Architecture>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lambda_aux: Option<f64>,
        #[arg(long)]
        force: bool,
    },
    /// Score saved checkpoints on the test split.
    Eval {
        #[arg(long, value_delimiter = ',', value_parser = parse_architecture)]
        architectures: Option<Vec<Architecture>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        force: bool,
    },
    /// Retrain the longitudinal fusion model across auxiliary weights.
    Ablate {
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExtractKind {
    Landmarks,
    Biomarkers,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainStage {
    Base,
    Crossmodal,
    Ptune,
    Fusion,
    /// Every stage the configured architectures need, for every configured seed.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    Longitudinal,
    CrossSectional,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Longitudinal => Mode::Longitudinal,
            ModeArg::CrossSectional => Mode::CrossSectional,
        }
    }
}

fn parse_architecture(s: &str) -> Result<Architecture, String> {
    Architecture::parse(s).ok_or_else(|| {
        let names: Vec<_> = Architecture::ALL.iter().map(|a| a.as_str()).collect();
        format!("unknown architecture {s:?}; expected one of {}", names.join(", "))
    })
}

/// Loads the config, applies flag overrides and runs the command.
pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(&cli.workdir.join(p))?,
        None => RunConfig::default(),
    };
    let ws = store::Workspace::new(cli.workdir.clone());
    match cli.command {
        Command::Synth { seed, patients, arms, effect, force } => {
            let s = &mut cfg.synth;
            s.seed = seed.unwrap_or(s.seed);
            s.n_patients = patients.unwrap_or(s.n_patients);
            s.n_arms = arms.unwrap_or(s.n_arms);
            s.effect_strength = effect.unwrap_or(s.effect_strength);
            cfg.validate()?;
            commands::synth(&ws, &cfg, force)
        }
        Command::Extract { kind } => {
            cfg.validate()?;
            commands::extract(&ws, &cfg, kind)
        }
        Command::Train { stage, seed, architecture, mode, lambda_aux, force } => {
            if let Some(l) = lambda_aux {
                cfg.experiment.lambda_aux = l;
            }
            let mode = mode.map(Mode::from).or(match architecture {
                Some(Architecture::Trimodal) => Some(Mode::CrossSectional),
                Some(Architecture::TrimodalLongitudinal) => Some(Mode::Longitudinal),
                _ => None,
            });
            if let Some(m) = mode {
                cfg.experiment.fusion.mode = m;
            }
            cfg.validate()?;
            let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
            let arch = architecture.unwrap_or(Architecture::TextLandmarks);
            commands::train(&ws, &cfg, stage, seed, arch, force)
        }
        Command::Eval { architectures, seeds, force } => {
            if let Some(a) = architectures {
                cfg.experiment.architectures = a;
            }
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            cfg.validate()?;
            commands::eval(&ws, &cfg, force)
        }
        Command::Ablate { lambdas, seeds, force } => {
            if let Some(l) = lambdas {
                cfg.lambdas = l;
            }
            if let Some(s) = seeds {
                cfg.experiment.seeds = s;
            }
            cfg.validate()?;
            commands::ablate(&ws, &cfg, force)
        }
    }
}
