mod commands;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vspam::config::{RunConfig, Seeds};
use vspam::encoding::ModelKind;

#[derive(Parser, Debug)]
#[command(name = "vspam", version, about = "Sparse nonparametric voxel encoding and image identification")]
struct Cli {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Master seed; replaces every named seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Exit with status 4 when any fit is flagged.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate stimuli, features and the synthetic voxel population.
    Gen,
    /// Fit encoding models for every voxel.
    Fit {
        /// Model kinds to fit (default: all in the configuration).
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<ModelKind>,
    },
    /// Predict responses of one voxel model on a stimulus set.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = StimulusSetName::Valid)]
        set: StimulusSetName,
    },
    /// Identification error curves and threshold sweeps.
    Decode {
        #[arg(long = "kind", value_parser = parse_kind)]
        kinds: Vec<ModelKind>,
    },
    /// Receptive-field, orientation/frequency and contrast probes of one model.
    Tune {
        #[arg(long)]
        model: PathBuf,
    },
    /// Event-related BOLD simulation and amplitude estimation.
    Bold {
        #[command(subcommand)]
        action: BoldAction,
    },
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum BoldAction {
    Sim,
    Fit,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StimulusSetName {
    Train,
    Valid,
    Database,
}

impl StimulusSetName {
    pub fn tag(self) -> &'static str {
        match self {
            StimulusSetName::Train => "train",
            StimulusSetName::Valid => "valid",
            StimulusSetName::Database => "database",
        }
    }
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse::<ModelKind>().map_err(|e| e.to_string())
}

/// Fits were flagged and `--strict` was given.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "numerical failure: {}", self.0)
    }
}

impl std::error::Error for NumericalFailure {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<NumericalFailure>().is_some() {
        return 4;
    }
    match err.downcast_ref::<vspam::Error>() {
        Some(vspam::Error::InvalidConfig(_) | vspam::Error::InvalidArgument(_)) => 2,
        Some(vspam::Error::MissingInput(_) | vspam::Error::CorruptBundle { .. }) => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> vspam::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = Seeds::from_master(s);
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    if cfg.jobs > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
    }
    match cli.command {
        Command::Gen => commands::gen(&cfg),
        Command::Fit { kinds } => commands::fit(&cfg, &kinds_or_default(&cfg, kinds), cli.strict),
        Command::Predict { model, set } => commands::predict(&cfg, &model, set),
        Command::Decode { kinds } => commands::decode(&cfg, &kinds_or_default(&cfg, kinds)),
        Command::Tune { model } => commands::tune(&cfg, &model),
        Command::Bold { action: BoldAction::Sim } => commands::bold_sim(&cfg),
        Command::Bold { action: BoldAction::Fit } => commands::bold_fit(&cfg, cli.strict),
    }
}

fn kinds_or_default(cfg: &RunConfig, kinds: Vec<ModelKind>) -> Vec<ModelKind> {
    if kinds.is_empty() {
        cfg.kinds.clone()
    } else {
        kinds
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
