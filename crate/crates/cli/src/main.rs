mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fisher_prune::pruning::SignalKind;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] fisher_prune::Error),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    /// 2 for problems with what the user supplied, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        use fisher_prune::Error as E;
        match self {
            CliError::Config(_) | CliError::Io(_) => 2,
            CliError::Core(E::Io { .. } | E::Format { .. } | E::Input(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fprune", version, about = "Train, prune and evaluate LeNet-5 on MNIST with Fisher pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Input checkpoint for prune, sweep and eval.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    signal: Option<SignalArg>,
    /// Fixed trade-off weight between loss and FLOPs.
    #[arg(long, global = true, conflicts_with = "beta_auto")]
    beta: Option<f64>,
    /// Pick the trade-off weight automatically before every prune.
    #[arg(long, global = true)]
    beta_auto: bool,
    #[arg(long, global = true)]
    prune_count: Option<usize>,
    /// Skip fine-tuning after pruning.
    #[arg(long, global = true)]
    no_retrain: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SignalArg {
    Fisher,
    Molchanov,
    MolchanovNorm,
    MolchanovReg,
    MolchanovNormReg,
    L1a,
    L1w,
}

impl From<SignalArg> for SignalKind {
    fn from(s: SignalArg) -> Self {
        match s {
            SignalArg::Fisher => SignalKind::Fisher,
            SignalArg::Molchanov => SignalKind::Molchanov,
            SignalArg::MolchanovNorm => SignalKind::MolchanovNorm,
            SignalArg::MolchanovReg => SignalKind::MolchanovReg,
            SignalArg::MolchanovNormReg => SignalKind::MolchanovNormReg,
            SignalArg::L1a => SignalKind::L1a,
            SignalArg::L1w => SignalKind::L1w,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train LeNet-5 from scratch; writes model.ckpt and history.csv.
    Train,
    /// Prune while training, then fine-tune; writes pruned/compact checkpoints and audit.csv.
    Prune,
    /// Prune with frozen parameters and record loss against features pruned.
    Sweep,
    /// Error, cross-entropy, FLOPs and parameter count of a checkpoint.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Evaluate on an explicit IDX pair instead of a split.
        #[arg(long, requires = "labels")]
        images: Option<PathBuf>,
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
    },
    /// Merge audit CSVs into a cost-vs-error table.
    Report {
        #[arg(required = true)]
        audits: Vec<PathBuf>,
    },
}

fn resolve(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut c = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = o.seed {
        c.seed = s;
    }
    if let Some(d) = &o.out_dir {
        c.out_dir = d.clone();
    }
    if let Some(d) = &o.data_dir {
        c.data_dir = d.clone();
    }
    if let Some(p) = &o.checkpoint {
        c.checkpoint = Some(p.clone());
    }
    if let Some(s) = o.signal {
        c.prune.signal = s.into();
        c.sweep.signals = vec![s.into()];
    }
    if let Some(b) = o.beta {
        c.prune.beta = b;
        c.prune.beta_auto = false;
        c.sweep.beta = b;
    }
    if o.beta_auto {
        c.prune.beta_auto = true;
    }
    if let Some(n) = o.prune_count {
        c.prune.features_to_prune = n;
        c.sweep.max_pruned = n;
    }
    if o.no_retrain {
        c.prune.no_retrain = true;
    }
    Ok(c)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.overrides)?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Prune => commands::prune(&cfg),
        Command::Sweep => commands::sweep(&cfg),
        Command::Eval { split, images, labels } => commands::eval(&cfg, split, images.zip(labels)),
        Command::Report { audits } => commands::report(&cfg, &audits),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
