use std::path::{Path, PathBuf};

use fisher_prune::pruning::{BetaMode, SignalKind};
use fisher_prune::trainer::{OptimizerConfig, OptimizerKind, PruneConfig, SignalSource, SweepConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Everything a run depends on. Read from TOML; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Directory with the four MNIST IDX files.
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Input model for prune, sweep and eval.
    pub checkpoint: Option<PathBuf>,
    /// Training points kept for training; the rest of the 60k validate.
    pub n_train: usize,
    pub train: TrainSection,
    pub prune: PruneSection,
    pub sweep: SweepSection,
}

/// `kind` and `lr` are required when the table is given; the rest default to
/// momentum 0.9, weight decay 5e-4 and a constant learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// `sgd` or `adam`.
    pub kind: String,
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub decay_every: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    5e-4
}

fn default_decay_factor() -> f64 {
    1.0
}

impl OptimizerSection {
    fn from_config(c: &OptimizerConfig) -> Self {
        let (kind, momentum) = match c.kind {
            OptimizerKind::Sgd { momentum } => ("sgd", momentum),
            OptimizerKind::Adam { .. } => ("adam", 0.0),
        };
        OptimizerSection {
            kind: kind.into(),
            lr: c.lr,
            momentum,
            weight_decay: c.weight_decay,
            decay_every: c.decay_every,
            decay_factor: c.decay_factor,
        }
    }

    fn resolve(&self) -> Result<OptimizerConfig, CliError> {
        let kind = match self.kind.as_str() {
            "sgd" => OptimizerKind::Sgd { momentum: self.momentum },
            "adam" => OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            other => return Err(CliError::Config(format!("unknown optimizer `{other}` (expected sgd or adam)"))),
        };
        if self.lr.is_nan() || self.lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(CliError::Config("learning rate and weight decay must be nonnegative".into()));
        }
        Ok(OptimizerConfig {
            kind,
            lr: self.lr,
            weight_decay: self.weight_decay,
            decay_every: self.decay_every,
            decay_factor: self.decay_factor,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    /// Teacher checkpoint; distillation is off when absent.
    pub teacher: Option<PathBuf>,
    pub w_hard: f64,
    pub w_soft: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection { teacher: None, w_hard: 0.1, w_soft: 0.9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub eval_batch: usize,
    pub optimizer: OptimizerSection,
    pub distill: DistillSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            batch_size: d.batch_size,
            eval_every: d.eval_every,
            patience: d.patience,
            max_steps: d.max_steps,
            eval_batch: d.eval_batch,
            optimizer: OptimizerSection::from_config(&d.optimizer),
            distill: DistillSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    pub signal: SignalKind,
    pub beta: f64,
    /// Choose beta automatically before every prune (overrides `beta`).
    pub beta_auto: bool,
    pub features_to_prune: usize,
    pub steps_per_prune: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSection,
    /// `train` or `validation`.
    pub signal_source: SignalSource,
    pub eval_every_prunes: usize,
    pub eval_samples: usize,
    /// Fine-tuning steps after the last prune.
    pub fine_tune_steps: usize,
    /// Skip fine-tuning after pruning.
    pub no_retrain: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        let d = PruneConfig::default();
        PruneSection {
            signal: d.signal,
            beta: 0.0,
            beta_auto: false,
            features_to_prune: 100,
            steps_per_prune: d.steps_per_prune,
            batch_size: d.batch_size,
            optimizer: OptimizerSection::from_config(&d.optimizer),
            signal_source: d.signal_source,
            eval_every_prunes: 10,
            eval_samples: 2000,
            fine_tune_steps: 2000,
            no_retrain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub signals: Vec<SignalKind>,
    pub per_round: usize,
    /// Features to prune per curve; 0 means half of all maskable features.
    pub max_pruned: usize,
    /// Training points used to estimate the signal each round.
    pub signal_samples: usize,
    /// Validation points used to evaluate the loss.
    pub eval_samples: usize,
    /// Cost weight for fisher and the regularized Molchanov variants.
    pub beta: f64,
    pub batch_size: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            signals: SignalKind::ALL.to_vec(),
            per_round: 10,
            max_pruned: 0,
            signal_samples: 4000,
            eval_samples: 7000,
            beta: 0.0,
            batch_size: 64,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            n_train: fisher_prune::mnist::DEFAULT_TRAIN_SIZE,
            train: TrainSection::default(),
            prune: PruneSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved config. Where the
    /// outputs go does not change them, so `out_dir` is left out.
    pub fn hash(&self) -> String {
        let keyed = RunConfig { out_dir: PathBuf::new(), ..self.clone() };
        hex::encode(Sha256::digest(keyed.to_toml().as_bytes()))[..16].to_string()
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 {
            return Err(CliError::Config("train.batch_size and train.eval_every must be positive".into()));
        }
        Ok(TrainConfig {
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            patience: t.patience,
            max_steps: t.max_steps,
            eval_batch: t.eval_batch.max(1),
            seed: self.seed,
            optimizer: t.optimizer.resolve()?,
        })
    }

    pub fn beta_mode(&self) -> BetaMode {
        if self.prune.beta_auto {
            BetaMode::Auto
        } else {
            BetaMode::Fixed(self.prune.beta)
        }
    }

    pub fn prune_config(&self) -> Result<PruneConfig, CliError> {
        let p = &self.prune;
        if p.beta.is_nan() || p.beta < 0.0 {
            return Err(CliError::Config("prune.beta must be a nonnegative number".into()));
        }
        if p.batch_size == 0 {
            return Err(CliError::Config("prune.batch_size must be positive".into()));
        }
        Ok(PruneConfig {
            signal: p.signal,
            beta: self.beta_mode(),
            features_to_prune: p.features_to_prune,
            steps_per_prune: p.steps_per_prune.max(1),
            batch_size: p.batch_size,
            seed: self.seed,
            optimizer: p.optimizer.resolve()?,
            signal_source: p.signal_source,
            eval_every_prunes: p.eval_every_prunes,
            eval_samples: p.eval_samples,
        })
    }

    pub fn sweep_config(&self, signal: SignalKind, total_features: usize) -> SweepConfig {
        let s = &self.sweep;
        let max_pruned = if s.max_pruned == 0 { total_features / 2 } else { s.max_pruned };
        let weighted = signal == SignalKind::Fisher || signal.uses_frozen_cost();
        SweepConfig {
            beta: BetaMode::Fixed(if weighted { s.beta } else { 0.0 }),
            per_round: s.per_round.max(1),
            batch_size: s.batch_size.max(1),
            ..SweepConfig::for_signal(signal, max_pruned)
        }
    }
}
