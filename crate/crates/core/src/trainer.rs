//! Training loops: pretraining with early stopping, distillation, the
//! prune-while-train schedule, post-prune fine-tuning and the no-retrain
//! pruning sweep.
//!
//! Loops that run on a partially pruned model train a compacted copy and
//! write the surviving parameters back, so masked features cost nothing and
//! their parameters stay exactly as they were.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Tape, ValueId};
use crate::error::{Error, Result};
use crate::flops::CostLedger;
use crate::mnist::Dataset;
use crate::model::{FeatureId, ForwardPass, Lineage, MaskableModel, ParamFlags, Params};
use crate::pruning::{self, BetaMode, CostSource, PruneEvent, SignalAccumulator, SignalKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiply the learning rate by `decay_factor` every `decay_every`
    /// steps; 0 keeps it constant.
    pub decay_every: usize,
    pub decay_factor: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            weight_decay: 5e-4,
            decay_every: 0,
            decay_factor: 1.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 },
            lr,
            weight_decay: 0.0,
            decay_every: 0,
            decay_factor: 1.0,
        }
    }

    /// Pretraining recipe: SGD(0.01, 0.9) halved every 3000 steps.
    pub fn pretrain() -> Self {
        OptimizerConfig { decay_every: 3000, decay_factor: 0.5, ..Self::sgd(0.01, 0.9) }
    }

    /// Fixed-rate SGD used while pruning.
    pub fn pruning() -> Self {
        Self::sgd(0.0025, 0.9)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match step.checked_div(self.decay_every) {
            Some(k) => self.lr * self.decay_factor.powi(k as i32),
            None => self.lr,
        }
    }
}

/// Optimizer with per-parameter buffers laid out like the model's params.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Option<Params<f32>>>,
    second: Vec<Option<Params<f32>>>,
    step: usize,
}

fn zeros_like(params: &[Option<Params<f32>>]) -> Vec<Option<Params<f32>>> {
    params
        .iter()
        .map(|p| p.as_ref().map(|p| Params { weight: Tensor::zeros(p.weight.shape()), bias: Tensor::zeros(p.bias.shape()) }))
        .collect()
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, model: &MaskableModel<f32>) -> Self {
        let first = zeros_like(model.params());
        let second = match config.kind {
            OptimizerKind::Adam { .. } => zeros_like(model.params()),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Optimizer { config, first, second, step: 0 }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Applies one update. Entries flagged in `frozen` are skipped entirely:
    /// neither the parameter nor its buffers change.
    pub fn step(
        &mut self,
        params: &mut [Option<Params<f32>>],
        grads: &[Option<Params<f32>>],
        frozen: Option<&[Option<ParamFlags>]>,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Input("optimizer, parameters and gradients disagree on layer count".into()));
        }
        let lr = self.config.lr_at(self.step) as f32;
        let wd = self.config.weight_decay as f32;
        self.step += 1;
        let t = self.step as i32;
        for i in 0..params.len() {
            let (Some(p), Some(g)) = (params[i].as_mut(), grads[i].as_ref()) else { continue };
            let m = self.first[i].as_mut().unwrap();
            let flags = frozen.and_then(|f| f[i].as_ref());
            let parts = [
                (&mut p.weight, &g.weight, &mut m.weight, flags.map(|f| &f.weight[..])),
                (&mut p.bias, &g.bias, &mut m.bias, flags.map(|f| &f.bias[..])),
            ];
            for (j, (theta, grad, m1, fz)) in parts.into_iter().enumerate() {
                if theta.shape() != grad.shape() || theta.shape() != m1.shape() {
                    return Err(Error::Input(format!("layer {i}: gradient shape does not match parameters")));
                }
                let (th, gr, m1) = (theta.data_mut(), grad.data(), m1.data_mut());
                let skip = |k: usize| fz.is_some_and(|f| f[k]);
                match self.config.kind {
                    OptimizerKind::Sgd { momentum } => {
                        let mu = momentum as f32;
                        for k in 0..th.len() {
                            if skip(k) {
                                continue;
                            }
                            m1[k] = mu * m1[k] + lr * (gr[k] + wd * th[k]);
                            th[k] -= m1[k];
                        }
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let v = self.second[i].as_mut().unwrap();
                        let v = if j == 0 { v.weight.data_mut() } else { v.bias.data_mut() };
                        let (b1, b2) = (beta1 as f32, beta2 as f32);
                        let c1 = 1.0 - b1.powi(t);
                        let c2 = 1.0 - b2.powi(t);
                        for k in 0..th.len() {
                            if skip(k) {
                                continue;
                            }
                            let gk = gr[k] + wd * th[k];
                            m1[k] = b1 * m1[k] + (1.0 - b1) * gk;
                            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                            th[k] -= lr * (m1[k] / c1) / ((v[k] / c2).sqrt() + eps as f32);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Buffers for `model.compact()`, keeping the surviving entries.
    pub fn compacted_for(&self, model: &MaskableModel<f32>) -> Result<Optimizer> {
        Ok(Optimizer {
            config: self.config,
            first: model.compact_param_set(&self.first)?,
            second: if self.second.is_empty() { Vec::new() } else { model.compact_param_set(&self.second)? },
            step: self.step,
        })
    }
}

/// Parameter gradients recorded by `pass`, zero where a parameter was off
/// the backward path.
pub fn gradients(tape: &Tape<f32>, pass: &ForwardPass) -> Vec<Option<Params<f32>>> {
    pass.params
        .iter()
        .map(|p| {
            p.map(|(w, b)| {
                let get = |id: ValueId| {
                    tape.grad_ref(id).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
                };
                Params { weight: get(w), bias: get(b) }
            })
        })
        .collect()
}

/// `w_hard * CE(student, labels) + w_soft * CE(student, teacher)`. Both terms
/// are linear in the targets, so this is one cross-entropy against the
/// blended target rows. Weights that do not sum to one are allowed but
/// logged.
pub fn distill_loss(
    tape: &mut Tape<f32>,
    student_logits: ValueId,
    labels: &[usize],
    teacher_probs: &[f64],
    w_hard: f64,
    w_soft: f64,
) -> Result<ValueId> {
    if ((w_hard + w_soft) - 1.0).abs() > 1e-9 {
        log::warn!("distillation weights {w_hard} + {w_soft} do not sum to 1");
    }
    let z = tape.value(student_logits).shape().get(1).copied().unwrap_or(0);
    if teacher_probs.len() != labels.len() * z {
        return Err(Error::Input(format!(
            "teacher distribution has {} entries, expected {}",
            teacher_probs.len(),
            labels.len() * z
        )));
    }
    let mut targets: Vec<f64> = teacher_probs.iter().map(|p| w_soft * p).collect();
    for (row, &l) in labels.iter().enumerate() {
        if l >= z {
            return Err(Error::Input(format!("label {l} outside [0, {z})")));
        }
        targets[row * z + l] += w_hard;
    }
    tape.cross_entropy_with_targets(student_logits, targets)
}

/// What the training loss is.
#[derive(Clone, Copy, Debug)]
pub enum Objective<'a> {
    CrossEntropy,
    Distill { teacher: &'a MaskableModel<f32>, w_hard: f64, w_soft: f64 },
}

impl Objective<'_> {
    fn loss(&self, tape: &mut Tape<f32>, logits: ValueId, x: &Tensor<f32>, labels: &[usize]) -> Result<ValueId> {
        match *self {
            Objective::CrossEntropy => tape.softmax_cross_entropy(logits, labels),
            Objective::Distill { teacher, w_hard, w_soft } => {
                let t = teacher.predict(x)?;
                let probs = softmax_rows(t.data(), t.shape()[1]);
                distill_loss(tape, logits, labels, &probs, w_hard, w_soft)
            }
        }
    }
}

/// One forward/backward/update on a batch; returns the batch loss and the
/// number of misclassified samples. Parameters are untouched when the loss
/// is not finite.
fn train_step(
    model: &mut MaskableModel<f32>,
    opt: &mut Optimizer,
    frozen: Option<&[Option<ParamFlags>]>,
    x: &Tensor<f32>,
    labels: &[usize],
    objective: &Objective<'_>,
    acc: Option<&mut SignalAccumulator>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let pass = model.forward(&mut tape, xi)?;
    let wrong = count_wrong(tape.value(pass.logits), labels);
    let loss = objective.loss(&mut tape, pass.logits, x, labels)?;
    let value = tape.loss_value(loss).unwrap();
    if !value.is_finite() {
        return Ok((value, wrong));
    }
    tape.backward(loss)?;
    if let Some(acc) = acc {
        acc.accumulate(&tape, &pass)?;
    }
    let grads = gradients(&tape, &pass);
    opt.step(model.params_mut(), &grads, frozen)?;
    Ok((value, wrong))
}

fn count_wrong(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let z = logits.shape()[1];
    logits
        .data()
        .chunks(z)
        .zip(labels)
        .filter(|(row, &l)| {
            let arg = row.iter().enumerate().fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            arg != l
        })
        .count()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Mean cross-entropy.
    pub loss: f64,
    /// Misclassified fraction.
    pub error: f64,
    pub samples: usize,
}

pub fn evaluate(model: &MaskableModel<f32>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let (mut total, mut wrong) = (0.0f64, 0usize);
    for (x, labels) in data.sequential(batch_size) {
        let logits = model.predict(&x)?;
        let z = logits.shape()[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= z) {
            return Err(Error::Input(format!("label {bad} outside [0, {z})")));
        }
        let probs = softmax_rows(logits.data(), z);
        for (row, &l) in labels.iter().enumerate() {
            total -= probs[row * z + l].max(f64::MIN_POSITIVE).ln();
        }
        wrong += count_wrong(&logits, &labels);
    }
    let n = data.len();
    Ok(Evaluation { loss: total / n as f64, error: wrong as f64 / n as f64, samples: n })
}

/// Stops after `patience` consecutive evaluations without a strictly lower
/// validation loss and remembers the best model seen.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    snapshot: Option<MaskableModel<f32>>,
    misses: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper { patience, best: None, snapshot: None, misses: 0 }
    }

    /// Records an evaluation; returns `true` when training should stop.
    pub fn observe(&mut self, step: usize, val_loss: f64, model: &MaskableModel<f32>) -> bool {
        if self.best.is_none_or(|(_, b)| val_loss < b) {
            self.best = Some((step, val_loss));
            self.snapshot = Some(model.clone());
            self.misses = 0;
        } else {
            self.misses += 1;
        }
        self.patience > 0 && self.misses >= self.patience
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn snapshot(&self) -> Option<&MaskableModel<f32>> {
        self.snapshot.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping; 0 disables.
    pub patience: usize,
    pub max_steps: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            eval_every: 100,
            patience: 20,
            max_steps: 12_000,
            eval_batch: 1000,
            seed: 0,
            optimizer: OptimizerConfig::pretrain(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    /// Parameters with the lowest validation loss seen.
    pub model: MaskableModel<f32>,
    pub history: Vec<HistoryRow>,
    pub best_step: usize,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

/// Training failure carrying whatever progress was made.
#[derive(Debug)]
pub struct TrainError {
    pub error: Error,
    /// Last parameters for which the training loss was finite.
    pub last_finite: Option<MaskableModel<f32>>,
    pub history: Vec<HistoryRow>,
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrainError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<Error> for TrainError {
    fn from(error: Error) -> Self {
        TrainError { error, last_finite: None, history: Vec::new() }
    }
}

impl From<TrainError> for Error {
    fn from(e: TrainError) -> Self {
        e.error
    }
}

/// Trains until `max_steps` or early stopping and returns the best
/// validation snapshot. Masked features of `model` stay frozen.
pub fn train(
    model: &MaskableModel<f32>,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &TrainConfig,
    objective: &Objective<'_>,
) -> Result<Trained, TrainError> {
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::Input("batch_size and eval_every must be positive".into()).into());
    }
    if train_data.is_empty() {
        return Err(Error::Input("empty training set".into()).into());
    }
    let lineage = Lineage::of_alive(model);
    let mut work = model.compact()?;
    let mut opt = Optimizer::new(cfg.optimizer, &work);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let (mut win_loss, mut win_wrong, mut win_n) = (0.0f64, 0usize, 0usize);
    let mut step = 0;
    let mut stopped_early = false;
    let mut epoch = 0u64;
    let restore = |work: &MaskableModel<f32>| -> Result<MaskableModel<f32>> {
        let mut full = model.clone();
        full.scatter_from(work, &lineage)?;
        Ok(full)
    };
    'outer: while step < cfg.max_steps {
        for (x, y) in train_data.batches(cfg.batch_size, cfg.seed, epoch) {
            let (loss, wrong) = match train_step(&mut work, &mut opt, None, &x, &y, objective, None) {
                Ok(v) => v,
                Err(e) => return Err(TrainError { error: e, last_finite: Some(restore(&work)?), history }),
            };
            step += 1;
            if !loss.is_finite() {
                return Err(TrainError {
                    error: Error::Divergence { step },
                    last_finite: Some(restore(&work)?),
                    history,
                });
            }
            win_loss += loss * y.len() as f64;
            win_wrong += wrong;
            win_n += y.len();
            let last = step == cfg.max_steps;
            if step % cfg.eval_every == 0 || last {
                let ev = evaluate(&work, val_data, cfg.eval_batch)?;
                history.push(HistoryRow {
                    step,
                    split: "train".into(),
                    loss: win_loss / win_n as f64,
                    error: win_wrong as f64 / win_n as f64,
                });
                history.push(HistoryRow { step, split: "val".into(), loss: ev.loss, error: ev.error });
                (win_loss, win_wrong, win_n) = (0.0, 0, 0);
                if stopper.observe(step, ev.loss, &work) {
                    stopped_early = true;
                    break 'outer;
                }
            }
            if last {
                break 'outer;
            }
        }
        epoch += 1;
    }
    let (best_step, best_val_loss, best) = match (stopper.best(), stopper.snapshot()) {
        (Some((s, l)), Some(m)) => (s, l, restore(m)?),
        _ => (0, f64::NAN, restore(&work)?),
    };
    Ok(Trained { model: best, history, best_step, best_val_loss, steps: step, stopped_early })
}

/// Post-prune fine-tuning: ordinary training (with early stopping and best
/// snapshot restore) for a fixed step budget.
pub fn fine_tune(
    model: &MaskableModel<f32>,
    train_data: &Dataset,
    val_data: &Dataset,
    steps: usize,
    cfg: &TrainConfig,
    objective: &Objective<'_>,
) -> Result<Trained, TrainError> {
    let cfg = TrainConfig { max_steps: steps, ..cfg.clone() };
    train(model, train_data, val_data, &cfg, objective)
}

/// Which data the pruning signal is accumulated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalSource {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub signal: SignalKind,
    pub beta: BetaMode,
    pub features_to_prune: usize,
    pub steps_per_prune: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub signal_source: SignalSource,
    /// Record validation error in the audit log every this many prunes
    /// (0 = never); uses the first `eval_samples` validation points.
    pub eval_every_prunes: usize,
    pub eval_samples: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            signal: SignalKind::Fisher,
            beta: BetaMode::Fixed(0.0),
            features_to_prune: 0,
            steps_per_prune: 10,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerConfig::pruning(),
            signal_source: SignalSource::Train,
            eval_every_prunes: 0,
            eval_samples: 7000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PruneStatus {
    Completed,
    /// Every remaining feature was the last one in its layer.
    Exhausted,
}

/// Endless stream of shuffled batches that reshuffles per epoch.
#[derive(Clone, Debug)]
struct BatchCursor {
    seed: u64,
    epoch: u64,
    pos: usize,
    order: Vec<usize>,
}

impl BatchCursor {
    fn new(seed: u64) -> Self {
        BatchCursor { seed, epoch: 0, pos: 0, order: Vec::new() }
    }

    fn next(&mut self, data: &Dataset, batch_size: usize) -> (Tensor<f32>, Vec<usize>) {
        if self.order.is_empty() {
            self.order = data.epoch_order(self.seed, self.epoch);
        } else if self.pos >= self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.order = data.epoch_order(self.seed, self.epoch);
        }
        let end = (self.pos + batch_size.max(1)).min(self.order.len());
        let batch = data.batch(&self.order[self.pos..end]);
        self.pos = end;
        batch
    }
}

/// Forward/backward on one batch purely to accumulate signal statistics.
fn accumulate_batch(
    model: &MaskableModel<f32>,
    acc: &mut SignalAccumulator,
    x: &Tensor<f32>,
    labels: &[usize],
    kind: SignalKind,
) -> Result<()> {
    if kind.needs_gradients() {
        let mut tape = Tape::new();
        let xi = tape.constant(x.clone());
        let pass = model.forward(&mut tape, xi)?;
        let loss = tape.softmax_cross_entropy(pass.logits, labels)?;
        tape.backward(loss)?;
        acc.accumulate(&tape, &pass)
    } else {
        let mut tape = Tape::inference();
        let xi = tape.constant(x.clone());
        let pass = model.forward(&mut tape, xi)?;
        acc.accumulate_activations(&tape, &pass)
    }
}

/// State of a prune-while-train run; it can be resumed, or cloned to branch
/// fine-tuning off at intermediate prune counts.
#[derive(Clone, Debug)]
pub struct PruneRun {
    /// Full-size model with masks; masked parameters keep their values from
    /// the moment they were pruned.
    model: MaskableModel<f32>,
    work: MaskableModel<f32>,
    lineage: Lineage,
    opt: Optimizer,
    initial_costs: CostLedger,
    audit: Vec<PruneEvent>,
    steps: usize,
    train_cursor: BatchCursor,
    val_cursor: BatchCursor,
}

impl PruneRun {
    pub fn new(model: &MaskableModel<f32>, cfg: &PruneConfig) -> Result<Self> {
        let work = model.compact()?;
        Ok(PruneRun {
            model: model.clone(),
            opt: Optimizer::new(cfg.optimizer, &work),
            lineage: Lineage::of_alive(model),
            initial_costs: CostLedger::compute(model)?,
            work,
            audit: Vec::new(),
            steps: 0,
            train_cursor: BatchCursor::new(cfg.seed),
            val_cursor: BatchCursor::new(cfg.seed ^ 0x5eed_5eed),
        })
    }

    pub fn pruned(&self) -> usize {
        self.audit.len()
    }

    pub fn audit(&self) -> &[PruneEvent] {
        &self.audit
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Full-size masked model with the current parameters.
    pub fn model(&self) -> &MaskableModel<f32> {
        &self.model
    }

    /// Compacted model with the current parameters.
    pub fn compacted(&self) -> &MaskableModel<f32> {
        &self.work
    }

    fn sync(&mut self) -> Result<()> {
        self.model.scatter_from(&self.work, &self.lineage)
    }

    /// Prunes working-model feature `f`; returns its original id.
    fn prune(&mut self, f: FeatureId) -> Result<FeatureId> {
        let original = self.lineage.original(f);
        self.work.prune(f)?;
        self.sync()?;
        self.model.prune(original)?;
        self.opt = self.opt.compacted_for(&self.work)?;
        self.lineage.retain_alive(&self.work);
        self.work = self.work.compact()?;
        Ok(original)
    }

    /// Runs the schedule until `target` features have been pruned in total
    /// (or none can be). Each prune follows `steps_per_prune` optimizer steps
    /// during which the signal is accumulated.
    pub fn run_until(
        &mut self,
        target: usize,
        train_data: &Dataset,
        val_data: &Dataset,
        cfg: &PruneConfig,
        objective: &Objective<'_>,
    ) -> Result<PruneStatus> {
        let eval_set = (cfg.eval_every_prunes > 0).then(|| val_data.head(cfg.eval_samples));
        while self.audit.len() < target {
            let mut acc = SignalAccumulator::new(&self.work);
            for _ in 0..cfg.steps_per_prune.max(1) {
                let (x, y) = self.train_cursor.next(train_data, cfg.batch_size);
                let on_train = cfg.signal_source == SignalSource::Train;
                let (loss, _) =
                    train_step(&mut self.work, &mut self.opt, None, &x, &y, objective, on_train.then_some(&mut acc))?;
                self.steps += 1;
                if !loss.is_finite() {
                    self.sync()?;
                    return Err(Error::Divergence { step: self.steps });
                }
                if !on_train {
                    let (vx, vy) = self.val_cursor.next(val_data, cfg.batch_size);
                    accumulate_batch(&self.work, &mut acc, &vx, &vy, cfg.signal)?;
                }
            }
            let ledger = CostLedger::compute(&self.work)?;
            let costs = if cfg.signal.uses_frozen_cost() {
                CostSource::Frozen { initial: &self.initial_costs, lineage: &self.lineage }
            } else {
                CostSource::Live(&ledger)
            };
            let Some(chosen) = pruning::select(cfg.signal, &acc, &self.work, &costs, cfg.beta)? else {
                self.sync()?;
                return Ok(PruneStatus::Exhausted);
            };
            let original = self.prune(chosen.feature)?;
            let after = CostLedger::compute(&self.work)?;
            let val_error = match &eval_set {
                Some(v) if (self.audit.len() + 1).is_multiple_of(cfg.eval_every_prunes) => Some(evaluate(&self.work, v, 1000)?.error),
                _ => None,
            };
            self.audit.push(PruneEvent {
                step: self.steps,
                layer: self.model.maskable_name(original.layer),
                feature: original.index,
                delta_loss: chosen.delta_loss,
                delta_cost: chosen.delta_cost,
                beta: chosen.beta,
                score: chosen.score,
                total_flops: after.total(),
                conv_flops: after.conv_total(),
                val_error,
            });
        }
        self.sync()?;
        Ok(PruneStatus::Completed)
    }
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    /// Full-size model with masks.
    pub model: MaskableModel<f32>,
    pub compacted: MaskableModel<f32>,
    pub audit: Vec<PruneEvent>,
    pub status: PruneStatus,
    pub steps: usize,
}

/// Prunes `cfg.features_to_prune` features while training.
pub fn prune_train_loop(
    model: &MaskableModel<f32>,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &PruneConfig,
    objective: &Objective<'_>,
) -> Result<PruneOutcome> {
    let mut run = PruneRun::new(model, cfg)?;
    let status = run.run_until(cfg.features_to_prune, train_data, val_data, cfg, objective)?;
    Ok(PruneOutcome {
        compacted: run.work.clone(),
        model: run.model,
        audit: run.audit,
        status,
        steps: run.steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub signal: SignalKind,
    pub beta: BetaMode,
    /// Use the costs computed before pruning started instead of recomputing
    /// them after every prune.
    pub frozen_cost: bool,
    pub per_round: usize,
    pub max_pruned: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
}

impl SweepConfig {
    /// Defaults for `signal`: its own cost convention, no cost weight.
    pub fn for_signal(signal: SignalKind, max_pruned: usize) -> Self {
        SweepConfig {
            signal,
            beta: BetaMode::Fixed(0.0),
            frozen_cost: signal.uses_frozen_cost(),
            per_round: 10,
            max_pruned,
            batch_size: 64,
            eval_batch: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pruned: usize,
    pub loss: f64,
    pub error: f64,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub points: Vec<SweepPoint>,
    /// Pruned features in order, as original ids.
    pub order: Vec<FeatureId>,
    pub model: MaskableModel<f32>,
    pub status: PruneStatus,
}

/// Pruning with frozen parameters: estimate the signal on `signal_data`,
/// prune `per_round` features, evaluate on `eval_data`, repeat.
pub fn no_retrain_sweep(
    model: &MaskableModel<f32>,
    signal_data: &Dataset,
    eval_data: &Dataset,
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    let initial = CostLedger::compute(model)?;
    let mut full = model.clone();
    let point = |m: &MaskableModel<f32>, pruned: usize| -> Result<SweepPoint> {
        let ev = evaluate(m, eval_data, cfg.eval_batch)?;
        Ok(SweepPoint { pruned, loss: ev.loss, error: ev.error, flops: CostLedger::compute(m)?.total() })
    };
    let mut points = vec![point(&full.compact()?, 0)?];
    let mut order = Vec::new();
    let mut status = PruneStatus::Completed;
    'rounds: while order.len() < cfg.max_pruned {
        let lineage = Lineage::of_alive(&full);
        let mut work = full.compact()?;
        let mut acc = SignalAccumulator::new(&work);
        if cfg.signal != SignalKind::L1w {
            for (x, y) in signal_data.sequential(cfg.batch_size) {
                accumulate_batch(&work, &mut acc, &x, &y, cfg.signal)?;
            }
        }
        for _ in 0..cfg.per_round.max(1) {
            if order.len() >= cfg.max_pruned {
                break;
            }
            let ledger = CostLedger::compute(&work)?;
            let costs = if cfg.frozen_cost {
                CostSource::Frozen { initial: &initial, lineage: &lineage }
            } else {
                CostSource::Live(&ledger)
            };
            let Some(chosen) = pruning::select(cfg.signal, &acc, &work, &costs, cfg.beta)? else {
                status = PruneStatus::Exhausted;
                break 'rounds;
            };
            work.prune(chosen.feature)?;
            let original = lineage.original(chosen.feature);
            full.prune(original)?;
            order.push(original);
        }
        points.push(point(&work.compact()?, order.len())?);
    }
    if points.last().is_some_and(|p| p.pruned != order.len()) {
        points.push(point(&full.compact()?, order.len())?);
    }
    Ok(SweepOutcome { points, order, model: full, status })
}

pub const HISTORY_HEADER: [&str; 4] = ["step", "split", "loss", "error"];

pub fn write_history_csv<W: std::io::Write>(out: W, rows: &[HistoryRow]) -> Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(HISTORY_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
