//! Pruning signals, combined loss/cost scoring and greedy feature selection.
//!
//! The Fisher signal of feature `k` is `1/(2N) * sum_n g_nk^2` where `g_nk`
//! is the gradient of sample `n`'s loss with respect to the feature's mask.
//! Those gradients fall out of the ordinary backward pass through
//! [`Tape::mask_scale`], so accumulating the signal needs no extra passes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flops::CostLedger;
use crate::model::{FeatureId, ForwardPass, Lineage, MaskableModel};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    Fisher,
    Molchanov,
    MolchanovNorm,
    MolchanovReg,
    MolchanovNormReg,
    L1a,
    L1w,
}

impl SignalKind {
    pub const ALL: [SignalKind; 7] = [
        SignalKind::Fisher,
        SignalKind::Molchanov,
        SignalKind::MolchanovNorm,
        SignalKind::MolchanovReg,
        SignalKind::MolchanovNormReg,
        SignalKind::L1a,
        SignalKind::L1w,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SignalKind::Fisher => "fisher",
            SignalKind::Molchanov => "molchanov",
            SignalKind::MolchanovNorm => "molchanov-norm",
            SignalKind::MolchanovReg => "molchanov-reg",
            SignalKind::MolchanovNormReg => "molchanov-norm-reg",
            SignalKind::L1a => "l1a",
            SignalKind::L1w => "l1w",
        }
    }

    /// Variants that add a cost penalty computed once before pruning starts.
    pub fn uses_frozen_cost(self) -> bool {
        matches!(self, SignalKind::MolchanovReg | SignalKind::MolchanovNormReg)
    }

    pub fn needs_gradients(self) -> bool {
        !matches!(self, SignalKind::L1a | SignalKind::L1w)
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SignalKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown signal `{s}`")))
    }
}

/// Running per-feature sums for every signal, indexed `[maskable layer][feature]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignalAccumulator {
    squared: Vec<Vec<f64>>,
    abs_batch: Vec<Vec<f64>>,
    abs_activation: Vec<Vec<f64>>,
    spatial: Vec<usize>,
    samples: usize,
}

impl SignalAccumulator {
    pub fn new<T: Scalar>(model: &MaskableModel<T>) -> Self {
        let sizes: Vec<usize> = (0..model.num_maskable()).map(|o| model.mask(o).len()).collect();
        let spatial = model
            .maskable_layers()
            .iter()
            .map(|&pos| model.output_shape(pos)[1..].iter().product())
            .collect();
        SignalAccumulator {
            squared: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            abs_batch: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            abs_activation: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            spatial,
            samples: 0,
        }
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn reset(&mut self) {
        for v in self.squared.iter_mut().chain(&mut self.abs_batch).chain(&mut self.abs_activation) {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        self.samples = 0;
    }

    /// Adds one batch. The tape's last backward root must be the batch-mean
    /// loss of `pass`; per-sample gradients are recovered by scaling with the
    /// batch size.
    pub fn accumulate<T: Scalar>(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        if !tape.has_gradients() {
            return Err(Error::State("accumulate called before backward".into()));
        }
        self.add_activations(tape, pass)?;
        for (layer, site) in pass.masks.iter().enumerate() {
            let g = tape.mask_grad_per_sample(site.mask)?;
            let (n, k) = (g.shape()[0], g.shape()[1]);
            let scale = n as f64;
            let mut batch_sum = vec![0.0f64; k];
            for row in g.data().chunks(k) {
                for (j, v) in row.iter().enumerate() {
                    let gnk = v.to_f64().unwrap() * scale;
                    self.squared[layer][j] += gnk * gnk;
                    batch_sum[j] += gnk;
                }
            }
            for (acc, s) in self.abs_batch[layer].iter_mut().zip(batch_sum) {
                *acc += s.abs();
            }
        }
        Ok(())
    }

    /// Adds activation statistics only (enough for L1A); usable on an
    /// inference tape.
    pub fn accumulate_activations<T: Scalar>(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        self.add_activations(tape, pass)
    }

    fn add_activations<T: Scalar>(&mut self, tape: &Tape<T>, pass: &ForwardPass) -> Result<()> {
        if pass.masks.len() != self.squared.len() {
            return Err(Error::Input("forward pass does not match the accumulator's model".into()));
        }
        let mut batch = None;
        for (layer, site) in pass.masks.iter().enumerate() {
            let a = tape.value(site.activation);
            let (n, k) = (a.shape()[0], a.shape()[1]);
            if k != self.squared[layer].len() {
                return Err(Error::Input(format!("layer {layer} has {k} features, accumulator expects {}", self.squared[layer].len())));
            }
            batch = Some(n);
            let inner = a.per_sample_len() / k;
            for (i, chunk) in a.data().chunks(inner).enumerate() {
                let s: f64 = chunk.iter().map(|v| v.to_f64().unwrap().abs()).sum();
                self.abs_activation[layer][i % k] += s;
            }
        }
        self.samples += batch.unwrap_or(0);
        Ok(())
    }

    /// Sums another accumulator (e.g. from a data shard) into this one.
    pub fn merge(&mut self, other: &SignalAccumulator) -> Result<()> {
        if self.spatial != other.spatial || self.squared.iter().map(Vec::len).ne(other.squared.iter().map(Vec::len)) {
            return Err(Error::Input("cannot merge accumulators of different models".into()));
        }
        for (dst, src) in [
            (&mut self.squared, &other.squared),
            (&mut self.abs_batch, &other.abs_batch),
            (&mut self.abs_activation, &other.abs_activation),
        ] {
            for (d, s) in dst.iter_mut().zip(src) {
                d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
            }
        }
        self.samples += other.samples;
        Ok(())
    }

    fn require_samples(&self) -> Result<f64> {
        if self.samples == 0 {
            Err(Error::State("pruning signal read before any samples were accumulated".into()))
        } else {
            Ok(self.samples as f64)
        }
    }

    /// Estimated loss increase from removing `f`: `1/(2N) * sum_n g_nk^2`.
    pub fn fisher_delta(&self, f: FeatureId) -> Result<f64> {
        let n = self.require_samples()?;
        Ok(self.squared[f.layer][f.index] / (2.0 * n))
    }

    /// Mean over batches of the absolute summed mask gradient, optionally
    /// divided by the L2 norm of the layer's signal vector over `alive`.
    pub fn molchanov(&self, f: FeatureId, normalized: bool, alive: Option<&[bool]>) -> Result<f64> {
        let n = self.require_samples()?;
        let raw = self.abs_batch[f.layer][f.index] / n;
        if !normalized {
            return Ok(raw);
        }
        let norm = self.abs_batch[f.layer]
            .iter()
            .enumerate()
            .filter(|(k, _)| alive.is_none_or(|a| a[*k]))
            .map(|(_, v)| (v / n) * (v / n))
            .sum::<f64>()
            .sqrt();
        Ok(if norm > 0.0 { raw / norm } else { 0.0 })
    }

    /// Mean absolute activation `1/(N*H*W) * sum |a_nkij|`.
    pub fn l1a(&self, f: FeatureId) -> Result<f64> {
        let n = self.require_samples()?;
        Ok(self.abs_activation[f.layer][f.index] / (n * self.spatial[f.layer] as f64))
    }
}

/// L1 norm of the weights (and bias) producing feature `f`.
pub fn l1w<T: Scalar>(model: &MaskableModel<T>, f: FeatureId) -> Result<f64> {
    model.is_alive(f)?;
    let pos = model.maskable_layers()[f.layer];
    let p = model.params()[pos].as_ref().unwrap();
    let row = p.weight.len() / p.weight.shape()[0];
    let w: f64 = p.weight.data()[f.index * row..(f.index + 1) * row].iter().map(|v| v.to_f64().unwrap().abs()).sum();
    Ok(w + p.bias.data()[f.index].to_f64().unwrap().abs())
}

/// Loss-increase estimate for a single parameter with per-sample gradients
/// `grads`: `theta^2/(2N) * sum_n g_n^2`.
pub fn parameter_fisher_delta(theta: f64, grads: &[f64]) -> Result<f64> {
    if grads.is_empty() {
        return Err(Error::State("no samples".into()));
    }
    Ok(theta * theta * grads.iter().map(|g| g * g).sum::<f64>() / (2.0 * grads.len() as f64))
}

/// Signal value of every feature for `kind`, `[maskable layer][feature]`.
/// Masked features get a value too but are never candidates.
pub fn signal_values<T: Scalar>(
    kind: SignalKind,
    acc: &SignalAccumulator,
    model: &MaskableModel<T>,
) -> Result<Vec<Vec<f64>>> {
    (0..model.num_maskable())
        .map(|layer| {
            let mask = model.mask(layer);
            (0..mask.len())
                .map(|k| {
                    let f = FeatureId::new(layer, k);
                    match kind {
                        SignalKind::Fisher => acc.fisher_delta(f),
                        SignalKind::Molchanov | SignalKind::MolchanovReg => acc.molchanov(f, false, Some(mask)),
                        SignalKind::MolchanovNorm | SignalKind::MolchanovNormReg => acc.molchanov(f, true, Some(mask)),
                        SignalKind::L1a => acc.l1a(f),
                        SignalKind::L1w => l1w(model, f),
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneCandidate {
    pub feature: FeatureId,
    pub delta_loss: f64,
    pub delta_cost: i64,
    pub score: f64,
    pub beta: f64,
}

/// FLOPs per cost unit: `dC` enters scores in MFLOPs, so `beta` is a loss
/// increase per MFLOP saved. Candidates and audit logs keep exact FLOPs.
pub const COST_UNIT: f64 = 1e6;

impl PruneCandidate {
    pub fn new(feature: FeatureId, delta_loss: f64, delta_cost: i64) -> Self {
        PruneCandidate { feature, delta_loss, delta_cost, score: delta_loss, beta: 0.0 }
    }

    /// `-max(dL, 0) / dC`, the trade-off weight at which pruning this
    /// feature breaks even.
    pub fn break_even_beta(&self) -> f64 {
        -self.delta_loss.max(0.0) / (self.delta_cost as f64 / COST_UNIT)
    }
}

/// `dL + beta * dC` with `dC` in FLOPs converted to cost units; pruning is
/// worthwhile when this is `<= 0`.
pub fn combined_score(delta_loss: f64, delta_cost: i64, beta: f64) -> f64 {
    delta_loss + beta * (delta_cost as f64 / COST_UNIT)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "beta", rename_all = "kebab-case")]
pub enum BetaMode {
    Fixed(f64),
    Auto,
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::Fixed(b) => write!(f, "beta={b:e}"),
            BetaMode::Auto => f.write_str("beta=auto"),
        }
    }
}

/// Smallest trade-off weight at which some candidate becomes worth pruning,
/// with the position of that candidate (first one on ties).
pub fn beta_star(candidates: &[PruneCandidate]) -> Result<(f64, usize)> {
    if candidates.is_empty() {
        return Err(Error::Input("beta_star needs at least one candidate".into()));
    }
    if let Some(c) = candidates.iter().find(|c| c.delta_cost >= 0 || !c.delta_loss.is_finite()) {
        return Err(Error::Input(format!(
            "candidate {} has dC = {} and dL = {}; need dC < 0 and finite dL",
            c.feature, c.delta_cost, c.delta_loss
        )));
    }
    let mut best = (candidates[0].break_even_beta(), 0);
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = c.break_even_beta();
        if b < best.0 {
            best = (b, i);
        }
    }
    Ok(best)
}

/// Picks the candidate to prune under `mode`, filling in its score and the
/// beta used. Candidates must be in (layer, index) order; ties go to the
/// earliest.
pub fn choose(candidates: &[PruneCandidate], mode: BetaMode) -> Result<PruneCandidate> {
    if candidates.is_empty() {
        return Err(Error::Input("no candidates".into()));
    }
    let beta = match mode {
        BetaMode::Fixed(b) => b,
        BetaMode::Auto => {
            let (b, i) = beta_star(candidates)?;
            let mut c = candidates[i];
            c.beta = b;
            c.score = combined_score(c.delta_loss, c.delta_cost, b);
            return Ok(c);
        }
    };
    let mut best: Option<PruneCandidate> = None;
    for c in candidates {
        let score = combined_score(c.delta_loss, c.delta_cost, beta);
        if best.is_none_or(|b| score < b.score) {
            best = Some(PruneCandidate { score, beta, ..*c });
        }
    }
    Ok(best.unwrap())
}

/// Where candidate cost deltas come from.
#[derive(Clone, Debug)]
pub enum CostSource<'a> {
    /// Recomputed from the current architecture.
    Live(&'a CostLedger),
    /// Deltas frozen before pruning started, indexed by original feature.
    Frozen { initial: &'a CostLedger, lineage: &'a Lineage },
}

/// All prunable features with their signal and cost delta, in (layer,
/// index) order. Features are named by their indices in `model`.
pub fn candidates<T: Scalar>(
    model: &MaskableModel<T>,
    signals: &[Vec<f64>],
    costs: &CostSource<'_>,
) -> Vec<PruneCandidate> {
    model
        .features()
        .into_iter()
        .filter(|&f| model.is_prunable(f))
        .map(|f| {
            let dc = match costs {
                CostSource::Live(ledger) => ledger.delta(f),
                CostSource::Frozen { initial, lineage } => initial.delta(lineage.original(f)),
            };
            PruneCandidate::new(f, signals[f.layer][f.index], dc)
        })
        .collect()
}

/// One prune, as written to the audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub layer: String,
    /// Feature index in the original (uncompacted) model.
    pub feature: usize,
    pub delta_loss: f64,
    pub delta_cost: i64,
    pub beta: f64,
    pub score: f64,
    pub total_flops: u64,
    /// FLOPs of the conv layers alone.
    pub conv_flops: u64,
    pub val_error: Option<f64>,
}

/// The candidate `mode` would prune next under signal `kind`, or `None`
/// when every remaining feature is the last survivor of its layer.
pub fn select<T: Scalar>(
    kind: SignalKind,
    acc: &SignalAccumulator,
    model: &MaskableModel<T>,
    costs: &CostSource<'_>,
    mode: BetaMode,
) -> Result<Option<PruneCandidate>> {
    let signals = signal_values(kind, acc, model)?;
    let cands = candidates(model, &signals, costs);
    if cands.is_empty() {
        return Ok(None);
    }
    choose(&cands, mode).map(Some)
}

/// Prunes the best Fisher candidate of `model`, refreshes `ledger`, and
/// resets `acc`. Returns `None` once no feature may be pruned.
pub fn select_and_prune<T: Scalar>(
    model: &mut MaskableModel<T>,
    ledger: &mut CostLedger,
    acc: &mut SignalAccumulator,
    mode: BetaMode,
) -> Result<Option<PruneCandidate>> {
    let Some(chosen) = select(SignalKind::Fisher, acc, model, &CostSource::Live(ledger), mode)? else {
        return Ok(None);
    };
    model.prune(chosen.feature)?;
    *ledger = CostLedger::compute(model)?;
    acc.reset();
    Ok(Some(chosen))
}

pub const AUDIT_HEADER: [&str; 10] =
    ["step", "layer", "feature", "delta_loss", "delta_cost", "beta", "score", "total_flops", "conv_flops", "val_error"];

/// Writes events as CSV with a header row.
pub fn write_audit_csv<W: Write>(out: W, events: &[PruneEvent]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AUDIT_HEADER)?;
    for e in events {
        w.write_record([
            e.step.to_string(),
            e.layer.clone(),
            e.feature.to_string(),
            format!("{:e}", e.delta_loss),
            e.delta_cost.to_string(),
            format!("{:e}", e.beta),
            format!("{:e}", e.score),
            e.total_flops.to_string(),
            e.conv_flops.to_string(),
            e.val_error.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_audit_csv<R: std::io::Read>(input: R) -> Result<Vec<PruneEvent>, csv::Error> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().collect()
}
