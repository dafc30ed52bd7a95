//! Exact integer FLOP accounting for conv and linear layers.
//!
//! A convolution producing an `H x W` map costs `H*W*Cout*(2*Cin*K^2 + 1)`;
//! a linear layer costs `Cout*(2*Cin + 1)`. Pooling, ReLU and flatten are
//! free. Channel counts are the surviving (unmasked) ones, so masking a
//! feature lowers both its own layer and the layer consuming it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureId, LayerSpec, MaskableModel};
use crate::tensor::Scalar;

fn overflow(what: &str) -> Error {
    Error::Overflow(format!("counting FLOPs of {what}"))
}

pub fn conv_flops(out_h: u64, out_w: u64, cin: u64, cout: u64, kernel: u64) -> Result<u64> {
    let per_output = kernel
        .checked_mul(kernel)
        .and_then(|k2| k2.checked_mul(cin))
        .and_then(|v| v.checked_mul(2))
        .and_then(|v| v.checked_add(1))
        .ok_or_else(|| overflow("a convolution"))?;
    out_h
        .checked_mul(out_w)
        .and_then(|v| v.checked_mul(cout))
        .and_then(|v| v.checked_mul(per_output))
        .ok_or_else(|| overflow("a convolution"))
}

pub fn linear_flops(cin: u64, cout: u64) -> Result<u64> {
    cin.checked_mul(2)
        .and_then(|v| v.checked_add(1))
        .and_then(|v| v.checked_mul(cout))
        .ok_or_else(|| overflow("a linear layer"))
}

/// Cost of layer `i` with the given live input/output extents.
fn layer_cost<T: Scalar>(model: &MaskableModel<T>, i: usize, cin: usize, cout: usize) -> Result<u64> {
    match model.layers()[i] {
        LayerSpec::Conv { kernel, .. } => {
            let out = model.output_shape(i);
            conv_flops(out[1] as u64, out[2] as u64, cin as u64, cout as u64, kernel as u64)
        }
        LayerSpec::Linear { .. } => linear_flops(cin as u64, cout as u64),
        _ => Ok(0),
    }
}

/// Live (input, output) extents of layer `i` in cost units. A linear layer
/// fed through a flatten counts individual inputs, i.e. channels times the
/// spatial extent.
fn cost_extents<T: Scalar>(model: &MaskableModel<T>, i: usize) -> (usize, usize) {
    model.live_extents(i)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Position in the model's layer list.
    pub layer: usize,
    pub kind: String,
    pub flops: u64,
}

/// Per-layer FLOPs and per-feature pruning deltas of a model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostLedger {
    layers: Vec<LayerCost>,
    total: u64,
    /// `deltas[l][k]`: change in total FLOPs from masking feature `k` of
    /// maskable layer `l`; zero for already-masked features.
    deltas: Vec<Vec<i64>>,
}

impl CostLedger {
    pub fn compute<T: Scalar>(model: &MaskableModel<T>) -> Result<Self> {
        let mut layers = Vec::new();
        let mut total = 0u64;
        for (i, spec) in model.layers().iter().enumerate() {
            if !spec.has_params() {
                continue;
            }
            let (cin, cout) = cost_extents(model, i);
            let flops = layer_cost(model, i, cin, cout)?;
            total = total.checked_add(flops).ok_or_else(|| overflow("the network"))?;
            let kind = match spec {
                LayerSpec::Conv { .. } => "conv",
                _ => "linear",
            };
            layers.push(LayerCost { layer: i, kind: kind.to_string(), flops });
        }
        let mut deltas = Vec::new();
        for (ordinal, &pos) in model.maskable_layers().iter().enumerate() {
            let mask = model.mask(ordinal);
            let d = feature_delta(model, pos)?;
            deltas.push(mask.iter().map(|&alive| if alive { d } else { 0 }).collect());
        }
        Ok(CostLedger { layers, total, deltas })
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn layers(&self) -> &[LayerCost] {
        &self.layers
    }

    /// FLOPs of the conv layers only.
    pub fn conv_total(&self) -> u64 {
        self.layers.iter().filter(|l| l.kind == "conv").map(|l| l.flops).sum()
    }

    pub fn delta(&self, f: FeatureId) -> i64 {
        self.deltas[f.layer][f.index]
    }

    pub fn deltas(&self) -> &[Vec<i64>] {
        &self.deltas
    }
}

/// Change in total FLOPs from masking one live feature of maskable layer
/// `pos`: the producer loses an output, the next parameter layer loses the
/// inputs that feature fed.
fn feature_delta<T: Scalar>(model: &MaskableModel<T>, pos: usize) -> Result<i64> {
    let (cin, cout) = cost_extents(model, pos);
    let own_before = layer_cost(model, pos, cin, cout)?;
    let own_after = layer_cost(model, pos, cin, cout.saturating_sub(1))?;
    let mut delta = own_after as i128 - own_before as i128;
    if let Some(consumer) = (pos + 1..model.layers().len()).find(|&j| model.layers()[j].has_params()) {
        let (ccin, ccout) = cost_extents(model, consumer);
        let full_out = model.layers()[pos].outputs().unwrap_or(1);
        let full_in = match model.layers()[consumer] {
            LayerSpec::Conv { in_channels, .. } => in_channels,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => full_out,
        };
        let spread = full_in / full_out;
        let before = layer_cost(model, consumer, ccin, ccout)?;
        let after = layer_cost(model, consumer, ccin.saturating_sub(spread), ccout)?;
        delta += after as i128 - before as i128;
    }
    i64::try_from(delta).map_err(|_| overflow("a feature delta"))
}

pub fn total_flops<T: Scalar>(model: &MaskableModel<T>) -> Result<u64> {
    Ok(CostLedger::compute(model)?.total())
}

/// `total_flops(model with f masked) - total_flops(model)`.
pub fn delta_flops<T: Scalar>(model: &MaskableModel<T>, f: FeatureId) -> Result<i64> {
    if !model.is_alive(f)? {
        return Err(Error::State(format!("feature {f} is already pruned")));
    }
    let pos = model.maskable_layers()[f.layer];
    feature_delta(model, pos)
}
