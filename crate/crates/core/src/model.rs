//! Layer-level network description with per-feature binary masks.
//!
//! A feature is one output channel of a convolution or one unit of a hidden
//! fully connected layer. Masks multiply a feature's activation (after the
//! ReLU that directly follows the layer, if any); structural compaction
//! removes masked features together with the consumer-layer inputs they feed.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result, ShapeError};
use crate::tensor::{conv_out_extent, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize },
    MaxPool2,
    Relu,
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    pub fn outputs(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out_channels, .. } => Some(out_channels),
            LayerSpec::Linear { out_features, .. } => Some(out_features),
            _ => None,
        }
    }

    fn with_outputs(self, n: usize) -> Self {
        match self {
            LayerSpec::Conv { in_channels, kernel, stride, pad, .. } => {
                LayerSpec::Conv { in_channels, out_channels: n, kernel, stride, pad }
            }
            LayerSpec::Linear { in_features, .. } => LayerSpec::Linear { in_features, out_features: n },
            other => other,
        }
    }

    fn with_inputs(self, n: usize) -> Self {
        match self {
            LayerSpec::Conv { out_channels, kernel, stride, pad, .. } => {
                LayerSpec::Conv { in_channels: n, out_channels, kernel, stride, pad }
            }
            LayerSpec::Linear { out_features, .. } => LayerSpec::Linear { in_features: n, out_features },
            other => other,
        }
    }
}

/// A prunable feature: `layer` is the position among the maskable layers
/// (0 = first maskable layer), `index` the feature within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FeatureId {
    pub layer: usize,
    pub index: usize,
}

impl FeatureId {
    pub fn new(layer: usize, index: usize) -> Self {
        FeatureId { layer, index }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Per-entry flags shaped like a layer's parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamFlags {
    pub weight: Vec<bool>,
    pub bias: Vec<bool>,
}

/// Handles recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub logits: ValueId,
    /// `(weight, bias)` handles per layer, `None` for parameter-free layers.
    pub params: Vec<Option<(ValueId, ValueId)>>,
    /// One entry per maskable layer.
    pub masks: Vec<MaskSite>,
}

#[derive(Clone, Copy, Debug)]
pub struct MaskSite {
    /// Mask leaf `[K]`.
    pub mask: ValueId,
    /// Activation before masking, `[N, K, ...]`.
    pub activation: ValueId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskableModel<T: Scalar = f32> {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params<T>>>,
    masks: Vec<Option<Vec<bool>>>,
    /// Per-sample activation shape after each layer.
    shapes: Vec<Vec<usize>>,
}

fn validate(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shape = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        shape = match *layer {
            LayerSpec::Conv { in_channels, out_channels, kernel, stride, pad } => {
                if shape.len() != 3 || shape[0] != in_channels {
                    return Err(ShapeError::new(format!(
                        "layer {i}: conv expects {in_channels} input channels, got activation {shape:?}"
                    ))
                    .into());
                }
                let oh = conv_out_extent(shape[1], kernel, stride, pad);
                let ow = conv_out_extent(shape[2], kernel, stride, pad);
                match (oh, ow, out_channels) {
                    (Some(oh), Some(ow), c) if c > 0 => vec![c, oh, ow],
                    _ => return Err(ShapeError::new(format!("layer {i}: conv does not fit {shape:?}")).into()),
                }
            }
            LayerSpec::MaxPool2 => {
                if shape.len() != 3 || !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                    return Err(ShapeError::new(format!("layer {i}: maxpool2 needs even extents, got {shape:?}")).into());
                }
                vec![shape[0], shape[1] / 2, shape[2] / 2]
            }
            LayerSpec::Relu => shape,
            LayerSpec::Flatten => vec![shape.iter().product()],
            LayerSpec::Linear { in_features, out_features } => {
                if shape != [in_features] || out_features == 0 {
                    return Err(ShapeError::new(format!(
                        "layer {i}: linear expects flat input of {in_features}, got {shape:?}"
                    ))
                    .into());
                }
                vec![out_features]
            }
        };
        shapes.push(shape.clone());
    }
    match layers.iter().rev().find(|l| l.has_params()) {
        Some(LayerSpec::Linear { .. }) => Ok(shapes),
        _ => Err(Error::Input("the final parameter layer must be a linear classifier".into())),
    }
}

impl<T: Scalar> MaskableModel<T> {
    /// Builds a model with Glorot-uniform weights and zero biases.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let shapes = validate(input_shape, &layers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last_param = layers.iter().rposition(|l| l.has_params());
        let mut params = Vec::with_capacity(layers.len());
        let mut masks = Vec::with_capacity(layers.len());
        for (i, layer) in layers.iter().enumerate() {
            let (wshape, fan_in, fan_out) = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => (
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                    out_channels * kernel * kernel,
                ),
                LayerSpec::Linear { in_features, out_features } => {
                    (vec![out_features, in_features], in_features, out_features)
                }
                _ => {
                    params.push(None);
                    masks.push(None);
                    continue;
                }
            };
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n: usize = wshape.iter().product();
            let w: Vec<T> = (0..n).map(|_| T::from_f64(rng.gen_range(-limit..limit))).collect();
            let outs = wshape[0];
            params.push(Some(Params { weight: Tensor::new(&wshape, w)?, bias: Tensor::zeros(&[outs]) }));
            masks.push(if Some(i) == last_param { None } else { Some(vec![true; outs]) });
        }
        Ok(MaskableModel { input_shape, layers, params, masks, shapes })
    }

    /// Assembles a model from explicit parameters and masks.
    pub fn from_parts(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<Option<Params<T>>>,
        masks: Vec<Option<Vec<bool>>>,
    ) -> Result<Self> {
        let shapes = validate(input_shape, &layers)?;
        if params.len() != layers.len() || masks.len() != layers.len() {
            return Err(Error::Input("params and masks must have one entry per layer".into()));
        }
        let last_param = layers.iter().rposition(|l| l.has_params());
        for (i, layer) in layers.iter().enumerate() {
            let expected_w = match *layer {
                LayerSpec::Conv { in_channels, out_channels, kernel, .. } => {
                    Some(vec![out_channels, in_channels, kernel, kernel])
                }
                LayerSpec::Linear { in_features, out_features } => Some(vec![out_features, in_features]),
                _ => None,
            };
            match (&expected_w, &params[i]) {
                (None, None) => {}
                (Some(ws), Some(p)) if p.weight.shape() == &ws[..] && p.bias.shape() == [ws[0]] => {}
                _ => return Err(ShapeError::new(format!("layer {i}: parameters do not match {layer:?}")).into()),
            }
            let maskable = layer.has_params() && Some(i) != last_param;
            match (&masks[i], maskable) {
                (None, false) => {}
                (Some(m), true) if Some(m.len()) == layer.outputs() => {}
                _ => return Err(Error::Input(format!("layer {i}: mask does not match maskability/extent"))),
            }
        }
        Ok(MaskableModel { input_shape, layers, params, masks, shapes })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Option<Params<T>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params<T>>] {
        &mut self.params
    }

    pub fn masks(&self) -> &[Option<Vec<bool>>] {
        &self.masks
    }

    /// Per-sample activation shape produced by layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    /// Layer positions of the maskable layers, in order.
    pub fn maskable_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.masks[i].is_some()).collect()
    }

    pub fn num_maskable(&self) -> usize {
        self.masks.iter().filter(|m| m.is_some()).count()
    }

    /// Display name of a maskable layer, e.g. `conv2` or `fc1`.
    pub fn maskable_name(&self, ordinal: usize) -> String {
        let pos = self.maskable_layers()[ordinal];
        let is_conv = matches!(self.layers[pos], LayerSpec::Conv { .. });
        let nth = self.layers[..=pos]
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv { .. }) == is_conv && l.has_params())
            .count();
        format!("{}{nth}", if is_conv { "conv" } else { "fc" })
    }

    pub fn mask(&self, ordinal: usize) -> &[bool] {
        let pos = self.maskable_layers()[ordinal];
        self.masks[pos].as_deref().unwrap()
    }

    pub fn total_features(&self) -> usize {
        self.masks.iter().flatten().map(Vec::len).sum()
    }

    pub fn alive_features(&self) -> usize {
        self.masks.iter().flatten().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    /// All features in (layer, index) order.
    pub fn features(&self) -> Vec<FeatureId> {
        self.masks
            .iter()
            .flatten()
            .enumerate()
            .flat_map(|(l, m)| (0..m.len()).map(move |k| FeatureId::new(l, k)))
            .collect()
    }

    pub fn is_alive(&self, f: FeatureId) -> Result<bool> {
        let m = self.mask_slot(f)?;
        Ok(m[f.index])
    }

    fn mask_slot(&self, f: FeatureId) -> Result<&Vec<bool>> {
        let m = self
            .masks
            .iter()
            .flatten()
            .nth(f.layer)
            .ok_or_else(|| Error::Input(format!("no maskable layer {}", f.layer)))?;
        if f.index >= m.len() {
            return Err(Error::Input(format!("feature {f} out of range ({} features)", m.len())));
        }
        Ok(m)
    }

    /// Sets a mask entry without structural checks.
    pub fn set_mask(&mut self, f: FeatureId, alive: bool) -> Result<()> {
        self.mask_slot(f)?;
        let m = self.masks.iter_mut().flatten().nth(f.layer).unwrap();
        m[f.index] = alive;
        Ok(())
    }

    /// Masks out `f`, refusing to remove the last surviving feature of a layer.
    pub fn prune(&mut self, f: FeatureId) -> Result<()> {
        let m = self.mask_slot(f)?;
        if !m[f.index] {
            return Err(Error::State(format!("feature {f} is already pruned")));
        }
        if m.iter().filter(|&&b| b).count() == 1 {
            return Err(Error::Structure(format!("feature {f} is the last survivor of its layer")));
        }
        self.set_mask(f, false)
    }

    /// Whether `f` may be pruned: alive and not the last survivor.
    pub fn is_prunable(&self, f: FeatureId) -> bool {
        match self.mask_slot(f) {
            Ok(m) => m[f.index] && m.iter().filter(|&&b| b).count() > 1,
            Err(_) => false,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.weight.len() + p.bias.len()).sum()
    }

    /// Parameters not frozen by a mask.
    pub fn effective_parameter_count(&self) -> usize {
        self.frozen_flags()
            .iter()
            .flatten()
            .map(|f| f.weight.iter().chain(&f.bias).filter(|&&b| !b).count())
            .sum()
    }

    /// Position of the parameter layer whose outputs feed layer `i`.
    fn producer(&self, i: usize) -> Option<usize> {
        (0..i).rev().find(|&j| self.layers[j].has_params())
    }

    /// Alive-state of each input entry of parameter layer `i`, expanded
    /// through any flatten between it and its producer.
    fn input_alive(&self, i: usize) -> Vec<bool> {
        let n_in = match self.layers[i] {
            LayerSpec::Conv { in_channels, .. } => in_channels,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => return Vec::new(),
        };
        match self.producer(i).and_then(|p| self.masks[p].as_ref()) {
            None => vec![true; n_in],
            Some(m) => {
                let spread = n_in / m.len();
                (0..n_in).map(|j| m[j / spread]).collect()
            }
        }
    }

    /// Count of live inputs and outputs of parameter layer `i`, in the
    /// units the cost model uses (channels for conv, features for linear).
    pub fn live_extents(&self, i: usize) -> (usize, usize) {
        let outs = match &self.masks[i] {
            Some(m) => m.iter().filter(|&&b| b).count(),
            None => self.layers[i].outputs().unwrap_or(0),
        };
        let ins = self.input_alive(i).iter().filter(|&&b| b).count();
        (ins, outs)
    }

    /// Entries whose optimizer updates are suppressed: producer rows (and
    /// bias) of masked features and consumer input slices fed by them.
    pub fn frozen_flags(&self) -> Vec<Option<ParamFlags>> {
        (0..self.layers.len())
            .map(|i| {
                let p = self.params[i].as_ref()?;
                let outs = p.weight.shape()[0];
                let row_len = p.weight.len() / outs;
                let in_alive = self.input_alive(i);
                let per_in = row_len / in_alive.len();
                let out_alive = self.masks[i].clone().unwrap_or_else(|| vec![true; outs]);
                let mut weight = Vec::with_capacity(p.weight.len());
                for &o in &out_alive {
                    for j in 0..row_len {
                        weight.push(!o || !in_alive[j / per_in]);
                    }
                }
                let bias = out_alive.iter().map(|&o| !o).collect();
                Some(ParamFlags { weight, bias })
            })
            .collect()
    }

    /// Records the masked forward pass of `input [N, C, H, W]` on `tape`.
    pub fn forward(&self, tape: &mut Tape<T>, input: ValueId) -> Result<ForwardPass> {
        let xs = tape.value(input).shape();
        if xs.len() != 4 || xs[1..] != self.input_shape {
            return Err(ShapeError::new(format!("model expects [N, {:?}], got {xs:?}", self.input_shape)).into());
        }
        let trainable = !tape.is_inference();
        let mut params = vec![None; self.layers.len()];
        let mut masks = Vec::new();
        let mut pending_mask: Option<usize> = None;
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match *layer {
                LayerSpec::Conv { .. } | LayerSpec::Linear { .. } => {
                    let p = self.params[i].as_ref().unwrap();
                    let (w, b) = if trainable {
                        (tape.leaf(p.weight.clone()), tape.leaf(p.bias.clone()))
                    } else {
                        (tape.constant(p.weight.clone()), tape.constant(p.bias.clone()))
                    };
                    params[i] = Some((w, b));
                    match *layer {
                        LayerSpec::Conv { stride, pad, .. } => tape.conv2d(x, w, b, stride, pad)?,
                        _ => tape.linear(x, w, b)?,
                    }
                }
                LayerSpec::MaxPool2 => tape.maxpool2(x)?,
                LayerSpec::Relu => tape.relu(x),
                LayerSpec::Flatten => tape.flatten(x)?,
            };
            if self.masks[i].is_some() {
                pending_mask = Some(i);
            }
            if let Some(owner) = pending_mask {
                let relu_follows = matches!(self.layers.get(i + 1), Some(LayerSpec::Relu));
                if i > owner || !relu_follows {
                    let m: Vec<T> = self.masks[owner]
                        .as_ref()
                        .unwrap()
                        .iter()
                        .map(|&b| if b { T::one() } else { T::zero() })
                        .collect();
                    let len = m.len();
                    let mask = tape.leaf(Tensor::new(&[len], m)?);
                    let activation = x;
                    x = tape.mask_scale(x, mask)?;
                    masks.push(MaskSite { mask, activation });
                    pending_mask = None;
                }
            }
        }
        Ok(ForwardPass { logits: x, params, masks })
    }

    /// Logits for a batch without recording gradients.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let pass = self.forward(&mut tape, x)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Live indices of the outputs of layer `i`.
    fn kept_outputs(&self, i: usize) -> Vec<usize> {
        match &self.masks[i] {
            Some(m) => (0..m.len()).filter(|&k| m[k]).collect(),
            None => (0..self.layers[i].outputs().unwrap_or(0)).collect(),
        }
    }

    fn kept_inputs(&self, i: usize) -> Vec<usize> {
        let alive = self.input_alive(i);
        (0..alive.len()).filter(|&j| alive[j]).collect()
    }

    /// Selects the surviving rows/columns of param-shaped data (parameters or
    /// optimizer buffers laid out like them).
    pub fn compact_param_set(&self, set: &[Option<Params<T>>]) -> Result<Vec<Option<Params<T>>>> {
        self.check_survivors()?;
        (0..self.layers.len())
            .map(|i| {
                let Some(p) = &set[i] else { return Ok(None) };
                let rows = self.kept_outputs(i);
                let cols = self.kept_inputs(i);
                Ok(Some(Params {
                    weight: gather(&p.weight, &rows, &cols)?,
                    bias: Tensor::new(&[rows.len()], rows.iter().map(|&r| p.bias.data()[r]).collect())?,
                }))
            })
            .collect()
    }

    fn check_survivors(&self) -> Result<()> {
        for (ordinal, m) in self.masks.iter().flatten().enumerate() {
            if !m.iter().any(|&b| b) {
                return Err(Error::Structure(format!(
                    "maskable layer {ordinal} ({}) has no surviving features",
                    self.maskable_name(ordinal)
                )));
            }
        }
        Ok(())
    }

    /// Physically removes masked features and the consumer inputs they feed.
    pub fn compact(&self) -> Result<MaskableModel<T>> {
        let params = self.compact_param_set(&self.params)?;
        let mut layers = self.layers.clone();
        for i in 0..layers.len() {
            if layers[i].has_params() {
                let outs = self.kept_outputs(i).len();
                let ins = self.kept_inputs(i).len();
                layers[i] = layers[i].with_outputs(outs).with_inputs(ins);
            }
        }
        let masks = self
            .masks
            .iter()
            .map(|m| m.as_ref().map(|m| vec![true; m.iter().filter(|&&b| b).count()]))
            .collect();
        MaskableModel::from_parts(self.input_shape, layers, params, masks)
    }

    /// Writes the parameters of a compacted descendant back into this model
    /// at the positions named by `lineage`.
    pub fn scatter_from(&mut self, compacted: &MaskableModel<T>, lineage: &Lineage) -> Result<()> {
        if lineage.per_layer.len() != self.num_maskable() || compacted.layers.len() != self.layers.len() {
            return Err(Error::Input("lineage does not describe this model".into()));
        }
        let ordinal_of: Vec<Option<usize>> = {
            let mut next = 0;
            self.masks
                .iter()
                .map(|m| {
                    m.as_ref().map(|_| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        for i in 0..self.layers.len() {
            let (Some(dst), Some(src)) = (self.params[i].as_mut(), compacted.params[i].as_ref()) else { continue };
            let rows: Vec<usize> = match ordinal_of[i] {
                Some(o) => lineage.per_layer[o].clone(),
                None => (0..dst.weight.shape()[0]).collect(),
            };
            let n_in = dst.weight.shape()[1];
            let producer = (0..i).rev().find(|&j| self.layers[j].has_params());
            let cols: Vec<usize> = match producer.and_then(|p| ordinal_of[p]) {
                Some(o) => {
                    let full = self.masks[producer.unwrap()].as_ref().unwrap().len();
                    let spread = n_in / full;
                    lineage.per_layer[o].iter().flat_map(|&c| c * spread..(c + 1) * spread).collect()
                }
                None => (0..n_in).collect(),
            };
            let inner: usize = dst.weight.shape()[2..].iter().product();
            let (src_rows, src_cols) = (src.weight.shape()[0], src.weight.shape()[1]);
            if src_rows != rows.len() || src_cols != cols.len() {
                return Err(ShapeError::new(format!("layer {i}: compacted weights do not match lineage")).into());
            }
            let dw = dst.weight.data_mut();
            let sw = src.weight.data();
            for (sr, &r) in rows.iter().enumerate() {
                for (sc, &c) in cols.iter().enumerate() {
                    let d0 = (r * n_in + c) * inner;
                    let s0 = (sr * src_cols + sc) * inner;
                    dw[d0..d0 + inner].copy_from_slice(&sw[s0..s0 + inner]);
                }
            }
            for (sr, &r) in rows.iter().enumerate() {
                dst.bias.data_mut()[r] = src.bias.data()[sr];
            }
        }
        Ok(())
    }
}

fn gather<T: Scalar>(w: &Tensor<T>, rows: &[usize], cols: &[usize]) -> Result<Tensor<T>> {
    let shape = w.shape();
    let (n_in, inner) = (shape[1], shape[2..].iter().product::<usize>());
    let mut out = Vec::with_capacity(rows.len() * cols.len() * inner);
    for &r in rows {
        for &c in cols {
            let s = (r * n_in + c) * inner;
            out.extend_from_slice(&w.data()[s..s + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[0] = rows.len();
    new_shape[1] = cols.len();
    Ok(Tensor::new(&new_shape, out)?)
}

/// Original feature indices still present in a compacted model, per
/// maskable layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lineage {
    pub per_layer: Vec<Vec<usize>>,
}

impl Lineage {
    pub fn identity<T: Scalar>(model: &MaskableModel<T>) -> Self {
        Lineage { per_layer: model.masks.iter().flatten().map(|m| (0..m.len()).collect()).collect() }
    }

    /// Lineage of the alive features of a masked model.
    pub fn of_alive<T: Scalar>(model: &MaskableModel<T>) -> Self {
        Lineage {
            per_layer: model
                .masks
                .iter()
                .flatten()
                .map(|m| (0..m.len()).filter(|&k| m[k]).collect())
                .collect(),
        }
    }

    pub fn original(&self, f: FeatureId) -> FeatureId {
        FeatureId::new(f.layer, self.per_layer[f.layer][f.index])
    }

    pub fn current(&self, original: FeatureId) -> Option<FeatureId> {
        self.per_layer
            .get(original.layer)?
            .iter()
            .position(|&k| k == original.index)
            .map(|idx| FeatureId::new(original.layer, idx))
    }

    /// Drops the features that `model` (whose indices this lineage maps)
    /// has masked out.
    pub fn retain_alive<T: Scalar>(&mut self, model: &MaskableModel<T>) {
        for (layer, m) in self.per_layer.iter_mut().zip(model.masks.iter().flatten()) {
            let kept: Vec<usize> = layer.iter().zip(m).filter(|(_, &alive)| alive).map(|(&k, _)| k).collect();
            *layer = kept;
        }
    }
}

/// The Caffe MNIST LeNet: conv(20@5x5), pool, conv(50@5x5), pool, fc(500),
/// ReLU, fc(10).
pub fn lenet5_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::Conv { in_channels: 1, out_channels: 20, kernel: 5, stride: 1, pad: 0 },
        LayerSpec::MaxPool2,
        LayerSpec::Conv { in_channels: 20, out_channels: 50, kernel: 5, stride: 1, pad: 0 },
        LayerSpec::MaxPool2,
        LayerSpec::Flatten,
        LayerSpec::Linear { in_features: 800, out_features: 500 },
        LayerSpec::Relu,
        LayerSpec::Linear { in_features: 500, out_features: 10 },
    ]
}

pub fn build_lenet5(seed: u64) -> MaskableModel<f32> {
    MaskableModel::new([1, 28, 28], lenet5_layers(), seed).expect("LeNet-5 layer table is consistent")
}
