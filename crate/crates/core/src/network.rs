//! Layer specifications, models, and traced forward passes.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{window_extent, Scalar, Tensor};

/// A class label as stored in the data files.
pub type Label = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    Linear {
        out_features: usize,
        in_features: usize,
    },
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, in_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            in_channels,
            kh: kernel,
            kw: kernel,
            stride: 1,
            pad: 0,
        }
    }

    pub fn linear(out_features: usize, in_features: usize) -> Self {
        LayerSpec::Linear {
            out_features,
            in_features,
        }
    }

    pub fn pool2() -> Self {
        LayerSpec::MaxPool { k: 2, stride: 2 }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Linear { .. })
    }

    /// Output units: filters for a conv layer, neurons for a linear one.
    pub fn out_units(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { out_channels, .. } => Some(out_channels),
            LayerSpec::Linear { out_features, .. } => Some(out_features),
            _ => None,
        }
    }

    pub fn in_units(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { in_channels, .. } => Some(in_channels),
            LayerSpec::Linear { in_features, .. } => Some(in_features),
            _ => None,
        }
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
                ..
            } => Some(vec![out_channels, in_channels, kh, kw]),
            LayerSpec::Linear {
                out_features,
                in_features,
            } => Some(vec![out_features, in_features]),
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max_pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Copy of this layer with different unit counts (parameter layers only).
    pub fn with_units(&self, out_units: usize, in_units: usize) -> Self {
        match *self {
            LayerSpec::Conv {
                kh, kw, stride, pad, ..
            } => LayerSpec::Conv {
                out_channels: out_units,
                in_channels: in_units,
                kh,
                kw,
                stride,
                pad,
            },
            LayerSpec::Linear { .. } => LayerSpec::Linear {
                out_features: out_units,
                in_features: in_units,
            },
            other => other,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
                stride,
                pad,
            } => write!(f, "conv {in_channels}->{out_channels} {kh}x{kw} s{stride} p{pad}"),
            LayerSpec::Linear {
                out_features,
                in_features,
            } => write!(f, "linear {in_features}->{out_features}"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::MaxPool { k, stride } => write!(f, "max_pool {k}x{k} s{stride}"),
            LayerSpec::Flatten => write!(f, "flatten"),
        }
    }
}

/// Classic LeNet-style stack for single-channel square images.
pub fn lenet(input_shape: [usize; 3], classes: usize) -> Vec<LayerSpec> {
    let side = ((input_shape[1] - 4) / 2 - 4) / 2;
    vec![
        LayerSpec::conv(6, input_shape[0], 5),
        LayerSpec::Relu,
        LayerSpec::pool2(),
        LayerSpec::conv(16, 6, 5),
        LayerSpec::Relu,
        LayerSpec::pool2(),
        LayerSpec::Flatten,
        LayerSpec::linear(120, 16 * side * side),
        LayerSpec::Relu,
        LayerSpec::linear(84, 120),
        LayerSpec::Relu,
        LayerSpec::linear(classes, 84),
    ]
}

/// Shape of the activation after each layer, validating the chain.
///
/// Errors name the offending pair of layer positions (`usize::MAX` stands
/// for the model input).
pub fn infer_shapes(layers: &[LayerSpec], input_shape: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    if input_shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidModel(format!("input shape {input_shape:?} has a zero extent")));
    }
    let mut shape = input_shape.to_vec();
    let mut shapes = Vec::with_capacity(layers.len());
    let incompatible = |i: usize, reason: String| Error::Incompatible {
        first: i.wrapping_sub(1),
        second: i,
        reason,
    };
    for (i, layer) in layers.iter().enumerate() {
        shape = match *layer {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
                stride,
                pad,
            } => {
                if shape.len() != 3 {
                    return Err(incompatible(i, format!("{layer} needs a [C,H,W] input, got {shape:?}")));
                }
                if shape[0] != in_channels {
                    return Err(incompatible(
                        i,
                        format!("{layer} expects {in_channels} input channels, previous layer yields {}", shape[0]),
                    ));
                }
                if out_channels == 0 {
                    return Err(incompatible(i, format!("{layer} has no filters")));
                }
                let oh = window_extent(shape[1], kh, stride, pad);
                let ow = window_extent(shape[2], kw, stride, pad);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => vec![out_channels, oh, ow],
                    _ => return Err(incompatible(i, format!("{layer} does not fit a {shape:?} input"))),
                }
            }
            LayerSpec::Linear {
                out_features,
                in_features,
            } => {
                if shape.len() != 1 {
                    return Err(incompatible(
                        i,
                        format!("{layer} needs a flat input but receives {shape:?} (missing flatten?)"),
                    ));
                }
                if shape[0] != in_features {
                    return Err(incompatible(
                        i,
                        format!("{layer} expects {in_features} inputs, previous layer yields {}", shape[0]),
                    ));
                }
                if out_features == 0 {
                    return Err(incompatible(i, format!("{layer} has no outputs")));
                }
                vec![out_features]
            }
            LayerSpec::Relu => shape,
            LayerSpec::MaxPool { k, stride } => {
                if shape.len() != 3 {
                    return Err(incompatible(i, format!("{layer} needs a [C,H,W] input, got {shape:?}")));
                }
                match (window_extent(shape[1], k, stride, 0), window_extent(shape[2], k, stride, 0)) {
                    (Some(oh), Some(ow)) => vec![shape[0], oh, ow],
                    _ => return Err(incompatible(i, format!("{layer} window larger than {shape:?}"))),
                }
            }
            LayerSpec::Flatten => {
                if shape.len() != 3 {
                    return Err(incompatible(i, format!("flatten needs a [C,H,W] input, got {shape:?}")));
                }
                vec![shape.iter().product()]
            }
        };
        shapes.push(shape.clone());
    }
    match layers.last() {
        Some(LayerSpec::Linear { .. }) => Ok(shapes),
        Some(other) => Err(Error::InvalidModel(format!("last layer must be linear, found {other}"))),
        None => Err(Error::InvalidModel("model has no layers".into())),
    }
}

/// Weight and bias of one parameter layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn cast<U: Scalar>(&self) -> LayerParams<U> {
        LayerParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Original,
    Disassembled {
        source: String,
        classes: Vec<Label>,
        /// Kept output units per parameter layer of the source model.
        kept_outputs: Vec<Vec<usize>>,
    },
    Assembled {
        sources: Vec<String>,
        cross_model: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub name: String,
    pub seed: u64,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub(crate) layers: Vec<LayerSpec>,
    pub(crate) params: Vec<LayerParams<f32>>,
    pub(crate) input_shape: [usize; 3],
    pub(crate) class_map: Vec<Label>,
    pub meta: ModelMeta,
}

impl Model {
    /// Builds a model with fan-in scaled uniform weights and zero biases.
    pub fn build(layers: Vec<LayerSpec>, input_shape: [usize; 3], class_map: Vec<Label>, seed: u64) -> Result<Self> {
        infer_shapes(&layers, input_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .filter_map(|l| l.weight_shape().map(|ws| (l, ws)))
            .map(|(l, ws)| {
                let fan_in: usize = ws[1..].iter().product();
                let bound = 1.0 / (fan_in as f64).sqrt();
                let n: usize = ws.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
                LayerParams {
                    weight: Tensor::new(ws, data).expect("weight shape from spec"),
                    bias: Tensor::zeros(&[l.out_units().unwrap_or(0)]),
                }
            })
            .collect();
        Self::from_parts(
            layers,
            params,
            input_shape,
            class_map,
            ModelMeta {
                name: "model".into(),
                seed,
                provenance: Provenance::Original,
            },
        )
    }

    /// Assembles a model from explicit parameters, checking every invariant.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        params: Vec<LayerParams<f32>>,
        input_shape: [usize; 3],
        class_map: Vec<Label>,
        meta: ModelMeta,
    ) -> Result<Self> {
        let model = Self {
            layers,
            params,
            input_shape,
            class_map,
            meta,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        infer_shapes(&self.layers, self.input_shape)?;
        let specs: Vec<&LayerSpec> = self.layers.iter().filter(|l| l.has_params()).collect();
        if specs.len() != self.params.len() {
            return Err(Error::InvalidModel(format!(
                "{} parameter layers but {} parameter sets",
                specs.len(),
                self.params.len()
            )));
        }
        for (i, (spec, p)) in specs.iter().zip(&self.params).enumerate() {
            let ws = spec.weight_shape().unwrap_or_default();
            if p.weight.shape() != ws.as_slice() || p.bias.shape() != [spec.out_units().unwrap_or(0)] {
                return Err(Error::InvalidModel(format!(
                    "parameter layer {i} ({spec}): weight {:?} / bias {:?} do not match the layer",
                    p.weight.shape(),
                    p.bias.shape()
                )));
            }
            if !p.weight.is_finite() || !p.bias.is_finite() {
                return Err(Error::InvalidModel(format!("parameter layer {i} holds non-finite values")));
            }
        }
        let outputs = specs.last().and_then(|s| s.out_units()).unwrap_or(0);
        if outputs != self.class_map.len() {
            return Err(Error::InvalidModel(format!(
                "final layer has {outputs} outputs but the class map lists {} classes",
                self.class_map.len()
            )));
        }
        let mut seen = self.class_map.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidModel(format!("class map {:?} repeats a label", self.class_map)));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[LayerParams<f32>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams<f32>] {
        &mut self.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_map(&self) -> &[Label] {
        &self.class_map
    }

    pub fn class_index(&self, label: Label) -> Option<usize> {
        self.class_map.iter().position(|&c| c == label)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.meta.name = name.into();
        self
    }

    /// Parameter layer specs, in order.
    pub fn param_layers(&self) -> Vec<LayerSpec> {
        self.layers.iter().filter(|l| l.has_params()).copied().collect()
    }

    pub fn param_layer_count(&self) -> usize {
        self.params.len()
    }

    /// Output-unit count of every parameter layer.
    pub fn unit_counts(&self) -> Vec<usize> {
        self.layers.iter().filter_map(LayerSpec::out_units).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(LayerParams::count).sum()
    }

    /// Stable identifier derived from the architecture and parameter bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.layers).unwrap_or_default());
        for v in self.input_shape {
            h.update((v as u64).to_le_bytes());
        }
        for c in &self.class_map {
            h.update(c.to_le_bytes());
        }
        for p in &self.params {
            for v in p.weight.data().iter().chain(p.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn params_as<T: Scalar>(&self) -> Vec<LayerParams<T>> {
        self.params.iter().map(LayerParams::cast).collect()
    }

    pub fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(Error::Shape(format!(
                "model expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        Ok(())
    }

    pub fn record(&self, input: &Tensor<f32>) -> Result<Recording> {
        self.check_input(input)?;
        record_forward(&self.layers, &self.params, input)
    }

    pub fn forward_trace(&self, input: &Tensor<f32>) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let rec = record_forward(&self.layers, &self.params, input)?;
        Ok(rec.trace())
    }

    /// Logits only, without keeping a tape.
    pub fn logits(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(input)?;
        Ok(record_forward(&self.layers, &self.params, input)?.logits_value().clone())
    }
}

/// Per-layer outputs captured during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace<T: Scalar = f32> {
    /// One entry per parameter layer: the feature maps (or values) it produced.
    pub features: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// A forward pass recorded on a tape, with handles to the interesting nodes.
#[derive(Debug)]
pub struct Recording<T: Scalar = f32> {
    pub tape: Tape<T>,
    pub input: NodeId,
    /// `(weight, bias)` leaf nodes per parameter layer.
    pub param_nodes: Vec<(NodeId, NodeId)>,
    pub logits: NodeId,
    pub probabilities: NodeId,
}

impl<T: Scalar> Recording<T> {
    pub fn logits_value(&self) -> &Tensor<T> {
        self.tape.value(self.logits)
    }

    pub fn probabilities_value(&self) -> &Tensor<T> {
        self.tape.value(self.probabilities)
    }

    pub fn trace(&self) -> ForwardTrace<T> {
        ForwardTrace {
            features: self.tape.feature_slots().iter().map(|&id| self.tape.value(id).clone()).collect(),
            logits: self.logits_value().clone(),
            probabilities: self.probabilities_value().clone(),
        }
    }
}

/// Runs the layers on a fresh tape and appends a softmax.
///
/// The feature slot of a parameter layer is its activated output: the ReLU
/// that directly follows it when there is one, otherwise the raw output
/// (the final linear layer's slot is the logit vector).
pub fn record_forward<T: Scalar>(
    layers: &[LayerSpec],
    params: &[LayerParams<T>],
    input: &Tensor<T>,
) -> Result<Recording<T>> {
    let mut tape = Tape::new();
    let input_id = tape.leaf(input.clone());
    let mut cur = input_id;
    let mut param_nodes = Vec::with_capacity(params.len());
    let mut pending_slot: Option<NodeId> = None;
    let mut next_param = params.iter();
    for layer in layers {
        if let Some(slot) = pending_slot.take() {
            if matches!(layer, LayerSpec::Relu) {
                cur = tape.relu(cur)?;
                tape.mark_feature(cur);
                continue;
            }
            tape.mark_feature(slot);
        }
        cur = match *layer {
            LayerSpec::Conv { stride, pad, .. } => {
                let p = next_param
                    .next()
                    .ok_or_else(|| Error::InvalidModel("fewer parameter sets than layers".into()))?;
                let w = tape.leaf(p.weight.clone());
                let b = tape.leaf(p.bias.clone());
                param_nodes.push((w, b));
                let id = tape.conv2d(cur, w, b, stride, pad)?;
                pending_slot = Some(id);
                id
            }
            LayerSpec::Linear { .. } => {
                let p = next_param
                    .next()
                    .ok_or_else(|| Error::InvalidModel("fewer parameter sets than layers".into()))?;
                let w = tape.leaf(p.weight.clone());
                let b = tape.leaf(p.bias.clone());
                param_nodes.push((w, b));
                let id = tape.linear(cur, w, b)?;
                pending_slot = Some(id);
                id
            }
            LayerSpec::Relu => tape.relu(cur)?,
            LayerSpec::MaxPool { k, stride } => tape.maxpool(cur, k, stride)?,
            LayerSpec::Flatten => tape.flatten(cur)?,
        };
    }
    if let Some(slot) = pending_slot {
        tape.mark_feature(slot);
    }
    if next_param.next().is_some() {
        return Err(Error::InvalidModel("more parameter sets than parameter layers".into()));
    }
    let logits = cur;
    let probabilities = tape.softmax(logits)?;
    Ok(Recording {
        tape,
        input: input_id,
        param_nodes,
        logits,
        probabilities,
    })
}
