//! Index-level model surgery.
//!
//! A [`SubModelPlan`] lists, for every parameter layer, which output units
//! (conv filters or linear neurons) survive and which inputs (kernels of each
//! filter, or input neurons) survive. Inputs of layer `r + 1` are exactly the
//! outputs of layer `r`, expanded across the flatten boundary when a conv
//! layer feeds a linear one.

mod assemble;
mod stats;

pub use assemble::{assemble_cross, assemble_same, plan_cross, AssemblyPlan, ComponentRef, LayerAssembly, Span};
pub use stats::{layer_macs, stats, CompressionStats, LayerCost};

use serde::{Deserialize, Serialize};

use crate::attribution::{LayerKeep, RouteMask};
use crate::error::{Error, Result};
use crate::network::{infer_shapes, Label, LayerParams, LayerSpec, Model, ModelMeta, Provenance};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub index: usize,
    pub kept_outputs: Vec<usize>,
    pub kept_inputs: Vec<usize>,
}

/// Where conv channels become linear inputs: channel `c` owns inputs
/// `c * block .. (c + 1) * block` of parameter layer `linear_layer`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlattenExpansion {
    pub linear_layer: usize,
    pub channels: usize,
    pub block: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubModelPlan {
    pub source: String,
    pub classes: Vec<Label>,
    pub flatten: Option<FlattenExpansion>,
    pub layers: Vec<LayerPlan>,
}

impl SubModelPlan {
    /// Mask whose keep vectors are this plan's kept outputs.
    pub fn to_mask(&self, model: &Model) -> RouteMask {
        let counts = model.unit_counts();
        RouteMask {
            classes: self.classes.clone(),
            mode: Default::default(),
            multiplier: 0.0,
            depth: counts.len().saturating_sub(1),
            fallback_layers: vec![],
            layers: self
                .layers
                .iter()
                .zip(&counts)
                .map(|(l, &n)| {
                    let mut keep = vec![false; n];
                    for &o in &l.kept_outputs {
                        if o < n {
                            keep[o] = true;
                        }
                    }
                    LayerKeep { index: l.index, keep }
                })
                .collect(),
        }
    }

    /// Parameters the plan retains, counted without building the model.
    /// Layers may be empty here.
    pub fn param_count(&self, model: &Model) -> usize {
        model
            .param_layers()
            .iter()
            .zip(&self.layers)
            .map(|(spec, l)| {
                let area = match *spec {
                    LayerSpec::Conv { kh, kw, .. } => kh * kw,
                    _ => 1,
                };
                l.kept_outputs.len() * (l.kept_inputs.len() * area + 1)
            })
            .sum()
    }
}

/// Locates the flatten boundary between parameter layers, if any.
pub(crate) fn flatten_expansion(model: &Model) -> Result<Option<FlattenExpansion>> {
    let shapes = infer_shapes(model.layers(), model.input_shape())?;
    let mut param_index = 0;
    let mut prev_shape = model.input_shape().to_vec();
    for (i, layer) in model.layers().iter().enumerate() {
        if let LayerSpec::Flatten = layer {
            let block = prev_shape[1] * prev_shape[2];
            return Ok(Some(FlattenExpansion {
                linear_layer: param_index,
                channels: prev_shape[0],
                block,
            }));
        }
        if layer.has_params() {
            param_index += 1;
        }
        prev_shape = shapes[i].clone();
    }
    Ok(None)
}

fn expand(kept: &[usize], flatten: Option<FlattenExpansion>, layer: usize) -> Vec<usize> {
    match flatten {
        Some(f) if f.linear_layer == layer => kept.iter().flat_map(|&c| c * f.block..(c + 1) * f.block).collect(),
        _ => kept.to_vec(),
    }
}

/// Turns a route mask into a surgery plan by linking each layer's kept
/// filters to the kernels that consume them in the next layer.
pub fn bridge(mask: &RouteMask, model: &Model) -> Result<SubModelPlan> {
    let counts = model.unit_counts();
    if mask.layers.len() != counts.len() || mask.layers.iter().zip(&counts).any(|(l, &n)| l.keep.len() != n) {
        return Err(Error::Shape(format!(
            "mask widths {:?} do not match model layer widths {counts:?}",
            mask.layers.iter().map(|l| l.keep.len()).collect::<Vec<_>>()
        )));
    }
    let flatten = flatten_expansion(model)?;
    let specs = model.param_layers();
    let mut layers: Vec<LayerPlan> = Vec::with_capacity(counts.len());
    for (i, keep) in mask.layers.iter().enumerate() {
        let kept_inputs = if i == 0 {
            (0..specs[0].in_units().unwrap_or(0)).collect()
        } else {
            expand(&layers[i - 1].kept_outputs, flatten, i)
        };
        layers.push(LayerPlan {
            index: i,
            kept_outputs: keep.kept(),
            kept_inputs,
        });
    }
    let last = layers.last().map(|l| l.kept_outputs.clone()).unwrap_or_default();
    Ok(SubModelPlan {
        source: model.fingerprint(),
        classes: last.iter().map(|&o| model.class_map()[o]).collect(),
        flatten,
        layers,
    })
}

fn check_plan(model: &Model, plan: &SubModelPlan) -> Result<()> {
    let inconsistent = |msg: String| Error::Surgery(format!("plan inconsistent with model: {msg}"));
    if plan.source != model.fingerprint() {
        return Err(inconsistent(format!(
            "plan was made for model {} but this is {}",
            plan.source,
            model.fingerprint()
        )));
    }
    let specs = model.param_layers();
    if plan.layers.len() != specs.len() {
        return Err(inconsistent(format!("{} layer plans for {} parameter layers", plan.layers.len(), specs.len())));
    }
    let flatten = flatten_expansion(model)?;
    for (i, (l, spec)) in plan.layers.iter().zip(&specs).enumerate() {
        let (outs, ins) = (spec.out_units().unwrap_or(0), spec.in_units().unwrap_or(0));
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if l.kept_outputs.is_empty() {
            return Err(inconsistent(format!("layer {i} keeps no units")));
        }
        if !sorted(&l.kept_outputs) || !sorted(&l.kept_inputs) {
            return Err(inconsistent(format!("layer {i} indices are not strictly increasing")));
        }
        if l.kept_outputs.iter().any(|&o| o >= outs) || l.kept_inputs.iter().any(|&o| o >= ins) {
            return Err(inconsistent(format!("layer {i} index out of range")));
        }
        let expected = if i == 0 {
            (0..ins).collect()
        } else {
            expand(&plan.layers[i - 1].kept_outputs, flatten, i)
        };
        if l.kept_inputs != expected {
            return Err(inconsistent(format!("layer {i} inputs do not match layer {} outputs", i.wrapping_sub(1))));
        }
    }
    Ok(())
}

fn slice_params(spec: &LayerSpec, p: &LayerParams<f32>, outs: &[usize], ins: &[usize]) -> LayerParams<f32> {
    let shape = p.weight.shape();
    let area: usize = shape[2..].iter().product();
    let in_total = shape[1];
    let w = p.weight.data();
    let mut data = Vec::with_capacity(outs.len() * ins.len() * area);
    for &o in outs {
        for &c in ins {
            let start = (o * in_total + c) * area;
            data.extend_from_slice(&w[start..start + area]);
        }
    }
    let new_spec = spec.with_units(outs.len(), ins.len());
    LayerParams {
        weight: Tensor::new(new_spec.weight_shape().unwrap_or_default(), data).expect("sliced shape"),
        bias: Tensor::vector(outs.iter().map(|&o| p.bias.data()[o]).collect()),
    }
}

/// Copies out the planned filters and kernels into a standalone model.
pub fn disassemble(model: &Model, plan: &SubModelPlan) -> Result<Model> {
    check_plan(model, plan)?;
    let mut layers = Vec::with_capacity(model.layers().len());
    let mut params = Vec::with_capacity(plan.layers.len());
    let mut next = plan.layers.iter().zip(model.params());
    for spec in model.layers() {
        if !spec.has_params() {
            layers.push(*spec);
            continue;
        }
        let (lp, p) = next.next().expect("plan checked against model");
        layers.push(spec.with_units(lp.kept_outputs.len(), lp.kept_inputs.len()));
        params.push(slice_params(spec, p, &lp.kept_outputs, &lp.kept_inputs));
    }
    let last = plan.layers.last().expect("non-empty plan");
    let class_map: Vec<Label> = last.kept_outputs.iter().map(|&o| model.class_map()[o]).collect();
    let meta = ModelMeta {
        name: format!("{}-{}", model.meta.name, class_tag(&class_map)),
        seed: model.meta.seed,
        provenance: Provenance::Disassembled {
            source: plan.source.clone(),
            classes: class_map.clone(),
            kept_outputs: plan.layers.iter().map(|l| l.kept_outputs.clone()).collect(),
        },
    };
    Model::from_parts(layers, params, model.input_shape(), class_map, meta)
}

pub(crate) fn class_tag(classes: &[Label]) -> String {
    classes.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("_")
}

/// Rebuilds the plan a disassembled model was cut with, given its source.
pub fn recover_plan(component: &Model, source: &Model) -> Result<SubModelPlan> {
    let Provenance::Disassembled {
        source: fp,
        classes,
        kept_outputs,
    } = &component.meta.provenance
    else {
        return Err(Error::Surgery(format!("model {} was not disassembled", component.meta.name)));
    };
    if *fp != source.fingerprint() {
        return Err(Error::Surgery(format!(
            "model {} was cut from {fp}, not from {}",
            component.meta.name,
            source.fingerprint()
        )));
    }
    let counts = source.unit_counts();
    if kept_outputs.len() != counts.len() {
        return Err(Error::Surgery("recorded plan does not match the source depth".into()));
    }
    let layers = kept_outputs
        .iter()
        .zip(&counts)
        .enumerate()
        .map(|(index, (kept, &n))| {
            let mut keep = vec![false; n];
            for &o in kept {
                *keep.get_mut(o).ok_or_else(|| Error::Surgery(format!("recorded unit {o} out of range")))? = true;
            }
            Ok(LayerKeep { index, keep })
        })
        .collect::<Result<Vec<_>>>()?;
    let mask = RouteMask {
        classes: classes.clone(),
        mode: Default::default(),
        multiplier: 0.0,
        depth: counts.len() - 1,
        fallback_layers: vec![],
        layers,
    };
    bridge(&mask, source)
}
