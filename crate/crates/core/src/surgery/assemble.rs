//! Assembling class components into one classifier.
//!
//! Components from the same model are merged by uniting their routes, so a
//! shared filter appears once. Components from different models are stacked
//! side by side: each layer concatenates the components' filters, and every
//! filter gets zero kernels at the input positions owned by the other
//! components. Foreign channels therefore contribute exactly nothing, and
//! each component's logits are reproduced unchanged.

use serde::{Deserialize, Serialize};

use super::{bridge, class_tag, disassemble, SubModelPlan};
use crate::attribution::union_masks;
use crate::error::{Error, Result};
use crate::network::{Label, LayerParams, LayerSpec, Model, ModelMeta, Provenance};
use crate::tensor::Tensor;

/// Merges plans cut from one model: the union of their routes, disassembled.
pub fn assemble_same(plans: &[SubModelPlan], model: &Model) -> Result<Model> {
    if plans.is_empty() {
        return Err(Error::Surgery("nothing to assemble".into()));
    }
    let fp = model.fingerprint();
    if let Some(p) = plans.iter().find(|p| p.source != fp) {
        return Err(Error::Surgery(format!(
            "same-model assembly mixes sources {} and {fp}",
            p.source
        )));
    }
    let masks: Vec<_> = plans.iter().map(|p| p.to_mask(model)).collect();
    let plan = bridge(&union_masks(&masks)?, model)?;
    let mut out = disassemble(model, &plan)?;
    out.meta.name = format!("{}-{}", model.meta.name, class_tag(out.class_map()));
    out.meta.provenance = Provenance::Assembled {
        sources: vec![fp],
        cross_model: false,
    };
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentRef {
    pub source: String,
    pub name: String,
    pub classes: Vec<Label>,
}

/// One component's block inside an assembled layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub component: usize,
    pub out_offset: usize,
    pub out_width: usize,
    pub in_offset: usize,
    pub in_width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerAssembly {
    pub index: usize,
    pub out_width: usize,
    pub in_width: usize,
    /// Input positions are shared by all components (the raw image channels).
    pub shared_input: bool,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssemblyPlan {
    pub components: Vec<ComponentRef>,
    pub layers: Vec<LayerAssembly>,
    pub class_map: Vec<Label>,
}

impl AssemblyPlan {
    /// Spans are disjoint and tile each layer's output width; inputs likewise
    /// unless shared; the class map is injective.
    pub fn check(&self) -> Result<()> {
        for l in &self.layers {
            let mut out_next = 0;
            let mut in_next = 0;
            for s in &l.spans {
                if s.out_offset != out_next {
                    return Err(Error::Surgery(format!("layer {}: output spans overlap or leave a gap", l.index)));
                }
                out_next += s.out_width;
                if l.shared_input {
                    if s.in_offset != 0 || s.in_width != l.in_width {
                        return Err(Error::Surgery(format!("layer {}: shared input span is partial", l.index)));
                    }
                } else {
                    if s.in_offset != in_next {
                        return Err(Error::Surgery(format!("layer {}: input spans overlap or leave a gap", l.index)));
                    }
                    in_next += s.in_width;
                }
            }
            if out_next != l.out_width || (!l.shared_input && in_next != l.in_width) {
                return Err(Error::Surgery(format!("layer {}: spans do not cover the layer", l.index)));
            }
        }
        let mut seen = self.class_map.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Surgery(format!("class label {} appears in more than one component", w[0])));
        }
        Ok(())
    }
}

fn same_shape(a: &LayerSpec, b: &LayerSpec) -> bool {
    match (*a, *b) {
        (
            LayerSpec::Conv {
                kh, kw, stride, pad, ..
            },
            LayerSpec::Conv {
                kh: kh2,
                kw: kw2,
                stride: s2,
                pad: p2,
                ..
            },
        ) => (kh, kw, stride, pad) == (kh2, kw2, s2, p2),
        (LayerSpec::Linear { .. }, LayerSpec::Linear { .. }) => true,
        (x, y) => x == y,
    }
}

/// Lays out components side by side, checking that they are isomorphic.
pub fn plan_cross(components: &[Model]) -> Result<AssemblyPlan> {
    let (first, rest) = components
        .split_first()
        .ok_or_else(|| Error::Surgery("nothing to assemble".into()))?;
    for (i, c) in rest.iter().enumerate() {
        let i = i + 1;
        if c.input_shape() != first.input_shape() {
            return Err(Error::Surgery(format!(
                "component {i} takes input {:?}, component 0 takes {:?}",
                c.input_shape(),
                first.input_shape()
            )));
        }
        if c.layers().len() != first.layers().len() {
            return Err(Error::Surgery(format!("component {i} has a different layer count")));
        }
        if let Some((j, (a, b))) = first
            .layers()
            .iter()
            .zip(c.layers())
            .enumerate()
            .find(|(_, (a, b))| !same_shape(a, b))
        {
            return Err(Error::Surgery(format!(
                "components 0 and {i} are not isomorphic at layer {j}: {a} vs {b}"
            )));
        }
    }

    let specs: Vec<Vec<LayerSpec>> = components.iter().map(Model::param_layers).collect();
    let layers = (0..first.param_layer_count())
        .map(|index| {
            let shared_input = index == 0;
            let mut spans = Vec::with_capacity(components.len());
            let (mut out_offset, mut in_offset) = (0, 0);
            for (component, s) in specs.iter().enumerate() {
                let (ow, iw) = (s[index].out_units().unwrap_or(0), s[index].in_units().unwrap_or(0));
                spans.push(Span {
                    component,
                    out_offset,
                    out_width: ow,
                    in_offset: if shared_input { 0 } else { in_offset },
                    in_width: iw,
                });
                out_offset += ow;
                in_offset += iw;
            }
            LayerAssembly {
                index,
                out_width: out_offset,
                in_width: if shared_input { spans[0].in_width } else { in_offset },
                shared_input,
                spans,
            }
        })
        .collect();
    let plan = AssemblyPlan {
        components: components
            .iter()
            .map(|c| ComponentRef {
                source: c.fingerprint(),
                name: c.meta.name.clone(),
                classes: c.class_map().to_vec(),
            })
            .collect(),
        layers,
        class_map: components.iter().flat_map(|c| c.class_map().iter().copied()).collect(),
    };
    plan.check()?;
    Ok(plan)
}

/// Stacks components from different (isomorphic) models into one classifier,
/// padding every filter with zero kernels at the other components' positions.
pub fn assemble_cross(components: &[Model]) -> Result<Model> {
    let plan = plan_cross(components)?;
    let first = &components[0];
    let mut layers = Vec::with_capacity(first.layers().len());
    let mut params = Vec::with_capacity(plan.layers.len());
    let mut param_index = 0;
    for spec in first.layers() {
        if !spec.has_params() {
            layers.push(*spec);
            continue;
        }
        let la = &plan.layers[param_index];
        let new_spec = spec.with_units(la.out_width, la.in_width);
        let wshape = new_spec.weight_shape().unwrap_or_default();
        let area: usize = wshape[2..].iter().product();
        let mut weight = Tensor::zeros(&wshape);
        let mut bias = Vec::with_capacity(la.out_width);
        for span in &la.spans {
            let src = &components[span.component].params()[param_index];
            let sw = src.weight.data();
            let dst = weight.data_mut();
            for o in 0..span.out_width {
                let from = o * span.in_width * area;
                let to = ((span.out_offset + o) * la.in_width + span.in_offset) * area;
                dst[to..to + span.in_width * area].copy_from_slice(&sw[from..from + span.in_width * area]);
            }
            bias.extend_from_slice(src.bias.data());
        }
        layers.push(new_spec);
        params.push(LayerParams {
            weight,
            bias: Tensor::vector(bias),
        });
        param_index += 1;
    }
    let meta = ModelMeta {
        name: components.iter().map(|c| c.meta.name.as_str()).collect::<Vec<_>>().join("+"),
        seed: first.meta.seed,
        provenance: Provenance::Assembled {
            sources: plan.components.iter().map(|c| c.source.clone()).collect(),
            cross_model: true,
        },
    };
    Model::from_parts(layers, params, first.input_shape(), plan.class_map.clone(), meta)
}
