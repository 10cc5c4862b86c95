use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{infer_shapes, LayerSpec, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub index: usize,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub input_shape: [usize; 3],
    pub params_original: usize,
    pub params_derived: usize,
    pub macs_original: u64,
    pub macs_derived: u64,
    /// `100 * (1 - derived / original)` on parameter counts.
    pub param_ratio: f64,
    /// Same ratio on multiply-accumulate counts (one MAC = one FLOP unit).
    pub flops_ratio: f64,
    pub layers_original: Vec<LayerCost>,
    pub layers_derived: Vec<LayerCost>,
}

/// Per parameter layer: parameters and multiply-accumulates for one input.
///
/// A conv layer costs `out * in * kh * kw * H' * W'` MACs, a linear layer
/// `out * in`. Biases are counted as parameters but not as MACs.
pub fn layer_macs(model: &Model, input_shape: [usize; 3]) -> Result<Vec<LayerCost>> {
    let shapes = infer_shapes(model.layers(), input_shape).map_err(|e| {
        Error::Shape(format!("model {} does not accept input {input_shape:?}: {e}", model.meta.name))
    })?;
    let mut costs = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let macs = match *layer {
            LayerSpec::Conv {
                out_channels,
                in_channels,
                kh,
                kw,
                ..
            } => (out_channels * in_channels * kh * kw * shapes[i][1] * shapes[i][2]) as u64,
            LayerSpec::Linear {
                out_features,
                in_features,
            } => (out_features * in_features) as u64,
            _ => continue,
        };
        let index = costs.len();
        costs.push(LayerCost {
            index,
            params: model.params()[index].count(),
            macs,
        });
    }
    Ok(costs)
}

fn reduction(original: f64, derived: f64) -> f64 {
    if original == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - derived / original)
    }
}

pub fn stats(original: &Model, derived: &Model, input_shape: [usize; 3]) -> Result<CompressionStats> {
    let lo = layer_macs(original, input_shape)?;
    let ld = layer_macs(derived, input_shape)?;
    let po: usize = lo.iter().map(|c| c.params).sum();
    let pd: usize = ld.iter().map(|c| c.params).sum();
    let mo: u64 = lo.iter().map(|c| c.macs).sum();
    let md: u64 = ld.iter().map(|c| c.macs).sum();
    Ok(CompressionStats {
        input_shape,
        params_original: po,
        params_derived: pd,
        macs_original: mo,
        macs_derived: md,
        param_ratio: reduction(po as f64, pd as f64),
        flops_ratio: reduction(mo as f64, md as f64),
        layers_original: lo,
        layers_derived: ld,
    })
}
