//! On-disk model format.
//!
//! A model `NAME` is stored as two files:
//! - `NAME.json`: manifest with format version, layer specs, flatten order,
//!   input shape, class map, meta, and the blob byte length;
//! - `NAME.bin`: little-endian `f32` parameters, concatenated in layer
//!   order, weight before bias, each row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{infer_shapes, Label, LayerParams, LayerSpec, Model, ModelMeta};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const FLATTEN_ORDER: &str = "channel-major";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    input_shape: [usize; 3],
    flatten_order: String,
    layers: Vec<LayerSpec>,
    class_map: Vec<Label>,
    meta: ModelMeta,
    blob_bytes: u64,
}

/// Paths of the manifest and blob for a model path given with or without extension.
pub fn model_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(".");
        s.push(ext);
        PathBuf::from(s)
    };
    (with("json"), with("bin"))
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let (manifest_path, blob_path) = model_paths(path);
    let mut blob = Vec::with_capacity(model.param_count() * 4);
    for p in model.params() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        input_shape: model.input_shape(),
        flatten_order: FLATTEN_ORDER.into(),
        layers: model.layers().to_vec(),
        class_map: model.class_map().to_vec(),
        meta: model.meta.clone(),
        blob_bytes: blob.len() as u64,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let (manifest_path, blob_path) = model_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let bad = |reason: String| Error::Manifest {
        path: manifest_path.clone(),
        reason,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        if msg.contains("unknown variant") {
            bad(format!("unknown layer kind ({msg})"))
        } else {
            bad(msg)
        }
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.flatten_order != FLATTEN_ORDER {
        return Err(bad(format!("unsupported flatten order {:?}", manifest.flatten_order)));
    }
    infer_shapes(&manifest.layers, manifest.input_shape)?;

    let expected: u64 = manifest
        .layers
        .iter()
        .filter_map(|l| l.weight_shape().map(|ws| ws.iter().product::<usize>() + l.out_units().unwrap_or(0)))
        .sum::<usize>() as u64
        * 4;
    if manifest.blob_bytes != expected {
        return Err(bad(format!(
            "blob_bytes is {} but the layers need {expected}",
            manifest.blob_bytes
        )));
    }
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if blob.len() as u64 != expected {
        return Err(Error::BlobLength {
            path: blob_path,
            expected,
            found: blob.len() as u64,
        });
    }

    let mut floats = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut params = Vec::new();
    for layer in &manifest.layers {
        let Some(ws) = layer.weight_shape() else {
            continue;
        };
        let nw: usize = ws.iter().product();
        let nb = layer.out_units().unwrap_or(0);
        let weight = Tensor::new(ws, floats.by_ref().take(nw).collect())?;
        let bias = Tensor::new(vec![nb], floats.by_ref().take(nb).collect())?;
        params.push(LayerParams { weight, bias });
    }
    Model::from_parts(
        manifest.layers,
        params,
        manifest.input_shape,
        manifest.class_map,
        manifest.meta,
    )
}
