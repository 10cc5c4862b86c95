//! Class-wise feature attribution from derivatives of the class
//! probability, and threshold route masks built from it.
//!
//! For every parameter layer the score of unit `d` is the sum, over a set of
//! confidently and correctly classified images, of the positive entries of
//! the derivative of the class output w.r.t. that unit's feature map
//! (a whole map for conv layers, a scalar for linear layers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Target;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::{Label, Model};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaliencyMode {
    /// Sum of positive entries.
    #[default]
    Positive,
    /// Sum of magnitudes of negative entries.
    Negative,
    /// Sum of magnitudes of all entries.
    Absolute,
}

impl std::str::FromStr for SaliencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Self::Positive),
            "negative" => Ok(Self::Negative),
            "absolute" => Ok(Self::Absolute),
            other => Err(Error::InvalidArgument(format!(
                "unknown saliency mode {other:?} (positive|negative|absolute)"
            ))),
        }
    }
}

pub fn feature_saliency<T: Scalar>(grad: &[T], mode: SaliencyMode) -> T {
    grad.iter().fold(T::zero(), |acc, &g| match mode {
        SaliencyMode::Positive if g > T::zero() => acc + g,
        SaliencyMode::Negative if g < T::zero() => acc - g,
        SaliencyMode::Absolute => acc + g.abs(),
        _ => acc,
    })
}

/// Per-unit saliencies of one layer's feature gradient: one score per
/// channel for `[C,H,W]` maps, one per element for vectors.
pub fn unit_saliencies<T: Scalar>(grad: &Tensor<T>, mode: SaliencyMode) -> Vec<T> {
    let units = grad.shape()[0];
    let per = grad.len() / units;
    grad.data().chunks(per).map(|c| feature_saliency(c, mode)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePolicy {
    pub max_images: usize,
    pub min_confidence: f64,
    pub require_correct: bool,
}

impl Default for SamplePolicy {
    fn default() -> Self {
        Self {
            max_images: 100,
            min_confidence: 0.90,
            require_correct: true,
        }
    }
}

impl SamplePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_images == 0 {
            return Err(Error::InvalidArgument("max_images must be at least 1".into()));
        }
        if !(self.min_confidence > 0.0 && self.min_confidence < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "min_confidence {} outside (0, 1)",
                self.min_confidence
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub index: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub class: Label,
    pub mode: SaliencyMode,
    pub target: Target,
    pub image_count: usize,
    /// Dataset indices of the aggregated images.
    pub images: Vec<usize>,
    /// Set when the confidence policy could not be met and the most
    /// confident correct images were used instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy_deviation: Option<String>,
    pub layers: Vec<LayerScores>,
}

impl AttributionMap {
    pub fn layer(&self, index: usize) -> Option<&[f64]> {
        self.layers.iter().find(|l| l.index == index).map(|l| l.scores.as_slice())
    }
}

/// Attribution scores of a single image for output `class_index`, one vector
/// per parameter layer.
pub fn image_saliencies(
    model: &Model,
    image: &Tensor<f32>,
    class_index: usize,
    mode: SaliencyMode,
    target: Target,
) -> Result<Vec<Vec<f64>>> {
    let rec = model.record(image)?;
    let grads = rec.tape.backward(class_index, target)?;
    Ok(rec
        .tape
        .feature_slots()
        .iter()
        .map(|&slot| {
            unit_saliencies(grads.get(slot), mode)
                .into_iter()
                .map(f64::from)
                .collect()
        })
        .collect())
}

fn select_images(model: &Model, data: &Dataset, class: Label, class_index: usize, policy: &SamplePolicy) -> Result<(Vec<usize>, Option<String>)> {
    let candidates: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] == class).collect();
    let scored: Vec<(usize, f32, bool)> = candidates
        .par_iter()
        .map(|&i| {
            let rec = model.record(&data.images()[i])?;
            let p = rec.probabilities_value().data()[class_index];
            Ok((i, p, rec.logits_value().argmax() == class_index))
        })
        .collect::<Result<_>>()?;
    let eligible: Vec<&(usize, f32, bool)> = scored.iter().filter(|s| s.2 || !policy.require_correct).collect();
    let confident: Vec<usize> = eligible
        .iter()
        .filter(|s| f64::from(s.1) > policy.min_confidence)
        .map(|s| s.0)
        .take(policy.max_images)
        .collect();
    if !confident.is_empty() {
        return Ok((confident, None));
    }
    if eligible.is_empty() {
        return Err(Error::NoQualifyingImages { class });
    }
    let mut ranked = eligible;
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let picked: Vec<usize> = ranked.iter().take(policy.max_images).map(|s| s.0).collect();
    let note = format!(
        "no image of class {class} exceeded confidence {}; used the {} most confident correctly classified images",
        policy.min_confidence,
        picked.len()
    );
    Ok((picked, Some(note)))
}

/// Aggregates per-unit saliencies for `class` over the images chosen by `policy`.
///
/// Images are scanned in dataset order. Scores are unnormalized sums,
/// accumulated in that order.
pub fn attribute_class(
    model: &Model,
    data: &Dataset,
    class: Label,
    policy: &SamplePolicy,
    mode: SaliencyMode,
    target: Target,
) -> Result<AttributionMap> {
    policy.validate()?;
    let class_index = model.class_index(class).ok_or(Error::UnknownClass(class))?;
    if !data.labels().contains(&class) {
        return Err(Error::InvalidArgument(format!("dataset holds no images of class {class}")));
    }
    let (images, policy_deviation) = select_images(model, data, class, class_index, policy)?;
    let per_image: Vec<Vec<Vec<f64>>> = images
        .par_iter()
        .map(|&i| image_saliencies(model, &data.images()[i], class_index, mode, target))
        .collect::<Result<_>>()?;
    let mut totals: Vec<Vec<f64>> = model.unit_counts().iter().map(|&n| vec![0.0; n]).collect();
    for img in &per_image {
        for (acc, layer) in totals.iter_mut().zip(img) {
            for (a, s) in acc.iter_mut().zip(layer) {
                *a += s;
            }
        }
    }
    Ok(AttributionMap {
        class,
        mode,
        target,
        image_count: images.len(),
        images,
        policy_deviation,
        layers: totals
            .into_iter()
            .enumerate()
            .map(|(index, scores)| LayerScores { index, scores })
            .collect(),
    })
}

/// Kept output units of one parameter layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerKeep {
    pub index: usize,
    #[serde(with = "bits")]
    pub keep: Vec<bool>,
}

impl LayerKeep {
    pub fn kept(&self) -> Vec<usize> {
        self.keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteMask {
    pub classes: Vec<Label>,
    pub mode: SaliencyMode,
    pub multiplier: f64,
    /// Deepest masked layer, counted from the output (0 = final layer).
    pub depth: usize,
    /// Layers where no unit cleared the threshold and the best unit was kept.
    #[serde(default)]
    pub fallback_layers: Vec<usize>,
    pub layers: Vec<LayerKeep>,
}

impl RouteMask {
    pub fn layer(&self, index: usize) -> &[bool] {
        &self.layers[index].keep
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.keep.iter().filter(|&&k| k).count()).collect()
    }

    /// Resets every layer shallower than `depth` (counted from the output)
    /// to keep all units.
    pub fn relax_above(&self, depth: usize) -> RouteMask {
        let n = self.layers.len();
        let mut out = self.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            if i + depth + 1 < n {
                layer.keep.iter_mut().for_each(|k| *k = true);
            }
        }
        out.fallback_layers.retain(|&i| i + depth + 1 >= n);
        out.depth = out.depth.min(depth);
        out
    }

    /// All-true mask for the given classes (final layer restricted to them).
    pub fn keep_all(model: &Model, classes: &[Label]) -> Result<RouteMask> {
        let counts = model.unit_counts();
        let last = counts.len() - 1;
        let mut layers: Vec<LayerKeep> = counts
            .iter()
            .enumerate()
            .map(|(index, &n)| LayerKeep {
                index,
                keep: vec![true; n],
            })
            .collect();
        layers[last].keep = final_keep(model, classes)?;
        Ok(RouteMask {
            classes: classes.to_vec(),
            mode: SaliencyMode::Positive,
            multiplier: 0.0,
            depth: last,
            fallback_layers: vec![],
            layers,
        })
    }
}

fn final_keep(model: &Model, classes: &[Label]) -> Result<Vec<bool>> {
    let mut keep = vec![false; model.class_map().len()];
    for &c in classes {
        keep[model.class_index(c).ok_or(Error::UnknownClass(c))?] = true;
    }
    Ok(keep)
}

/// Parameter layer index that is `depth` layers before the output.
pub fn depth_to_layer(model: &Model, depth: usize) -> Result<usize> {
    let n = model.param_layer_count();
    if depth >= n {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} exceeds the model's {n} parameter layers"
        )));
    }
    Ok(n - 1 - depth)
}

/// Penultimate parameter layer, the default disassembly depth.
pub const DEFAULT_DEPTH: usize = 1;

/// Threshold mask without the empty-layer fallback; layers may end up all false.
pub fn build_mask_raw(attr: &AttributionMap, multiplier: f64, model: &Model, depth: usize) -> Result<RouteMask> {
    if !(multiplier >= 0.0 && multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!("threshold multiplier {multiplier} must be >= 0")));
    }
    let first_masked = depth_to_layer(model, depth)?;
    let counts = model.unit_counts();
    let last = counts.len() - 1;
    let mut layers = Vec::with_capacity(counts.len());
    for (index, &n) in counts.iter().enumerate() {
        let keep = if index == last {
            final_keep(model, &[attr.class])?
        } else if index < first_masked {
            vec![true; n]
        } else {
            let scores = attr
                .layer(index)
                .filter(|s| s.len() == n)
                .ok_or_else(|| Error::Shape(format!("attribution lacks {n} scores for layer {index}")))?;
            let mean = scores.iter().sum::<f64>() / n as f64;
            let threshold = multiplier * mean;
            scores.iter().map(|&s| s >= threshold).collect()
        };
        layers.push(LayerKeep { index, keep });
    }
    Ok(RouteMask {
        classes: vec![attr.class],
        mode: attr.mode,
        multiplier,
        depth,
        fallback_layers: vec![],
        layers,
    })
}

/// Keeps units scoring at least `multiplier` times their layer mean, for
/// every layer at or after `depth` (counted from the output). A layer left
/// empty keeps its single best unit.
pub fn build_mask(attr: &AttributionMap, multiplier: f64, model: &Model, depth: usize) -> Result<RouteMask> {
    let mut mask = build_mask_raw(attr, multiplier, model, depth)?;
    for layer in &mut mask.layers {
        if layer.keep.iter().any(|&k| k) {
            continue;
        }
        let scores = attr.layer(layer.index).unwrap_or(&[]);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        layer.keep[best] = true;
        mask.fallback_layers.push(layer.index);
    }
    Ok(mask)
}

/// Elementwise OR of masks; the class set becomes the union of class sets.
pub fn union_masks(masks: &[RouteMask]) -> Result<RouteMask> {
    let (first, rest) = masks
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("union of zero masks".into()))?;
    let mut out = first.clone();
    for m in rest {
        if m.layers.len() != out.layers.len()
            || m.layers.iter().zip(&out.layers).any(|(a, b)| a.keep.len() != b.keep.len())
        {
            return Err(Error::Shape(format!(
                "cannot unite masks with layer widths {:?} and {:?}",
                out.layers.iter().map(|l| l.keep.len()).collect::<Vec<_>>(),
                m.layers.iter().map(|l| l.keep.len()).collect::<Vec<_>>()
            )));
        }
        for (dst, src) in out.layers.iter_mut().zip(&m.layers) {
            for (d, &s) in dst.keep.iter_mut().zip(&src.keep) {
                *d |= s;
            }
        }
        for &c in &m.classes {
            if !out.classes.contains(&c) {
                out.classes.push(c);
            }
        }
        out.depth = out.depth.max(m.depth);
        out.multiplier = out.multiplier.min(m.multiplier);
        for &f in &m.fallback_layers {
            if !out.fallback_layers.contains(&f) {
                out.fallback_layers.push(f);
            }
        }
    }
    out.classes.sort_unstable();
    out.fallback_layers.sort_unstable();
    Ok(out)
}

/// Keep vectors serialized as compact `"1010"` strings.
mod bits {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(keep: &[bool], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&keep.iter().map(|&k| if k { '1' } else { '0' }).collect::<String>())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<bool>, D::Error> {
        let s = String::deserialize(d)?;
        s.chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                other => Err(serde::de::Error::custom(format!("invalid keep bit {other:?}"))),
            })
            .collect()
    }
}
