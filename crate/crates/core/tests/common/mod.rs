//! Test-only reference implementations: a straightforward loop-based forward
//! pass in f64, a central finite-difference gradient checker, and random
//! model generators.

#![allow(dead_code)]

use featroute::network::{LayerParams, LayerSpec, Model};
use featroute::{Label, Tensor, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dense array with an explicit shape (C, H, W) or (N).
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Activation pattern: which ReLUs fired and where every pool took its max.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Pattern {
    pub relu: Vec<bool>,
    pub pool: Vec<usize>,
}

pub struct NaiveOut {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Output of every layer, in layer order.
    pub outputs: Vec<Arr>,
    pub pattern: Pattern,
}

pub struct NaiveParams {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NaiveParams {
    pub fn of(model: &Model) -> Self {
        Self {
            weights: model.params().iter().map(|p| p.weight.data().iter().map(|&v| f64::from(v)).collect()).collect(),
            biases: model.params().iter().map(|p| p.bias.data().iter().map(|&v| f64::from(v)).collect()).collect(),
        }
    }
}

fn conv(x: &Arr, w: &[f64], b: &[f64], out_c: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Arr {
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; out_c * oh * ow];
    for o in 0..out_c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = b[o];
                for ci in 0..c {
                    for u in 0..kh {
                        for v in 0..kw {
                            let r = (i * stride + u) as isize - pad as isize;
                            let s = (j * stride + v) as isize - pad as isize;
                            if r < 0 || s < 0 || r as usize >= h || s as usize >= wd {
                                continue;
                            }
                            acc += w[((o * c + ci) * kh + u) * kw + v] * x.data[(ci * h + r as usize) * wd + s as usize];
                        }
                    }
                }
                out[(o * oh + i) * ow + j] = acc;
            }
        }
    }
    Arr {
        shape: vec![out_c, oh, ow],
        data: out,
    }
}

fn pool(x: &Arr, k: usize, stride: usize, pattern: &mut Pattern) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0);
                for u in 0..k {
                    for v in 0..k {
                        let idx = (ch * h + i * stride + u) * w + j * stride + v;
                        if x.data[idx] > best.0 {
                            best = (x.data[idx], idx);
                        }
                    }
                }
                pattern.pool.push(best.1);
                out.push(best.0);
            }
        }
    }
    Arr {
        shape: vec![c, oh, ow],
        data: out,
    }
}

/// Runs `layers` with loops. When `inject` is `Some((i, values))`, the output
/// of layer `i` is replaced by `values` before continuing.
pub fn naive_forward(layers: &[LayerSpec], p: &NaiveParams, input: &Arr, inject: Option<(usize, &[f64])>) -> NaiveOut {
    let mut x = input.clone();
    let mut pattern = Pattern::default();
    let mut outputs = Vec::with_capacity(layers.len());
    let mut pi = 0;
    for (li, layer) in layers.iter().enumerate() {
        x = match *layer {
            LayerSpec::Conv {
                out_channels,
                kh,
                kw,
                stride,
                pad,
                ..
            } => {
                let y = conv(&x, &p.weights[pi], &p.biases[pi], out_channels, kh, kw, stride, pad);
                pi += 1;
                y
            }
            LayerSpec::Linear {
                out_features,
                in_features,
            } => {
                let w = &p.weights[pi];
                let data = (0..out_features)
                    .map(|o| p.biases[pi][o] + (0..in_features).map(|i| w[o * in_features + i] * x.data[i]).sum::<f64>())
                    .collect();
                pi += 1;
                Arr {
                    shape: vec![out_features],
                    data,
                }
            }
            LayerSpec::Relu => {
                pattern.relu.extend(x.data.iter().map(|&v| v > 0.0));
                Arr {
                    shape: x.shape.clone(),
                    data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                }
            }
            LayerSpec::MaxPool { k, stride } => pool(&x, k, stride, &mut pattern),
            LayerSpec::Flatten => Arr {
                shape: vec![x.data.len()],
                data: x.data.clone(),
            },
        };
        if let Some((i, values)) = inject {
            if i == li {
                x.data = values.to_vec();
            }
        }
        outputs.push(x.clone());
    }
    let m = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.data.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    NaiveOut {
        logits: x.data.clone(),
        probs: e.iter().map(|v| v / z).collect(),
        outputs,
        pattern,
    }
}

/// Layer index whose output is the feature map of each parameter layer: the
/// ReLU right after it if any, else the layer itself.
pub fn feature_layer_indices(layers: &[LayerSpec]) -> Vec<usize> {
    layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.has_params())
        .map(|(i, _)| {
            if matches!(layers.get(i + 1), Some(LayerSpec::Relu)) {
                i + 1
            } else {
                i
            }
        })
        .collect()
}

pub fn random_input(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn arr_of(t: &Tensor<f32>) -> Arr {
    Arr {
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|&v| f64::from(v)).collect(),
    }
}

/// A random conv model with at most four parameter layers: one or two convs
/// (optionally pooled) followed by one or two linear layers.
pub fn random_conv_model(rng: &mut ChaCha8Rng) -> Model {
    let in_c = rng.gen_range(1..=2);
    let side = rng.gen_range(6..=8);
    let convs = rng.gen_range(1..=2);
    let linears = rng.gen_range(1..=(4 - convs).min(2));
    let mut layers = Vec::new();
    let (mut c, mut h, mut w) = (in_c, side, side);
    for _ in 0..convs {
        let out = rng.gen_range(2..=3);
        let pad = if h < 2 { 1 } else { rng.gen_range(0..=1) };
        let k = rng.gen_range(2..=(h + 2 * pad).min(3));
        let stride = if h + 2 * pad >= k + 4 { rng.gen_range(1..=2) } else { 1 };
        layers.push(LayerSpec::Conv {
            out_channels: out,
            in_channels: c,
            kh: k,
            kw: k,
            stride,
            pad,
        });
        layers.push(LayerSpec::Relu);
        c = out;
        h = (h + 2 * pad - k) / stride + 1;
        w = (w + 2 * pad - k) / stride + 1;
        if h >= 4 && rng.gen_bool(0.5) {
            layers.push(LayerSpec::pool2());
            h /= 2;
            w /= 2;
        }
    }
    layers.push(LayerSpec::Flatten);
    let mut features = c * h * w;
    let classes = rng.gen_range(2..=4);
    for li in 0..linears {
        let out = if li + 1 == linears { classes } else { rng.gen_range(3..=6) };
        layers.push(LayerSpec::linear(out, features));
        if li + 1 < linears {
            layers.push(LayerSpec::Relu);
        }
        features = out;
    }
    let mut m = Model::build(layers, [in_c, side, side], (0..classes as Label).collect(), rng.gen()).unwrap();
    for p in m.params_mut() {
        for b in p.bias.data_mut() {
            *b = rng.gen_range(-0.2..0.2);
        }
    }
    m
}

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    /// Elements skipped because the finite-difference step crosses a ReLU or
    /// max-pool switch, where the derivative is undefined.
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_rel_err = self.max_rel_err.max((analytic - numeric).abs() / denom);
        self.checked += 1;
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

pub const FD_STEP: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero derivatives.
pub const REL_FLOOR: f64 = 1e-6;

fn output_of(o: &NaiveOut, class: usize, target: Target) -> f64 {
    match target {
        Target::Probability => o.probs[class],
        Target::Logit => o.logits[class],
    }
}

/// Compares tape gradients (in f64) of output `class` against central
/// differences on every parameter and every feature-map element.
pub fn check_gradients(model: &Model, input: &Tensor<f32>, class: usize, target: Target) -> GradCheck {
    let layers = model.layers();
    let params64: Vec<LayerParams<f64>> = model.params_as::<f64>();
    let x64: Tensor<f64> = input.cast();
    let rec = featroute::network::record_forward(layers, &params64, &x64).unwrap();
    let grads = rec.tape.backward(class, target).unwrap();

    let base = NaiveParams::of(model);
    let xin = arr_of(input);
    let reference = naive_forward(layers, &base, &xin, None);
    let mut out = GradCheck::default();

    for (pi, &(wn, bn)) in rec.param_nodes.iter().enumerate() {
        for (is_bias, node) in [(false, wn), (true, bn)] {
            let g = grads.get(node).data();
            for (k, &analytic) in g.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut p = NaiveParams {
                        weights: base.weights.clone(),
                        biases: base.biases.clone(),
                    };
                    if is_bias {
                        p.biases[pi][k] += delta;
                    } else {
                        p.weights[pi][k] += delta;
                    }
                    naive_forward(layers, &p, &xin, None)
                };
                let (hi, lo) = (eval(FD_STEP), eval(-FD_STEP));
                if hi.pattern != reference.pattern || lo.pattern != reference.pattern {
                    out.kinks += 1;
                    continue;
                }
                let numeric = (output_of(&hi, class, target) - output_of(&lo, class, target)) / (2.0 * FD_STEP);
                out.record(analytic, numeric);
            }
        }
    }

    for (slot, li) in rec.tape.feature_slots().iter().zip(feature_layer_indices(layers)) {
        let g = grads.get(*slot).data();
        let value = &reference.outputs[li].data;
        assert_eq!(g.len(), value.len(), "feature slot width");
        for (k, &analytic) in g.iter().enumerate() {
            let eval = |delta: f64| {
                let mut v = value.clone();
                v[k] += delta;
                naive_forward(layers, &base, &xin, Some((li, &v)))
            };
            let (hi, lo) = (eval(FD_STEP), eval(-FD_STEP));
            // Only the part of the pattern downstream of the injection can move.
            if hi.pattern != lo.pattern {
                out.kinks += 1;
                continue;
            }
            let numeric = (output_of(&hi, class, target) - output_of(&lo, class, target)) / (2.0 * FD_STEP);
            out.record(analytic, numeric);
        }
    }
    out
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| f64::from((x - y).abs())).fold(0.0, f64::max)
}

/// Attribution map for `class` built from one random image's saliencies.
pub fn random_attribution(model: &Model, class: Label, rng: &mut ChaCha8Rng) -> featroute::AttributionMap {
    use featroute::attribution::{image_saliencies, LayerScores};
    let x = random_input(model.input_shape(), rng);
    let idx = model.class_index(class).unwrap();
    let layers = image_saliencies(model, &x, idx, featroute::SaliencyMode::Positive, Target::Probability).unwrap();
    featroute::AttributionMap {
        class,
        mode: featroute::SaliencyMode::Positive,
        target: Target::Probability,
        image_count: 1,
        images: vec![],
        policy_deviation: None,
        layers: layers
            .into_iter()
            .enumerate()
            .map(|(index, scores)| LayerScores { index, scores })
            .collect(),
    }
}

/// Plan for `classes` at multiplier `x`, masking every layer.
pub fn plan_for(model: &Model, classes: &[Label], x: f64, rng: &mut ChaCha8Rng) -> featroute::SubModelPlan {
    let depth = model.param_layer_count() - 1;
    let masks: Vec<_> = classes
        .iter()
        .map(|&c| featroute::build_mask(&random_attribution(model, c, rng), x, model, depth).unwrap())
        .collect();
    featroute::bridge(&featroute::union_masks(&masks).unwrap(), model).unwrap()
}

/// Worst logit error of x = 0 disassembly against the original's retained
/// outputs, and of reassembling two complementary x = 0 plans.
pub fn identity_surgery_errors(model: &Model, inputs: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let classes = model.class_map().to_vec();
    let (left, right) = classes.split_at(classes.len() / 2);
    let pl = plan_for(model, left, 0.0, rng);
    let pr = plan_for(model, right, 0.0, rng);
    let sub = featroute::disassemble(model, &pl).unwrap();
    let whole = featroute::assemble_same(&[pl, pr], model).unwrap();
    let (mut e_sub, mut e_whole) = (0.0f64, 0.0f64);
    for _ in 0..inputs {
        let x = random_input(model.input_shape(), rng);
        let full = model.logits(&x).unwrap();
        let retained: Vec<f32> = left.iter().map(|&c| full.data()[model.class_index(c).unwrap()]).collect();
        e_sub = e_sub.max(max_abs_diff(sub.logits(&x).unwrap().data(), &retained));
        e_whole = e_whole.max(max_abs_diff(whole.logits(&x).unwrap().data(), full.data()));
    }
    (e_sub, e_whole)
}

#[derive(Debug, Default)]
pub struct CrossReport {
    pub single_err: f64,
    pub span_err: f64,
    /// Largest |gradient| of one component's logit w.r.t. another's parameters.
    pub cross_grad: f64,
    /// Same, for the class probability under the joint softmax.
    pub cross_grad_prob: f64,
}

/// Zero-padding checks on two components cut from independently seeded models.
pub fn cross_assembly_report(a: &Model, b: &Model, inputs: usize, rng: &mut ChaCha8Rng) -> CrossReport {
    let single = featroute::assemble_cross(std::slice::from_ref(a)).unwrap();
    let both = featroute::assemble_cross(&[a.clone(), b.clone()]).unwrap();
    let plan = featroute::surgery::plan_cross(&[a.clone(), b.clone()]).unwrap();
    let mut r = CrossReport::default();
    for _ in 0..inputs {
        let x = random_input(a.input_shape(), rng);
        r.single_err = r.single_err.max(max_abs_diff(single.logits(&x).unwrap().data(), a.logits(&x).unwrap().data()));
        let joint = both.logits(&x).unwrap();
        let na = a.class_map().len();
        r.span_err = r.span_err.max(max_abs_diff(&joint.data()[..na], a.logits(&x).unwrap().data()));
        r.span_err = r.span_err.max(max_abs_diff(&joint.data()[na..], b.logits(&x).unwrap().data()));

        let rec = both.record(&x).unwrap();
        for (out, owner) in [(0, 0), (na, 1)] {
            let other = 1 - owner;
            for (target, slot) in [(Target::Logit, 0), (Target::Probability, 1)] {
                let grads = rec.tape.backward(out, target).unwrap();
                let mut worst = 0.0f64;
                for (li, la) in plan.layers.iter().enumerate() {
                    let span = la.spans[other];
                    let (wn, bn) = rec.param_nodes[li];
                    let gw = grads.get(wn);
                    let area: usize = gw.shape()[2..].iter().product();
                    for o in span.out_offset..span.out_offset + span.out_width {
                        for i in span.in_offset..span.in_offset + span.in_width {
                            for k in 0..area {
                                worst = worst.max(f64::from(gw.data()[(o * la.in_width + i) * area + k].abs()));
                            }
                        }
                        worst = worst.max(f64::from(grads.get(bn).data()[o].abs()));
                    }
                }
                if slot == 0 {
                    r.cross_grad = r.cross_grad.max(worst);
                } else {
                    r.cross_grad_prob = r.cross_grad_prob.max(worst);
                }
            }
        }
    }
    r
}

/// Directory holding the four standard MNIST IDX files.
pub fn mnist_dir() -> std::path::PathBuf {
    std::env::var_os("FEATROUTE_MNIST_DIR")
        .map(Into::into)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

/// (train, test) restricted to `classes`.
pub fn load_mnist(classes: &[Label]) -> Result<(featroute::Dataset, featroute::Dataset), String> {
    let dir = mnist_dir();
    let load = |img: &str, lbl: &str| {
        featroute::load_idx(&dir.join(img), &dir.join(lbl))
            .and_then(|d| d.subset(classes))
            .map_err(|e| format!("{e} (set FEATROUTE_MNIST_DIR or run scripts/fetch_mnist.sh)"))
    };
    Ok((
        load("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?,
        load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?,
    ))
}

/// Three-unit toy network with two overlapping single-class routes.
pub fn toy_route() -> (Model, Vec<featroute::RouteMask>) {
    use featroute::attribution::LayerKeep;
    let layers = vec![
        LayerSpec::Flatten,
        LayerSpec::linear(3, 4),
        LayerSpec::Relu,
        LayerSpec::linear(3, 3),
        LayerSpec::Relu,
        LayerSpec::linear(2, 3),
    ];
    let model = Model::build(layers, [1, 2, 2], vec![0, 1], 0).unwrap().with_name("toy");
    let mask = |class: Label, keeps: [&[bool]; 3]| featroute::RouteMask {
        classes: vec![class],
        mode: featroute::SaliencyMode::Positive,
        multiplier: 1.0,
        depth: 2,
        fallback_layers: vec![],
        layers: keeps
            .iter()
            .enumerate()
            .map(|(index, k)| LayerKeep { index, keep: k.to_vec() })
            .collect(),
    };
    let masks = vec![
        mask(0, [&[true, true, false], &[true, false, true], &[true, false]]),
        mask(1, [&[false, true, true], &[false, true, true], &[false, true]]),
    ];
    (model, masks)
}

pub fn golden_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}
