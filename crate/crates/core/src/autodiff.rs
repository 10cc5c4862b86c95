//! Recording forward pass and reverse-mode differentiation.
//!
//! A [`Tape`] stores every executed operation in execution order together
//! with its output, which is therefore a valid topological order. Full
//! activations are kept; nothing is recomputed during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, Scalar, Tensor};

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    },
    Linear {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Flatten(NodeId),
    Softmax(NodeId),
}

impl Op {
    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weights,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weights,
                bias,
            } => vec![*input, *weights, *bias],
            Op::Relu(x) | Op::Flatten(x) | Op::Softmax(x) => vec![*x],
            Op::MaxPool { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    op: Op,
    value: Tensor<T>,
}

/// Which scalar the reverse sweep differentiates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    /// The post-softmax class probability.
    #[default]
    Probability,
    /// The pre-softmax logit of the class.
    Logit,
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    feature_slots: Vec<NodeId>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            feature_slots: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Nodes registered as per-layer feature maps, in layer order.
    pub fn feature_slots(&self) -> &[NodeId] {
        &self.feature_slots
    }

    pub fn mark_feature(&mut self, id: NodeId) {
        self.feature_slots.push(id);
    }

    fn push(&mut self, op: Op, value: Tensor<T>) -> NodeId {
        debug_assert!(op.operands().iter().all(|&o| o < self.nodes.len()));
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::Tape(format!("node {id} is not on this tape")));
        }
        Ok(())
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(&mut self, input: NodeId, weights: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        for id in [input, weights, bias] {
            self.check(id)?;
        }
        let out = tensor::conv2d(self.value(input), self.value(weights), self.value(bias), stride, pad)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                pad,
            },
            out,
        ))
    }

    pub fn linear(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        for id in [input, weights, bias] {
            self.check(id)?;
        }
        let out = tensor::linear(self.value(input), self.value(weights), self.value(bias))?;
        Ok(self.push(
            Op::Linear {
                input,
                weights,
                bias,
            },
            out,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = tensor::relu(self.value(x));
        Ok(self.push(Op::Relu(x), out))
    }

    pub fn maxpool(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        self.check(x)?;
        let (out, argmax) = tensor::maxpool_with_argmax(self.value(x), k, stride)?;
        Ok(self.push(Op::MaxPool { input: x, argmax }, out))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).clone();
        let n = v.len();
        Ok(self.push(Op::Flatten(x), v.reshape(vec![n])?))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let out = tensor::softmax_prob(self.value(x))?;
        Ok(self.push(Op::Softmax(x), out))
    }

    /// Differentiates output `n` of the final softmax node.
    ///
    /// In [`Target::Logit`] mode the seed is placed on the softmax input
    /// instead, so gradients are those of the raw class logit.
    pub fn backward(&self, class_index: usize, target: Target) -> Result<Gradients<T>> {
        let Some(last) = self.nodes.len().checked_sub(1) else {
            return Err(Error::Tape("backward on an empty tape".into()));
        };
        let Op::Softmax(logits) = self.nodes[last].op else {
            return Err(Error::Tape("tape does not end in a softmax".into()));
        };
        let width = self.nodes[last].value.len();
        if class_index >= width {
            return Err(Error::Tape(format!(
                "class index {class_index} out of range for {width} outputs"
            )));
        }
        let root = match target {
            Target::Probability => last,
            Target::Logit => logits,
        };
        let mut seed = Tensor::zeros(self.value(root).shape());
        seed.data_mut()[class_index] = T::one();
        self.backward_from(root, seed)
    }

    /// Reverse sweep from an arbitrary node with an explicit upstream gradient.
    pub fn backward_from(&self, root: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(root)?;
        if seed.shape() != self.value(root).shape() {
            return Err(Error::Shape(format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Tensor<T>> = self.nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        grads[root] = seed;
        for id in (0..=root).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let g = std::mem::replace(&mut grads[id], Tensor::zeros(&[1]));
            self.propagate(id, &g, &mut grads);
            grads[id] = g;
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: NodeId, g: &Tensor<T>, grads: &mut [Tensor<T>]) {
        match self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                pad,
            } => self.conv_backward(input, weights, bias, stride, pad, g, grads),
            Op::Linear {
                input,
                weights,
                bias,
            } => {
                let x = self.value(input).data();
                let w = self.value(weights).data();
                let d_in = x.len();
                let gd = g.data();
                {
                    let gx = grads[input].data_mut();
                    for (j, &gj) in gd.iter().enumerate() {
                        let row = &w[j * d_in..(j + 1) * d_in];
                        for (a, &wv) in gx.iter_mut().zip(row) {
                            *a = *a + gj * wv;
                        }
                    }
                }
                {
                    let gw = grads[weights].data_mut();
                    for (j, &gj) in gd.iter().enumerate() {
                        let row = &mut gw[j * d_in..(j + 1) * d_in];
                        for (a, &xv) in row.iter_mut().zip(x) {
                            *a = *a + gj * xv;
                        }
                    }
                }
                let gb = grads[bias].data_mut();
                for (a, &gj) in gb.iter_mut().zip(gd) {
                    *a = *a + gj;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(x).data();
                let gx = grads[x].data_mut();
                for ((a, &v), &gi) in gx.iter_mut().zip(xv).zip(g.data()) {
                    if v > T::zero() {
                        *a = *a + gi;
                    }
                }
            }
            Op::MaxPool { input, ref argmax } => {
                let gx = grads[input].data_mut();
                for (&src, &gi) in argmax.iter().zip(g.data()) {
                    gx[src] = gx[src] + gi;
                }
            }
            Op::Flatten(x) => {
                let gx = grads[x].data_mut();
                for (a, &gi) in gx.iter_mut().zip(g.data()) {
                    *a = *a + gi;
                }
            }
            Op::Softmax(x) => {
                let probs = self.nodes[id].value.data();
                let dot = probs
                    .iter()
                    .zip(g.data())
                    .fold(T::zero(), |acc, (&pi, &gi)| acc + pi * gi);
                let gx = grads[x].data_mut();
                for ((a, &pi), &gi) in gx.iter_mut().zip(probs).zip(g.data()) {
                    *a = *a + pi * (gi - dot);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        g: &Tensor<T>,
        grads: &mut [Tensor<T>],
    ) {
        let x = self.value(input);
        let w = self.value(weights);
        let Ok(geo) = ConvGeom::new(x, w, self.value(bias), stride, pad) else {
            unreachable!("conv node recorded with valid geometry");
        };
        let (xd, wd, gd) = (x.data(), w.data(), g.data());
        let plane = geo.oh * geo.ow;

        let gb = grads[bias].data_mut();
        for o in 0..geo.c_out {
            let s = gd[o * plane..(o + 1) * plane]
                .iter()
                .fold(T::zero(), |a, &b| a + b);
            gb[o] = gb[o] + s;
        }

        for o in 0..geo.c_out {
            let gplane = &gd[o * plane..(o + 1) * plane];
            for c in 0..geo.c_in {
                for u in 0..geo.kh {
                    for v in 0..geo.kw {
                        let widx = ((o * geo.c_in + c) * geo.kh + u) * geo.kw + v;
                        let wv = wd[widx];
                        let cols = ConvGeom::valid(geo.ow, v, geo.stride, geo.pad, geo.w);
                        if cols.is_empty() {
                            continue;
                        }
                        let first = cols.start * geo.stride + v - geo.pad;
                        let n = cols.len();
                        let rows = ConvGeom::valid(geo.oh, u, geo.stride, geo.pad, geo.h);
                        let mut gw = T::zero();
                        for i in rows.clone() {
                            let base = (c * geo.h + i * geo.stride + u - geo.pad) * geo.w + first;
                            let gi = &gplane[i * geo.ow + cols.start..i * geo.ow + cols.end];
                            if geo.stride == 1 {
                                for (&gij, &xv) in gi.iter().zip(&xd[base..base + n]) {
                                    gw = gw + gij * xv;
                                }
                            } else {
                                for (k, &gij) in gi.iter().enumerate() {
                                    gw = gw + gij * xd[base + k * geo.stride];
                                }
                            }
                        }
                        let gws = grads[weights].data_mut();
                        gws[widx] = gws[widx] + gw;

                        let gx = grads[input].data_mut();
                        for i in rows {
                            let base = (c * geo.h + i * geo.stride + u - geo.pad) * geo.w + first;
                            let gi = &gplane[i * geo.ow + cols.start..i * geo.ow + cols.end];
                            if geo.stride == 1 {
                                for (a, &gij) in gx[base..base + n].iter_mut().zip(gi) {
                                    *a = *a + gij * wv;
                                }
                            } else {
                                for (k, &gij) in gi.iter().enumerate() {
                                    let a = &mut gx[base + k * geo.stride];
                                    *a = *a + gij * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient of the differentiated scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f32> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        &self.grads[id]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn take(&mut self, id: NodeId) -> Tensor<T> {
        std::mem::replace(&mut self.grads[id], Tensor::zeros(&[1]))
    }
}
