//! Dense row-major tensors and the forward kernels used by the network.
//!
//! All reductions run in a fixed row-major order, so results do not depend
//! on thread count or scheduling.

use std::fmt;

use num_traits::Float;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Training runs in `f32`; `f64` is used by
/// gradient verification.
pub trait Scalar:
    Float + Default + fmt::Debug + fmt::Display + Send + Sync + std::iter::Sum + 'static
{
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Elementwise accumulate `other` into `self`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

/// Output extent of a sliding window, or `None` if the window never fits.
pub fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape.len() != rank {
        return Err(Error::Shape(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// Geometry shared by the conv forward and backward kernels.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn new<T: Scalar>(
        input: &Tensor<T>,
        weights: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        expect_rank(input, 3, "conv2d input")?;
        expect_rank(weights, 4, "conv2d weights")?;
        let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
        let (c_out, wc_in, kh, kw) = (
            weights.shape[0],
            weights.shape[1],
            weights.shape[2],
            weights.shape[3],
        );
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels but weights expect {wc_in}"
            )));
        }
        if bias.shape != [c_out] {
            return Err(Error::Shape(format!(
                "conv2d: bias shape {:?} does not match {c_out} filters",
                bias.shape
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d: stride must be positive".into()));
        }
        let oh = window_extent(h, kh, stride, pad);
        let ow = window_extent(w, kw, stride, pad);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Shape(format!(
                "conv2d: {kh}x{kw} kernel with pad {pad} does not fit a {h}x{w} input"
            )));
        };
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Output positions whose input coordinate for kernel offset `k` is in
    /// bounds, as a contiguous range.
    #[inline]
    pub(crate) fn valid(out: usize, k: usize, stride: usize, pad: usize, extent: usize) -> std::ops::Range<usize> {
        let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
        let hi = if extent + pad > k {
            ((extent + pad - k - 1) / stride + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// `acc[j] += scale * src[first + (j - range.start) * stride]` for `j` in `range`.
#[inline]
pub(crate) fn axpy_strided<T: Scalar>(acc: &mut [T], src: &[T], scale: T, range: std::ops::Range<usize>, stride: usize, first: usize) {
    if range.is_empty() {
        return;
    }
    if stride == 1 {
        let n = range.len();
        for (a, &x) in acc[range].iter_mut().zip(&src[first..first + n]) {
            *a = *a + scale * x;
        }
    } else {
        for (k, j) in range.enumerate() {
            acc[j] = acc[j] + scale * src[first + k * stride];
        }
    }
}

/// 2-D cross-correlation with zero padding. Weights are `[c_out, c_in, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weights, bias, stride, pad)?;
    let x = &input.data;
    let wt = &weights.data;
    let mut out = vec![T::zero(); g.c_out * g.oh * g.ow];
    for o in 0..g.c_out {
        let plane = &mut out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow];
        plane.fill(bias.data[o]);
        for c in 0..g.c_in {
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let wv = wt[((o * g.c_in + c) * g.kh + u) * g.kw + v];
                    let cols = ConvGeom::valid(g.ow, v, g.stride, g.pad, g.w);
                    for i in ConvGeom::valid(g.oh, u, g.stride, g.pad, g.h) {
                        let r = i * g.stride + u - g.pad;
                        let row = &x[(c * g.h + r) * g.w..(c * g.h + r + 1) * g.w];
                        let orow = &mut plane[i * g.ow..(i + 1) * g.ow];
                        axpy_strided(orow, row, wv, cols.clone(), g.stride, cols.start * g.stride + v - g.pad);
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![g.c_out, g.oh, g.ow],
        data: out,
    })
}

/// Affine map `bias + weights · input` for a `[d_out, d_in]` weight matrix.
pub fn linear<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(input, 1, "linear input")?;
    expect_rank(weights, 2, "linear weights")?;
    let (d_out, d_in) = (weights.shape[0], weights.shape[1]);
    if input.shape[0] != d_in {
        return Err(Error::Shape(format!(
            "linear: input has {} features but weights expect {d_in}",
            input.shape[0]
        )));
    }
    if bias.shape != [d_out] {
        return Err(Error::Shape(format!(
            "linear: bias shape {:?} does not match {d_out} outputs",
            bias.shape
        )));
    }
    let out = (0..d_out)
        .map(|j| {
            let row = &weights.data[j * d_in..(j + 1) * d_in];
            row.iter()
                .zip(&input.data)
                .fold(bias.data[j], |acc, (&w, &x)| acc + w * x)
        })
        .collect();
    Ok(Tensor::vector(out))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Channelwise max pooling. Also returns, per output element, the flat input
/// index that won (first maximum in row-major window order).
pub(crate) fn maxpool_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_rank(x, 3, "maxpool input")?;
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (Some(oh), Some(ow)) = (window_extent(h, k, stride, 0), window_extent(w, k, stride, 0)) else {
        return Err(Error::Shape(format!(
            "maxpool: {k}x{k} window (stride {stride}) larger than {h}x{w} input"
        )));
    };
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = (ch * h + i * stride) * w + j * stride;
                for u in 0..k {
                    for v in 0..k {
                        let idx = (ch * h + i * stride + u) * w + j * stride + v;
                        if x.data[idx] > x.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![c, oh, ow],
            data: out,
        },
        arg,
    ))
}

pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool_with_argmax(x, k, stride).map(|(t, _)| t)
}

/// Softmax over a logit vector, computed with max subtraction.
pub fn softmax_prob<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_rank(logits, 1, "softmax input")?;
    let m = logits
        .data
        .iter()
        .fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
    let exps: Vec<T> = logits.data.iter().map(|&z| (z - m).exp()).collect();
    let total = exps.iter().fold(T::zero(), |a, &b| a + b);
    Ok(Tensor::vector(exps.into_iter().map(|e| e / total).collect()))
}
