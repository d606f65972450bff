//! Dense row-major `f32` tensors and the numeric kernels behind the graph ops.
//!
//! Forward kernels are generic over [`Float`] so the same code evaluates a graph
//! in `f32` for training and in `f64` for the finite-difference oracle. Backward
//! kernels only exist in `f32`.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} must be non-empty with positive dimensions"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let len = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; len]).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        let n = data.len();
        Self::new(vec![n], data).expect("non-empty vector")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// In-place access for optimizer updates; the shape cannot change.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }
}

pub(crate) fn conv_output_len(len: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (len + 2 * padding - kernel) / stride + 1
}

/// Range of output positions `o` for which `o * stride + k - padding` lands inside `[0, len)`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    // o*stride + k >= padding
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // o*stride + k - padding <= len - 1
    let hi = if len + padding > k {
        ((len + padding - 1 - k) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Option<Self> {
        let (&[c_in, h, w], &[c_out, kc, kh, kw]) = (input, kernel) else {
            return None;
        };
        if kc != c_in || stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            oh: conv_output_len(h, kh, stride, padding),
            ow: conv_output_len(w, kw, stride, padding),
        })
    }
}

/// Unfolds the input into a `[c_in * kh * kw, oh * ow]` matrix whose row
/// `(ci, ky, kx)` holds the input tap seen by every output position; taps that
/// fall into the padding stay zero.
fn im2col<T: Float>(g: &ConvGeometry, input: &[T]) -> Vec<T> {
    let p = g.oh * g.ow;
    let mut col = vec![T::zero(); g.c_in * g.kh * g.kw * p];
    for ci in 0..g.c_in {
        let in_c = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let row = &in_c[(oy * g.stride + ky - g.padding) * g.w..];
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        out[ox] = row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    col
}

/// Adds a column-matrix gradient back onto the input positions it was read from.
fn col2im(g: &ConvGeometry, col: &[f32]) -> Vec<f32> {
    let p = g.oh * g.ow;
    let mut out = vec![0.0f32; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let out_c = &mut out[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy0, oy1) = valid_range(g.oh, g.h, ky, g.stride, g.padding);
            for kx in 0..g.kw {
                let (ox0, ox1) = valid_range(g.ow, g.w, kx, g.stride, g.padding);
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * p..(r + 1) * p];
                for oy in oy0..oy1 {
                    let row = &mut out_c[(oy * g.stride + ky - g.padding) * g.w..];
                    let from = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox0..ox1 {
                        row[ox * g.stride + kx - g.padding] += from[ox];
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation with zero padding.
pub(crate) fn conv2d_forward<T: Float>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let p = g.oh * g.ow;
    let taps = g.c_in * g.kh * g.kw;
    let col = im2col(g, input);
    let mut out = vec![T::zero(); g.c_out * p];
    for (co, out_c) in out.chunks_exact_mut(p).enumerate() {
        for (r, &wv) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            for (o, &s) in out_c.iter_mut().zip(&col[r * p..(r + 1) * p]) {
                *o = *o + wv * s;
            }
        }
    }
    out
}

/// Gradient of the convolution output with respect to its input.
pub(crate) fn conv2d_backward_input(g: &ConvGeometry, grad_out: &[f32], kernel: &[f32]) -> Vec<f32> {
    let p = g.oh * g.ow;
    let taps = g.c_in * g.kh * g.kw;
    let mut col = vec![0.0f32; taps * p];
    for (co, go) in grad_out.chunks_exact(p).enumerate() {
        for (r, &wv) in kernel[co * taps..(co + 1) * taps].iter().enumerate() {
            for (c, &v) in col[r * p..(r + 1) * p].iter_mut().zip(go) {
                *c += wv * v;
            }
        }
    }
    col2im(g, &col)
}

/// Dot product over eight interleaved partial sums: a fixed summation order
/// (so still deterministic) that the compiler can vectorize.
fn lane_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] += x[k] * y[k];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Gradient of the convolution output with respect to its kernel.
pub(crate) fn conv2d_backward_kernel(g: &ConvGeometry, grad_out: &[f32], input: &[f32]) -> Vec<f32> {
    let p = g.oh * g.ow;
    let col = im2col(g, input);
    let mut grad_k = Vec::with_capacity(g.c_out * g.c_in * g.kh * g.kw);
    for go in grad_out.chunks_exact(p) {
        for taps in col.chunks_exact(p) {
            grad_k.push(lane_dot(go, taps));
        }
    }
    grad_k
}

pub(crate) fn global_avg_pool<T: Float>(input: &[T], channels: usize, area: usize) -> Vec<T> {
    let inv = T::one() / T::from(area).unwrap();
    (0..channels)
        .map(|c| {
            input[c * area..(c + 1) * area]
                .iter()
                .fold(T::zero(), |acc, &v| acc + v)
                * inv
        })
        .collect()
}

/// `out[d] = sum_c weights[d, c] * input[c]`.
pub(crate) fn matvec<T: Float>(weights: &[T], input: &[T], rows: usize, cols: usize) -> Vec<T> {
    (0..rows)
        .map(|d| {
            weights[d * cols..(d + 1) * cols]
                .iter()
                .zip(input)
                .fold(T::zero(), |acc, (&w, &x)| acc + w * x)
        })
        .collect()
}

pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Float>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub(crate) fn cosine<T: Float>(a: &[T], b: &[T]) -> Option<T> {
    let (na, nb) = (norm(a), norm(b));
    if na <= T::zero() || nb <= T::zero() || !(na * nb).is_normal() {
        return None;
    }
    let s = dot(a, b) / (na * nb);
    Some(s.max(-T::one()).min(T::one()))
}

/// Cosine similarity between two embeddings.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f32> {
    if a.shape() != b.shape() || a.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "cosine_similarity expects two equal-length vectors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cosine(a.data(), b.data()).ok_or(Error::DegenerateEmbedding)
}

/// Bias-free linear map `out[d] = sum_c weights[d, c] * input[c]`.
pub fn linear_no_bias(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    match (input.shape(), weights.shape()) {
        (&[c], &[d, wc]) if c == wc => Ok(Tensor::from_vec(matvec(weights.data(), input.data(), d, c))),
        (i, w) => Err(Error::Shape(format!(
            "linear_no_bias: input {i:?} does not match weights {w:?}"
        ))),
    }
}

/// Spatial mean per channel of a `[C, H, W]` tensor.
pub fn global_avg_pool_tensor(input: &Tensor) -> Result<Tensor> {
    match *input.shape() {
        [c, h, w] => Ok(Tensor::from_vec(global_avg_pool(input.data(), c, h * w))),
        _ => Err(Error::Shape(format!(
            "global_avg_pool expects [C, H, W], got {:?}",
            input.shape()
        ))),
    }
}
