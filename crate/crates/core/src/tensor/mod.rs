//! Rank-4 tensor container and the layer primitives built on it.
//!
//! Layout is always `(batch n, channels c, height h, width w)`, row-major.
//! Every operation is a pure function; backward passes are explicit
//! companions (`conv2d` / `conv2d_backward`, ...) so each analytic gradient
//! can be checked against finite differences in isolation.

mod activation;
mod combine;
mod conv;
mod loss;
mod norm;
mod pool;
mod resize;

pub use activation::{relu, relu6, relu6_backward, relu_backward};
pub use combine::{add, add_backward, concat_channels, concat_channels_backward};
pub use conv::{
    conv2d, conv2d_backward, depthwise_conv2d, depthwise_conv2d_backward, pointwise_conv2d,
    pointwise_conv2d_backward, ConvGrads,
};
pub use loss::{softmax_cross_entropy, CrossEntropy};
pub use norm::{batch_norm, batch_norm_backward, batch_norm_infer, BatchNormCache, BatchNormState, Mode};
pub use pool::{
    adaptive_avg_pool, adaptive_avg_pool_backward, avg_pool, avg_pool_backward, max_pool,
    max_pool_backward,
};
pub use resize::{bilinear_resize, bilinear_resize_backward};

use crate::error::{Error, Result};

/// Scalar element of a tensor. The production stack runs on `f32`; gradient
/// checks instantiate the same code on `f64`.
pub trait Element:
    num_traits::Float + num_traits::NumAssign + Copy + Send + Sync + std::fmt::Debug + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Element for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Shape of an activation tensor: `(n, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn count(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Shape of a filter bank: `(out channels, in channels per group, kh, kw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KernelShape {
    pub out_c: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
}

impl KernelShape {
    pub fn new(out_c: usize, in_c: usize, kh: usize, kw: usize) -> Self {
        KernelShape { out_c, in_c, kh, kw }
    }

    pub fn count(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }

    #[inline]
    pub fn index(&self, o: usize, l: usize, i: usize, j: usize) -> usize {
        ((o * self.in_c + l) * self.kh + i) * self.kw + j
    }
}

/// Padding rule of a convolution or pooling window.
///
/// `SameCeil` always yields `out = ceil(in / stride)` regardless of kernel
/// size or dilation; `Valid` places windows only where they fully fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    SameCeil,
    Valid,
}

/// Channel grouping of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Dense,
    Depthwise,
}

/// Stride, dilation, padding, and grouping of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub padding: Padding,
    pub groups: Grouping,
}

impl ConvSpec {
    pub fn new(stride: usize, dilation: usize, padding: Padding, groups: Grouping) -> Result<Self> {
        if stride == 0 || dilation == 0 {
            return Err(Error::Config(format!(
                "conv spec requires stride >= 1 and dilation >= 1, got stride {stride}, dilation {dilation}"
            )));
        }
        Ok(ConvSpec { stride, dilation, padding, groups })
    }

    pub fn dense(stride: usize, dilation: usize, padding: Padding) -> Self {
        Self::new(stride, dilation, padding, Grouping::Dense).expect("positive stride/dilation")
    }

    pub fn depthwise(stride: usize, dilation: usize, padding: Padding) -> Self {
        Self::new(stride, dilation, padding, Grouping::Depthwise).expect("positive stride/dilation")
    }

    pub fn pointwise() -> Self {
        Self::dense(1, 1, Padding::SameCeil)
    }
}

/// Per-axis padding amounts for one spatial dimension.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisPad {
    pub out: usize,
    pub before: usize,
}

/// Output extent and leading pad for one axis. The effective kernel extent is
/// `(k - 1) * dilation + 1`; `SameCeil` splits the total pad with the extra
/// element at the trailing edge.
pub(crate) fn axis_geometry(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Result<AxisPad> {
    let eff_k = (kernel - 1) * dilation + 1;
    match padding {
        Padding::SameCeil => {
            let out = input.div_ceil(stride);
            let span = (out - 1) * stride + eff_k;
            let total = span.saturating_sub(input);
            Ok(AxisPad { out, before: total / 2 })
        }
        Padding::Valid => {
            if eff_k > input {
                return Err(Error::Dimension(format!(
                    "valid padding: effective kernel extent {eff_k} exceeds input extent {input}"
                )));
            }
            Ok(AxisPad { out: (input - eff_k) / stride + 1, before: 0 })
        }
    }
}

/// Output extent of one spatial axis under a conv spec, without executing.
pub fn shape_axis(input: usize, kernel: usize, spec: &ConvSpec) -> Result<usize> {
    Ok(axis_geometry(input, kernel, spec.stride, spec.dilation, spec.padding)?.out)
}

/// Rank-4 numeric array with an optional same-shape gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.count()], grad: None }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.count()], grad: None }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Dimension(format!(
                "tensor data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    /// Allocates (or re-zeroes) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        let g = self.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(n, c, y, x);
        self.data[i] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }

    /// Contract check: every stored value is finite. Compiled out of release
    /// builds; op entry points call this in debug mode.
    pub fn debug_assert_finite(&self, context: &str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                debug_assert!(
                    v.is_finite(),
                    "{context}: non-finite value {v:?} at flat index {i} (shape {})",
                    self.shape
                );
            }
        }
    }
}

impl<T: Element> KernelTensor<T> {
    pub fn zeros(shape: KernelShape) -> Self {
        KernelTensor { shape, data: vec![T::zero(); shape.count()], grad: None }
    }

    pub fn from_vec(shape: KernelShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::Dimension(format!(
                "kernel data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                shape.count()
            )));
        }
        Ok(KernelTensor { shape, data, grad: None })
    }

    pub fn shape(&self) -> KernelShape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        if self.grad.is_none() {
            self.grad = Some(vec![T::zero(); self.data.len()]);
        }
        let g = self.grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    #[inline]
    pub fn at(&self, o: usize, l: usize, i: usize, j: usize) -> T {
        self.data[self.shape.index(o, l, i, j)]
    }

    pub fn cast<U: Element>(&self) -> KernelTensor<U> {
        KernelTensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            grad: None,
        }
    }
}

/// Filter bank with shape `(out channels, in channels per group, kh, kw)`.
/// Depthwise kernels have `in_c = 1` and `out_c` equal to the input channel
/// count (channel multiplier fixed at 1).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor<T: Element = f32> {
    shape: KernelShape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

pub(crate) fn check_nonempty_spatial<T: Element>(input: &Tensor<T>, op: &str) -> Result<()> {
    let s = input.shape();
    if s.h == 0 || s.w == 0 {
        return Err(Error::EmptyTensor(format!(
            "{op}: input has zero-sized spatial extent ({s})"
        )));
    }
    Ok(())
}
