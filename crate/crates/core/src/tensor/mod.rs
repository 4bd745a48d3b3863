//! Dense NCHW tensors and the deterministic CPU kernels that operate on them.
//!
//! Every kernel is a pure function of its inputs. Reductions run in a fixed
//! order per output element, so results are bit-reproducible regardless of
//! how many threads the global pool has.

mod gemm;
mod ops;
pub mod tape;

pub use ops::{
    add, batchnorm2d_infer, concat_channels, conv2d, global_avgpool, matmul, maxpool2d, scale, sigmoid, silu,
    silu_scalar, softmax_lastdim, transpose_last2, upsample_nearest2x,
};
pub use tape::{finite_diff_check, AdjointFault, Gradients, OpKind, Tape, Var};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op} would produce a zero-sized output")]
    ZeroSizedOutput { op: &'static str },
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },
    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput([usize; 4]),
    #[error("variable does not belong to this tape")]
    ForeignVar,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: detail.into(),
    }
}

/// Rank-4 `f32` array in NCHW layout, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(mismatch(
                "Tensor4::new",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for a in 0..n {
            for b in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([a, b, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: [usize; 4], lo: f32, hi: f32, rng: &mut R) -> Self {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn offset(&self, idx: [usize; 4]) -> usize {
        let [_, c, h, w] = self.shape;
        ((idx[0] * c + idx[1]) * h + idx[2]) * w + idx[3]
    }

    pub fn at(&self, idx: [usize; 4]) -> f32 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: [usize; 4], value: f32) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: [usize; 4]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    /// Channels `[start, start + len)` of every batch item.
    pub fn channel_slice(&self, start: usize, len: usize) -> Result<Self> {
        let [n, c, h, w] = self.shape;
        if start + len > c || len == 0 {
            return Err(mismatch(
                "channel_slice",
                format!("range {start}..{} outside {c} channels", start + len),
            ));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            data.extend_from_slice(&self.data[from..from + len * plane]);
        }
        Ok(Self {
            shape: [n, len, h, w],
            data,
        })
    }
}

/// Convolution geometry. Padding is symmetric zero-fill.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    /// Square kernel `k` with "same" padding `k / 2`.
    pub fn same(k: usize, stride: usize) -> Self {
        Self {
            kernel: (k, k),
            stride,
            padding: k / 2,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    /// Output spatial size for an `h`×`w` input, `None` when it would be empty.
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if self.stride == 0 {
            return None;
        }
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return None;
        }
        Some(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }
}
