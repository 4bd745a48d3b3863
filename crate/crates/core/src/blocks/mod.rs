//! Composite layers of the YOLO11 family, written once against [`Backend`]
//! so the same wiring runs eagerly in `f32` or records onto a [`Tape`] in
//! `f64` for gradient checks.

mod attention;
mod conv;
mod csp;
mod sppf;

pub use attention::{forward_c2psa, Attention, C2psa, PsaBlock};
pub use conv::{forward_cbs, Activation, BatchNorm, Cbs, PlainConv, BN_EPS};
pub use csp::{forward_c3k2, Bottleneck, C2f, C3k, C3k2, CspUnit, SplitOrder};
pub use sppf::{forward_sppf, Spp, Sppf};

use rand::Rng;

use crate::tensor::{self, ConvParams, Result, Tape, Tensor4, Var};

/// Primitive ops a block needs from its execution engine.
pub trait Backend {
    type Value: Clone;

    fn shape(&self, x: &Self::Value) -> [usize; 4];
    fn conv(&mut self, x: &Self::Value, weight: &Tensor4, bias: Option<&[f32]>, p: ConvParams) -> Result<Self::Value>;
    fn batchnorm(&mut self, x: &Self::Value, bn: &BatchNorm) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn scale(&mut self, x: &Self::Value, factor: f32) -> Result<Self::Value>;
    fn maxpool(&mut self, x: &Self::Value, k: usize, stride: usize, padding: usize) -> Result<Self::Value>;
    fn upsample2x(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn concat(&mut self, parts: &[&Self::Value]) -> Result<Self::Value>;
    fn slice_channels(&mut self, x: &Self::Value, start: usize, len: usize) -> Result<Self::Value>;
    fn reshape(&mut self, x: &Self::Value, shape: [usize; 4]) -> Result<Self::Value>;
    fn transpose_last2(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn matmul(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn softmax_lastdim(&mut self, x: &Self::Value) -> Result<Self::Value>;
    fn global_avgpool(&mut self, x: &Self::Value) -> Result<Self::Value>;
}

/// Direct `f32` execution on [`Tensor4`].
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Backend for Eager {
    type Value = Tensor4;

    fn shape(&self, x: &Tensor4) -> [usize; 4] {
        x.shape()
    }

    fn conv(&mut self, x: &Tensor4, weight: &Tensor4, bias: Option<&[f32]>, p: ConvParams) -> Result<Tensor4> {
        tensor::conv2d(x, weight, bias, p)
    }

    fn batchnorm(&mut self, x: &Tensor4, bn: &BatchNorm) -> Result<Tensor4> {
        tensor::batchnorm2d_infer(x, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var, bn.eps)
    }

    fn silu(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::silu(x))
    }

    fn add(&mut self, a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        tensor::add(a, b)
    }

    fn scale(&mut self, x: &Tensor4, factor: f32) -> Result<Tensor4> {
        tensor::scale(x, factor)
    }

    fn maxpool(&mut self, x: &Tensor4, k: usize, stride: usize, padding: usize) -> Result<Tensor4> {
        tensor::maxpool2d(x, k, stride, padding)
    }

    fn upsample2x(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::upsample_nearest2x(x))
    }

    fn concat(&mut self, parts: &[&Tensor4]) -> Result<Tensor4> {
        tensor::concat_channels(parts)
    }

    fn slice_channels(&mut self, x: &Tensor4, start: usize, len: usize) -> Result<Tensor4> {
        x.channel_slice(start, len)
    }

    fn reshape(&mut self, x: &Tensor4, shape: [usize; 4]) -> Result<Tensor4> {
        x.clone().reshape(shape)
    }

    fn transpose_last2(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::transpose_last2(x))
    }

    fn matmul(&mut self, a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        tensor::matmul(a, b)
    }

    fn softmax_lastdim(&mut self, x: &Tensor4) -> Result<Tensor4> {
        tensor::softmax_lastdim(x)
    }

    fn global_avgpool(&mut self, x: &Tensor4) -> Result<Tensor4> {
        Ok(tensor::global_avgpool(x))
    }
}

/// Records onto the tape. Weights become fresh leaves on every use.
impl Backend for Tape {
    type Value = Var;

    fn shape(&self, x: &Var) -> [usize; 4] {
        Tape::shape(self, *x).expect("var recorded on this tape")
    }

    fn conv(&mut self, x: &Var, weight: &Tensor4, bias: Option<&[f32]>, p: ConvParams) -> Result<Var> {
        let w = self.input(weight)?;
        let b = bias.map(|b| self.vector(b)).transpose()?;
        self.conv2d(*x, w, b, p)
    }

    fn batchnorm(&mut self, x: &Var, bn: &BatchNorm) -> Result<Var> {
        let g = self.vector(&bn.gamma)?;
        let b = self.vector(&bn.beta)?;
        Tape::batchnorm(self, *x, g, b, &bn.running_mean, &bn.running_var, bn.eps)
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        Tape::silu(self, *x)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::add(self, *a, *b)
    }

    fn scale(&mut self, x: &Var, factor: f32) -> Result<Var> {
        Tape::scale(self, *x, factor as f64)
    }

    fn maxpool(&mut self, x: &Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        self.maxpool2d(*x, k, stride, padding)
    }

    fn upsample2x(&mut self, x: &Var) -> Result<Var> {
        Tape::upsample2x(self, *x)
    }

    fn concat(&mut self, parts: &[&Var]) -> Result<Var> {
        let parts: Vec<Var> = parts.iter().map(|v| **v).collect();
        Tape::concat(self, &parts)
    }

    fn slice_channels(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        Tape::slice_channels(self, *x, start, len)
    }

    fn reshape(&mut self, x: &Var, shape: [usize; 4]) -> Result<Var> {
        Tape::reshape(self, *x, shape)
    }

    fn transpose_last2(&mut self, x: &Var) -> Result<Var> {
        Tape::transpose_last2(self, *x)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        Tape::matmul(self, *a, *b)
    }

    fn softmax_lastdim(&mut self, x: &Var) -> Result<Var> {
        Tape::softmax_lastdim(self, *x)
    }

    fn global_avgpool(&mut self, x: &Var) -> Result<Var> {
        Tape::global_avgpool(self, *x)
    }
}

/// Role of a stored tensor; decides initialization and whether it counts as trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution kernel with the given fan-in (`c_in / groups · kh · kw`).
    ConvWeight {
        fan_in: usize,
    },
    ConvBias {
        fan_in: usize,
    },
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }
}

/// Borrowed view of one named tensor.
#[derive(Debug)]
pub struct ParamRef<'a> {
    pub shape: Vec<usize>,
    pub data: &'a [f32],
    pub kind: ParamKind,
}

#[derive(Debug)]
pub struct ParamMut<'a> {
    pub shape: Vec<usize>,
    pub data: &'a mut [f32],
    pub kind: ParamKind,
}

/// Uniform access to a layer's stored tensors under dotted names.
pub trait Params {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>));

    fn param_count(&self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p| {
            if p.kind.trainable() {
                total += p.data.len();
            }
        });
        total
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Default initialization: conv kernels and biases uniform in
/// `±sqrt(1 / fan_in)`, batchnorm at identity (`gamma = 1`, `beta = 0`,
/// `mean = 0`, `var = 1`). Tensors are filled in visiting order.
pub fn init_default<P: Params + ?Sized, R: Rng + ?Sized>(module: &mut P, rng: &mut R) {
    module.visit_params_mut("", &mut |_, p| {
        let fill = |data: &mut [f32], rng: &mut R, bound: f32| {
            for v in data {
                *v = rng.gen_range(-bound..=bound);
            }
        };
        match p.kind {
            ParamKind::ConvWeight { fan_in } | ParamKind::ConvBias { fan_in } => {
                fill(p.data, rng, (1.0 / fan_in as f32).sqrt())
            }
            ParamKind::BnGamma | ParamKind::BnRunningVar => p.data.fill(1.0),
            ParamKind::BnBeta | ParamKind::BnRunningMean => p.data.fill(0.0),
        }
    });
}

/// Randomizes everything, batchnorm statistics included, for tests that need
/// non-trivial normalization. Running variances stay positive.
pub fn init_random_full<P: Params + ?Sized, R: Rng + ?Sized>(module: &mut P, rng: &mut R) {
    module.visit_params_mut("", &mut |_, p| {
        for v in p.data.iter_mut() {
            *v = match p.kind {
                ParamKind::ConvWeight { fan_in } | ParamKind::ConvBias { fan_in } => {
                    let b = (1.0 / fan_in as f32).sqrt();
                    rng.gen_range(-b..=b)
                }
                ParamKind::BnGamma => rng.gen_range(0.5..1.5),
                ParamKind::BnBeta | ParamKind::BnRunningMean => rng.gen_range(-0.5..0.5),
                ParamKind::BnRunningVar => rng.gen_range(0.5..2.0),
            };
        }
    });
}

/// Copies every tensor from `src` into `dst`; both must expose identical shapes
/// in identical visiting order.
pub fn copy_params<A: Params + ?Sized, B: Params + ?Sized>(src: &A, dst: &mut B) -> Result<()> {
    let mut values = Vec::new();
    src.visit_params("", &mut |_, p| values.push((p.shape, p.data.to_vec())));
    let mut it = values.into_iter();
    let mut err = None;
    dst.visit_params_mut("", &mut |name, p| match it.next() {
        Some((shape, data)) if shape == p.shape => p.data.copy_from_slice(&data),
        _ => {
            err.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = err.or_else(|| it.next().map(|_| "<extra tensors>".to_string())) {
        return Err(tensor::TensorError::ShapeMismatch {
            op: "copy_params",
            detail: format!("layouts diverge at {name}"),
        });
    }
    Ok(())
}
