use super::{join, Backend, Eager, ParamKind, ParamMut, ParamRef, Params};
use crate::tensor::{invalid, ConvParams, Result, Tensor4};

/// Batchnorm epsilon used by every layer.
pub const BN_EPS: f32 = 1e-3;

/// Inference-mode batchnorm parameters for `c` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNorm {
    pub fn identity(c: usize) -> Self {
        Self {
            gamma: vec![1.0; c],
            beta: vec![0.0; c],
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        let c = self.channels();
        for (name, data, kind) in [
            ("weight", &self.gamma, ParamKind::BnGamma),
            ("bias", &self.beta, ParamKind::BnBeta),
            ("running_mean", &self.running_mean, ParamKind::BnRunningMean),
            ("running_var", &self.running_var, ParamKind::BnRunningVar),
        ] {
            f(
                &join(prefix, name),
                ParamRef {
                    shape: vec![c],
                    data,
                    kind,
                },
            );
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        let c = self.channels();
        for (name, data, kind) in [
            ("weight", &mut self.gamma, ParamKind::BnGamma),
            ("bias", &mut self.beta, ParamKind::BnBeta),
            ("running_mean", &mut self.running_mean, ParamKind::BnRunningMean),
            ("running_var", &mut self.running_var, ParamKind::BnRunningVar),
        ] {
            f(
                &join(prefix, name),
                ParamMut {
                    shape: vec![c],
                    data,
                    kind,
                },
            );
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Identity,
}

/// Convolution (no bias) → batchnorm → activation. With [`Activation::Silu`]
/// this is the CBS unit; attention projections use the identity variant.
#[derive(Clone, Debug, PartialEq)]
pub struct Cbs {
    pub weight: Tensor4,
    pub params: ConvParams,
    pub bn: BatchNorm,
    pub act: Activation,
}

impl Cbs {
    /// Zero kernel, identity batchnorm, "same" padding.
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::grouped(c_in, c_out, k, stride, 1, Activation::Silu)
    }

    pub fn grouped(c_in: usize, c_out: usize, k: usize, stride: usize, groups: usize, act: Activation) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 {
            return Err(invalid(
                "Cbs",
                format!("c_in={c_in} c_out={c_out} k={k} stride={stride}"),
            ));
        }
        if groups == 0 || !c_in.is_multiple_of(groups) || !c_out.is_multiple_of(groups) {
            return Err(invalid(
                "Cbs",
                format!("groups {groups} must divide {c_in} and {c_out}"),
            ));
        }
        Ok(Self {
            weight: Tensor4::zeros([c_out, c_in / groups, k, k]),
            params: ConvParams::same(k, stride).with_groups(groups),
            bn: BatchNorm::identity(c_out),
            act,
        })
    }

    pub fn without_activation(mut self) -> Self {
        self.act = Activation::Identity;
        self
    }

    pub fn c_in(&self) -> usize {
        self.weight.c() * self.params.groups
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    pub fn fan_in(&self) -> usize {
        let [_, c, kh, kw] = self.weight.shape();
        c * kh * kw
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = be.conv(x, &self.weight, None, self.params)?;
        let y = be.batchnorm(&y, &self.bn)?;
        match self.act {
            Activation::Silu => be.silu(&y),
            Activation::Identity => Ok(y),
        }
    }
}

impl Params for Cbs {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        f(
            &join(prefix, "conv.weight"),
            ParamRef {
                shape: self.weight.shape().to_vec(),
                data: self.weight.data(),
                kind: ParamKind::ConvWeight { fan_in: self.fan_in() },
            },
        );
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        let fan_in = self.fan_in();
        let shape = self.weight.shape().to_vec();
        f(
            &join(prefix, "conv.weight"),
            ParamMut {
                shape,
                data: self.weight.data_mut(),
                kind: ParamKind::ConvWeight { fan_in },
            },
        );
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

/// Eager CBS forward: `silu(batchnorm(conv(x)))`.
pub fn forward_cbs(b: &Cbs, x: &Tensor4) -> Result<Tensor4> {
    b.forward(&mut Eager, x)
}

/// Convolution with bias and nothing after it; the final prediction layers.
#[derive(Clone, Debug, PartialEq)]
pub struct PlainConv {
    pub weight: Tensor4,
    pub bias: Vec<f32>,
    pub params: ConvParams,
}

impl PlainConv {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 {
            return Err(invalid("PlainConv", format!("c_in={c_in} c_out={c_out} k={k}")));
        }
        Ok(Self {
            weight: Tensor4::zeros([c_out, c_in, k, k]),
            bias: vec![0.0; c_out],
            params: ConvParams::same(k, 1),
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.n()
    }

    fn fan_in(&self) -> usize {
        let [_, c, kh, kw] = self.weight.shape();
        c * kh * kw
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        be.conv(x, &self.weight, Some(&self.bias), self.params)
    }
}

impl Params for PlainConv {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        let fan_in = self.fan_in();
        f(
            &join(prefix, "weight"),
            ParamRef {
                shape: self.weight.shape().to_vec(),
                data: self.weight.data(),
                kind: ParamKind::ConvWeight { fan_in },
            },
        );
        f(
            &join(prefix, "bias"),
            ParamRef {
                shape: vec![self.bias.len()],
                data: &self.bias,
                kind: ParamKind::ConvBias { fan_in },
            },
        );
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        let fan_in = self.fan_in();
        let shape = self.weight.shape().to_vec();
        f(
            &join(prefix, "weight"),
            ParamMut {
                shape,
                data: self.weight.data_mut(),
                kind: ParamKind::ConvWeight { fan_in },
            },
        );
        let n = self.bias.len();
        f(
            &join(prefix, "bias"),
            ParamMut {
                shape: vec![n],
                data: &mut self.bias,
                kind: ParamKind::ConvBias { fan_in },
            },
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_random_full;
    use crate::tensor::{batchnorm2d_infer, conv2d, silu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cbs(c: usize) -> Cbs {
        let mut b = Cbs::new(c, c, 3, 1).unwrap();
        b.weight = Tensor4::from_fn(
            [c, c, 3, 3],
            |[o, i, y, x]| if o == i && y == 1 && x == 1 { 1.0 } else { 0.0 },
        );
        b.bn.eps = 0.0;
        b
    }

    #[test]
    fn identity_cbs_on_zeros_and_ones() {
        let b = identity_cbs(2);
        let z = forward_cbs(&b, &Tensor4::zeros([1, 2, 3, 3])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let o = forward_cbs(&b, &Tensor4::full([1, 2, 3, 3], 1.0)).unwrap();
        assert!(o.data().iter().all(|&v| (v - 0.731_058_6).abs() < 1e-6));
    }

    #[test]
    fn cbs_is_the_composition_of_its_three_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Cbs::new(3, 5, 3, 2).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([2, 3, 7, 6], -2.0, 2.0, &mut rng);
        let want = silu(
            &batchnorm2d_infer(
                &conv2d(&x, &b.weight, None, b.params).unwrap(),
                &b.bn.gamma,
                &b.bn.beta,
                &b.bn.running_mean,
                &b.bn.running_var,
                b.bn.eps,
            )
            .unwrap(),
        );
        assert_eq!(forward_cbs(&b, &x).unwrap(), want);
    }

    #[test]
    fn cbs_param_count_matches_formula() {
        let b = Cbs::new(3, 16, 3, 2).unwrap();
        assert_eq!(b.param_count(), 3 * 3 * 3 * 16 + 2 * 16);
        let dw = Cbs::grouped(8, 8, 3, 1, 8, Activation::Silu).unwrap();
        assert_eq!(dw.param_count(), 9 * 8 + 16);
        assert!(Cbs::grouped(8, 6, 3, 1, 4, Activation::Silu).is_err());
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let b = Cbs::new(4, 4, 1, 1).unwrap();
        assert!(forward_cbs(&b, &Tensor4::zeros([1, 3, 2, 2])).is_err());
    }
}
