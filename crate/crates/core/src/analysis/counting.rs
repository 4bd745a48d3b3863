use crate::blocks::{Backend, BatchNorm};
use crate::tensor::{mismatch, ConvParams, Result, Tensor4};

/// Shape-only backend that tallies work instead of computing it.
///
/// `macs` counts multiply-accumulates of convolutions and matrix products.
/// `elementwise` counts one op per output element of batchnorm, activation,
/// residual add, scaling and softmax, `k²` per max-pool output and one per
/// averaged input element.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Counter {
    pub macs: u64,
    pub elementwise: u64,
}

fn len(s: &[usize; 4]) -> u64 {
    s.iter().map(|&d| d as u64).product()
}

impl Backend for Counter {
    type Value = [usize; 4];

    fn shape(&self, x: &[usize; 4]) -> [usize; 4] {
        *x
    }

    fn conv(&mut self, x: &[usize; 4], weight: &Tensor4, _bias: Option<&[f32]>, p: ConvParams) -> Result<[usize; 4]> {
        let [n, c, h, w] = *x;
        let [co, ci_g, kh, kw] = weight.shape();
        if c != ci_g * p.groups {
            return Err(mismatch(
                "conv2d",
                format!("input has {c} channels, weight expects {}", ci_g * p.groups),
            ));
        }
        let (oh, ow) = p
            .output_hw(h, w)
            .ok_or_else(|| mismatch("conv2d", format!("{h}x{w} too small")))?;
        let out = [n, co, oh, ow];
        self.macs += (kh * kw * ci_g) as u64 * len(&out);
        Ok(out)
    }

    fn batchnorm(&mut self, x: &[usize; 4], _bn: &BatchNorm) -> Result<[usize; 4]> {
        self.elementwise += len(x);
        Ok(*x)
    }

    fn silu(&mut self, x: &[usize; 4]) -> Result<[usize; 4]> {
        self.elementwise += len(x);
        Ok(*x)
    }

    fn add(&mut self, a: &[usize; 4], b: &[usize; 4]) -> Result<[usize; 4]> {
        if a != b {
            return Err(mismatch("add", format!("{a:?} vs {b:?}")));
        }
        self.elementwise += len(a);
        Ok(*a)
    }

    fn scale(&mut self, x: &[usize; 4], _factor: f32) -> Result<[usize; 4]> {
        self.elementwise += len(x);
        Ok(*x)
    }

    fn maxpool(&mut self, x: &[usize; 4], k: usize, stride: usize, padding: usize) -> Result<[usize; 4]> {
        let [n, c, h, w] = *x;
        let (oh, ow) = ConvParams::same(k, stride)
            .with_padding(padding)
            .output_hw(h, w)
            .ok_or_else(|| mismatch("maxpool2d", format!("{h}x{w} too small")))?;
        let out = [n, c, oh, ow];
        self.elementwise += (k * k) as u64 * len(&out);
        Ok(out)
    }

    fn upsample2x(&mut self, x: &[usize; 4]) -> Result<[usize; 4]> {
        Ok([x[0], x[1], 2 * x[2], 2 * x[3]])
    }

    fn concat(&mut self, parts: &[&[usize; 4]]) -> Result<[usize; 4]> {
        let [n, _, h, w] = *parts[0];
        let mut c = 0;
        for p in parts {
            if (p[0], p[2], p[3]) != (n, h, w) {
                return Err(mismatch("concat", format!("{p:?} vs {:?}", parts[0])));
            }
            c += p[1];
        }
        Ok([n, c, h, w])
    }

    fn slice_channels(&mut self, x: &[usize; 4], start: usize, count: usize) -> Result<[usize; 4]> {
        if start + count > x[1] {
            return Err(mismatch("slice_channels", format!("{start}+{count} > {}", x[1])));
        }
        Ok([x[0], count, x[2], x[3]])
    }

    fn reshape(&mut self, x: &[usize; 4], shape: [usize; 4]) -> Result<[usize; 4]> {
        if len(x) != len(&shape) {
            return Err(mismatch("reshape", format!("{x:?} -> {shape:?}")));
        }
        Ok(shape)
    }

    fn transpose_last2(&mut self, x: &[usize; 4]) -> Result<[usize; 4]> {
        Ok([x[0], x[1], x[3], x[2]])
    }

    fn matmul(&mut self, a: &[usize; 4], b: &[usize; 4]) -> Result<[usize; 4]> {
        if a[0] != b[0] || a[1] != b[1] || a[3] != b[2] {
            return Err(mismatch("matmul", format!("{a:?} x {b:?}")));
        }
        let out = [a[0], a[1], a[2], b[3]];
        self.macs += a[3] as u64 * len(&out);
        Ok(out)
    }

    fn softmax_lastdim(&mut self, x: &[usize; 4]) -> Result<[usize; 4]> {
        self.elementwise += len(x);
        Ok(*x)
    }

    fn global_avgpool(&mut self, x: &[usize; 4]) -> Result<[usize; 4]> {
        self.elementwise += len(x);
        Ok([x[0], x[1], 1, 1])
    }
}
