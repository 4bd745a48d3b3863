//! Position-wise self-attention over feature-map cells and the C2PSA block
//! built from it.

use super::{join, Activation, Backend, Cbs, Eager, ParamMut, ParamRef, Params};
use crate::blocks::csp::hidden_channels;
use crate::tensor::{invalid, Result, Tensor4};

/// Channels per head once a map is wide enough to split.
pub const HEAD_DIM: usize = 64;

/// Multi-head attention where every spatial cell is a token.
///
/// A single 1×1 projection produces, per head, `key_dim` query channels,
/// `key_dim` key channels and `head_dim` value channels, in that order.
/// A depthwise 3×3 conv over the values is added to the attended output
/// before the final 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: usize,
    pub head_dim: usize,
    pub key_dim: usize,
    pub qkv: Cbs,
    pub proj: Cbs,
    pub pe: Cbs,
}

impl Attention {
    pub fn new(c: usize) -> Result<Self> {
        let heads = (c / HEAD_DIM).max(1);
        if !c.is_multiple_of(heads) {
            return Err(invalid(
                "Attention",
                format!("{heads} heads do not divide {c} channels"),
            ));
        }
        let head_dim = c / heads;
        let key_dim = head_dim / 2;
        if key_dim == 0 {
            return Err(invalid("Attention", format!("{c} channels leave no room for keys")));
        }
        Ok(Self {
            heads,
            head_dim,
            key_dim,
            qkv: Cbs::grouped(c, c + 2 * key_dim * heads, 1, 1, 1, Activation::Identity)?,
            proj: Cbs::grouped(c, c, 1, 1, 1, Activation::Identity)?,
            pe: Cbs::grouped(c, c, 3, 1, c, Activation::Identity)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn scale(&self) -> f32 {
        1.0 / (self.key_dim as f32).sqrt()
    }

    fn heads_forward<B: Backend>(
        &self,
        be: &mut B,
        x: &B::Value,
        keep_maps: bool,
    ) -> Result<(B::Value, Vec<B::Value>)> {
        let [n, c, h, w] = be.shape(x);
        if c != self.channels() {
            return Err(invalid(
                "Attention",
                format!("expected {} channels, got {c}", self.channels()),
            ));
        }
        let tokens = h * w;
        let qkv = self.qkv.forward(be, x)?;
        let stride = 2 * self.key_dim + self.head_dim;
        let mut outs = Vec::with_capacity(self.heads);
        let mut values = Vec::with_capacity(self.heads);
        let mut maps = Vec::new();
        for head in 0..self.heads {
            let base = head * stride;
            let q = be.slice_channels(&qkv, base, self.key_dim)?;
            let k = be.slice_channels(&qkv, base + self.key_dim, self.key_dim)?;
            let v = be.slice_channels(&qkv, base + 2 * self.key_dim, self.head_dim)?;
            let q = be.reshape(&q, [n, 1, self.key_dim, tokens])?;
            let k = be.reshape(&k, [n, 1, self.key_dim, tokens])?;
            let vm = be.reshape(&v, [n, 1, self.head_dim, tokens])?;
            let qt = be.transpose_last2(&q)?;
            let scores = be.matmul(&qt, &k)?;
            let scores = be.scale(&scores, self.scale())?;
            let attn = be.softmax_lastdim(&scores)?;
            let attn_t = be.transpose_last2(&attn)?;
            let o = be.matmul(&vm, &attn_t)?;
            outs.push(be.reshape(&o, [n, self.head_dim, h, w])?);
            values.push(v);
            if keep_maps {
                maps.push(attn);
            }
        }
        let out_refs: Vec<&B::Value> = outs.iter().collect();
        let attended = be.concat(&out_refs)?;
        let value_refs: Vec<&B::Value> = values.iter().collect();
        let v_all = be.concat(&value_refs)?;
        let pos = self.pe.forward(be, &v_all)?;
        let y = be.add(&attended, &pos)?;
        Ok((self.proj.forward(be, &y)?, maps))
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        Ok(self.heads_forward(be, x, false)?.0)
    }

    /// Per-head attention matrices `(n, 1, hw, hw)`; row `i` holds the
    /// weights query cell `i` assigns to every key cell.
    pub fn attention_maps(&self, x: &Tensor4) -> Result<Vec<Tensor4>> {
        Ok(self.heads_forward(&mut Eager, x, true)?.1)
    }
}

impl Params for Attention {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.qkv.visit_params(&join(prefix, "qkv"), f);
        self.proj.visit_params(&join(prefix, "proj"), f);
        self.pe.visit_params(&join(prefix, "pe"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.qkv.visit_params_mut(&join(prefix, "qkv"), f);
        self.proj.visit_params_mut(&join(prefix, "proj"), f);
        self.pe.visit_params_mut(&join(prefix, "pe"), f);
    }
}

/// Attention and a 2× feed-forward, each wrapped in a residual add.
#[derive(Clone, Debug, PartialEq)]
pub struct PsaBlock {
    pub attn: Attention,
    pub ffn1: Cbs,
    pub ffn2: Cbs,
}

impl PsaBlock {
    pub fn new(c: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(c)?,
            ffn1: Cbs::new(c, 2 * c, 1, 1)?,
            ffn2: Cbs::grouped(2 * c, c, 1, 1, 1, Activation::Identity)?,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let a = self.attn.forward(be, x)?;
        let x = be.add(x, &a)?;
        let f = self.ffn1.forward(be, &x)?;
        let f = self.ffn2.forward(be, &f)?;
        be.add(&x, &f)
    }
}

impl Params for PsaBlock {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.attn.visit_params(&join(prefix, "attn"), f);
        self.ffn1.visit_params(&join(prefix, "ffn.0"), f);
        self.ffn2.visit_params(&join(prefix, "ffn.1"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.attn.visit_params_mut(&join(prefix, "attn"), f);
        self.ffn1.visit_params_mut(&join(prefix, "ffn.0"), f);
        self.ffn2.visit_params_mut(&join(prefix, "ffn.1"), f);
    }
}

/// CSP block whose processed half runs through `n` [`PsaBlock`]s.
/// Channel count is preserved end to end.
#[derive(Clone, Debug, PartialEq)]
pub struct C2psa {
    pub hidden: usize,
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub m: Vec<PsaBlock>,
}

impl C2psa {
    pub fn new(c: usize, n: usize, e: f64) -> Result<Self> {
        let hidden = hidden_channels(c, e)?;
        Ok(Self {
            hidden,
            cv1: Cbs::new(c, 2 * hidden, 1, 1)?,
            cv2: Cbs::new(2 * hidden, c, 1, 1)?,
            m: (0..n).map(|_| PsaBlock::new(hidden)).collect::<Result<_>>()?,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = self.cv1.forward(be, x)?;
        let bypass = be.slice_channels(&y, 0, self.hidden)?;
        let mut attended = be.slice_channels(&y, self.hidden, self.hidden)?;
        for b in &self.m {
            attended = b.forward(be, &attended)?;
        }
        let cat = be.concat(&[&bypass, &attended])?;
        self.cv2.forward(be, &cat)
    }
}

impl Params for C2psa {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
    }
}

pub fn forward_c2psa(b: &C2psa, x: &Tensor4) -> Result<Tensor4> {
    b.forward(&mut Eager, x)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::blocks::init_random_full;
    use crate::tensor::{add, batchnorm2d_infer, concat_channels, conv2d, silu};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_by_one_identity(c: usize) -> Tensor4 {
        Tensor4::from_fn([c, c, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 })
    }

    #[test]
    fn empty_body_with_identity_convs_is_identity() {
        let mut b = C2psa::new(8, 0, 0.5).unwrap();
        for cv in [&mut b.cv1, &mut b.cv2] {
            cv.weight = one_by_one_identity(8);
            cv.act = Activation::Identity;
            cv.bn.eps = 0.0;
        }
        let x = Tensor4::random_uniform([1, 8, 3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(forward_c2psa(&b, &x).unwrap(), x);
    }

    #[test]
    fn head_layout() {
        assert_eq!(Attention::new(32).unwrap().heads, 1);
        let a = Attention::new(128).unwrap();
        assert_eq!((a.heads, a.head_dim, a.key_dim), (2, 64, 32));
        assert!(Attention::new(96).is_ok());
        assert!(Attention::new(1).is_err());
        assert!(Attention::new(130).is_ok());
        assert!(Attention::new(129).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = C2psa::new(128, 1, 0.5).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([1, 128, 5, 6], -2.0, 2.0, &mut rng);
        let inner = forward_cbs_slice(&b, &x);
        let maps = b.m[0].attn.attention_maps(&inner).unwrap();
        assert_eq!(maps.len(), 1);
        for m in &maps {
            assert_eq!(m.shape(), [1, 1, 30, 30]);
            for row in m.data().chunks_exact(30) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    fn forward_cbs_slice(b: &C2psa, x: &Tensor4) -> Tensor4 {
        let y = b.cv1.forward(&mut Eager, x).unwrap();
        y.channel_slice(b.hidden, b.hidden).unwrap()
    }

    fn conv_bn(cbs: &Cbs, x: &Tensor4) -> Tensor4 {
        let y = conv2d(x, &cbs.weight, None, cbs.params).unwrap();
        batchnorm2d_infer(
            &y,
            &cbs.bn.gamma,
            &cbs.bn.beta,
            &cbs.bn.running_mean,
            &cbs.bn.running_var,
            cbs.bn.eps,
        )
        .unwrap()
    }

    /// Dense attention written out with explicit score matrices in f64.
    fn dense_attention(a: &Attention, x: &Tensor4) -> Tensor4 {
        let [_, c, h, w] = x.shape();
        let n = h * w;
        let qkv = conv_bn(&a.qkv, x);
        let stride = 2 * a.key_dim + a.head_dim;
        let mut out = Tensor4::zeros([1, c, h, w]);
        let mut v_all = Tensor4::zeros([1, c, h, w]);
        for head in 0..a.heads {
            let ch = |base: usize, d: usize, t: usize| qkv.data()[(head * stride + base + d) * n + t] as f64;
            let mut weights = vec![vec![0f64; n]; n];
            for i in 0..n {
                let mut row: Vec<f64> = (0..n)
                    .map(|j| {
                        (0..a.key_dim).map(|d| ch(0, d, i) * ch(a.key_dim, d, j)).sum::<f64>()
                            / (a.key_dim as f64).sqrt()
                    })
                    .collect();
                let m = row.iter().cloned().fold(f64::MIN, f64::max);
                let s: f64 = row
                    .iter_mut()
                    .map(|v| {
                        *v = (*v - m).exp();
                        *v
                    })
                    .sum();
                row.iter_mut().for_each(|v| *v /= s);
                weights[i] = row;
            }
            for d in 0..a.head_dim {
                for i in 0..n {
                    let acc: f64 = (0..n).map(|j| ch(2 * a.key_dim, d, j) * weights[i][j]).sum();
                    out.data_mut()[(head * a.head_dim + d) * n + i] = acc as f32;
                    v_all.data_mut()[(head * a.head_dim + d) * n + i] = ch(2 * a.key_dim, d, i) as f32;
                }
            }
        }
        let pos = conv_bn(&a.pe, &v_all);
        let summed = add(&out, &pos).unwrap();
        conv_bn(&a.proj, &summed)
    }

    fn assert_close(got: &Tensor4, want: &Tensor4) {
        assert_eq!(got.shape(), want.shape());
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{g} vs {w}");
        }
    }

    #[test]
    fn two_head_attention_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let mut a = Attention::new(128).unwrap();
        init_random_full(&mut a, &mut rng);
        let x = Tensor4::random_uniform([1, 128, 8, 8], -1.0, 1.0, &mut rng);
        assert_close(&a.forward(&mut Eager, &x).unwrap(), &dense_attention(&a, &x));
    }

    #[test]
    fn c2psa_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(65);
        let mut b = C2psa::new(64, 1, 0.5).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([1, 64, 8, 8], -1.0, 1.0, &mut rng);

        let y = silu(&conv_bn(&b.cv1, &x));
        let bypass = y.channel_slice(0, 32).unwrap();
        let mut t = y.channel_slice(32, 32).unwrap();
        for psa in &b.m {
            t = add(&t, &dense_attention(&psa.attn, &t)).unwrap();
            let f = conv_bn(&psa.ffn2, &silu(&conv_bn(&psa.ffn1, &t)));
            t = add(&t, &f).unwrap();
        }
        let want = silu(&conv_bn(&b.cv2, &concat_channels(&[&bypass, &t]).unwrap()));
        assert_close(&forward_c2psa(&b, &x).unwrap(), &want);
    }

    #[test]
    fn c2psa_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut b = C2psa::new(16, 2, 0.5).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([2, 16, 3, 5], -1.0, 1.0, &mut rng);
        assert_eq!(forward_c2psa(&b, &x).unwrap().shape(), x.shape());
    }
}
