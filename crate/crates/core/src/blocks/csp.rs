//! Cross-stage-partial blocks: Bottleneck, C2f, C3k and C3k2.

use super::{join, Backend, Cbs, Eager, ParamMut, ParamRef, Params};
use crate::tensor::{invalid, Result, Tensor4};

/// Two stacked CBS units with an optional residual connection.
#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub residual: bool,
}

impl Bottleneck {
    /// `k`×`k` convolutions, hidden width `c_out · e`. The residual is only
    /// wired when requested and `c_in == c_out`.
    pub fn new(c_in: usize, c_out: usize, shortcut: bool, k: usize, e: f64) -> Result<Self> {
        let hidden = hidden_channels(c_out, e)?;
        Ok(Self {
            cv1: Cbs::new(c_in, hidden, k, 1)?,
            cv2: Cbs::new(hidden, c_out, k, 1)?,
            residual: shortcut && c_in == c_out,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let y = self.cv1.forward(be, x)?;
        let y = self.cv2.forward(be, &y)?;
        if self.residual {
            be.add(x, &y)
        } else {
            Ok(y)
        }
    }
}

impl Params for Bottleneck {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }
}

pub(crate) fn hidden_channels(c_out: usize, e: f64) -> Result<usize> {
    let h = (c_out as f64 * e) as usize;
    if h == 0 {
        return Err(invalid("csp", format!("hidden width {c_out}·{e} rounds to zero")));
    }
    Ok(h)
}

/// Split the entry conv output in two halves, run `units` serially on the
/// second half while keeping every intermediate, concatenate everything and
/// merge with the exit conv. Shared by C2f and C3k2.
#[allow(clippy::too_many_arguments)]
fn split_accumulate<B, F>(
    be: &mut B,
    x: &B::Value,
    cv1: &Cbs,
    cv2: &Cbs,
    hidden: usize,
    n_units: usize,
    order: SplitOrder,
    mut unit: F,
) -> Result<B::Value>
where
    B: Backend,
    F: FnMut(&mut B, usize, &B::Value) -> Result<B::Value>,
{
    let y = cv1.forward(be, x)?;
    let first = be.slice_channels(&y, 0, hidden)?;
    let second = be.slice_channels(&y, hidden, hidden)?;
    let mut outs = match order {
        SplitOrder::Standard => vec![first, second],
        SplitOrder::Swapped => vec![second, first],
    };
    for i in 0..n_units {
        let next = unit(be, i, outs.last().expect("two halves"))?;
        outs.push(next);
    }
    let refs: Vec<&B::Value> = outs.iter().collect();
    let cat = be.concat(&refs)?;
    cv2.forward(be, &cat)
}

/// Which half of the entry split feeds the inner units. Only
/// [`SplitOrder::Standard`] is a correct C2f/C3k2; the other exists so
/// self-tests can show the equivalence check catches miswiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitOrder {
    #[default]
    Standard,
    #[doc(hidden)]
    Swapped,
}

/// YOLOv8's CSP block: entry 1×1 to `2·hidden`, `n` bottlenecks chained on
/// the second half, exit 1×1 over all `n + 2` pieces.
#[derive(Clone, Debug, PartialEq)]
pub struct C2f {
    pub hidden: usize,
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub m: Vec<Bottleneck>,
}

impl C2f {
    pub fn new(c_in: usize, c_out: usize, n: usize, shortcut: bool, e: f64) -> Result<Self> {
        let hidden = hidden_channels(c_out, e)?;
        Ok(Self {
            hidden,
            cv1: Cbs::new(c_in, 2 * hidden, 1, 1)?,
            cv2: Cbs::new((2 + n) * hidden, c_out, 1, 1)?,
            m: (0..n)
                .map(|_| Bottleneck::new(hidden, hidden, shortcut, 3, 1.0))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        split_accumulate(
            be,
            x,
            &self.cv1,
            &self.cv2,
            self.hidden,
            self.m.len(),
            SplitOrder::Standard,
            |be, i, v| self.m[i].forward(be, v),
        )
    }
}

impl Params for C2f {
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

/// CSP block with three 1×1 convs and a configurable bottleneck kernel:
/// `cv3(concat(m(cv1(x)), cv2(x)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct C3k {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub cv3: Cbs,
    pub m: Vec<Bottleneck>,
}

impl C3k {
    pub fn new(c_in: usize, c_out: usize, n: usize, shortcut: bool, e: f64, k: usize) -> Result<Self> {
        let hidden = hidden_channels(c_out, e)?;
        Ok(Self {
            cv1: Cbs::new(c_in, hidden, 1, 1)?,
            cv2: Cbs::new(c_in, hidden, 1, 1)?,
            cv3: Cbs::new(2 * hidden, c_out, 1, 1)?,
            m: (0..n)
                .map(|_| Bottleneck::new(hidden, hidden, shortcut, k, 1.0))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let mut main = self.cv1.forward(be, x)?;
        for b in &self.m {
            main = b.forward(be, &main)?;
        }
        let bypass = self.cv2.forward(be, x)?;
        let cat = be.concat(&[&main, &bypass])?;
        self.cv3.forward(be, &cat)
    }
}

impl Params for C3k {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
        self.cv3.visit_params(&join(prefix, "cv3"), f);
        for (i, b) in self.m.iter().enumerate() {
            b.visit_params(&join(prefix, &format!("m.{i}")), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
        self.cv3.visit_params_mut(&join(prefix, "cv3"), f);
        for (i, b) in self.m.iter_mut().enumerate() {
            b.visit_params_mut(&join(prefix, &format!("m.{i}")), f);
        }
    }
}

/// Inner unit of a C3k2 block.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum CspUnit {
    Bottleneck(Bottleneck),
    C3k(C3k),
}

impl CspUnit {
    fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        match self {
            CspUnit::Bottleneck(b) => b.forward(be, x),
            CspUnit::C3k(b) => b.forward(be, x),
        }
    }
}

impl Params for CspUnit {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        match self {
            CspUnit::Bottleneck(b) => b.visit_params(prefix, f),
            CspUnit::C3k(b) => b.visit_params(prefix, f),
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        match self {
            CspUnit::Bottleneck(b) => b.visit_params_mut(prefix, f),
            CspUnit::C3k(b) => b.visit_params_mut(prefix, f),
        }
    }
}

/// YOLO11's CSP block. Same skeleton as [`C2f`]; with `c3k` the inner
/// units are two-deep [`C3k`] blocks instead of plain bottlenecks.
#[derive(Clone, Debug, PartialEq)]
pub struct C3k2 {
    pub hidden: usize,
    pub c3k: bool,
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub m: Vec<CspUnit>,
    #[doc(hidden)]
    pub split: SplitOrder,
}

/// Bottlenecks per C3k unit inside a C3k2 block.
pub const C3K_DEPTH: usize = 2;

impl C3k2 {
    pub fn new(c_in: usize, c_out: usize, n: usize, c3k: bool, e: f64, shortcut: bool) -> Result<Self> {
        let hidden = hidden_channels(c_out, e)?;
        let m = (0..n)
            .map(|_| {
                Ok(if c3k {
                    CspUnit::C3k(C3k::new(hidden, hidden, C3K_DEPTH, shortcut, 0.5, 3)?)
                } else {
                    CspUnit::Bottleneck(Bottleneck::new(hidden, hidden, shortcut, 3, 1.0)?)
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            hidden,
            c3k,
            cv1: Cbs::new(c_in, 2 * hidden, 1, 1)?,
            cv2: Cbs::new((2 + n) * hidden, c_out, 1, 1)?,
            m,
            split: SplitOrder::Standard,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        split_accumulate(
            be,
            x,
            &self.cv1,
            &self.cv2,
            self.hidden,
            self.m.len(),
            self.split,
            |be, i, v| self.m[i].forward(be, v),
        )
    }
}

impl Params for C3k2 {
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

pub fn forward_c3k2(b: &C3k2, x: &Tensor4) -> Result<Tensor4> {
    b.forward(&mut Eager, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{copy_params, forward_cbs, init_random_full};
    use crate::tensor::{add, concat_channels};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn c3k2_without_c3k_equals_c2f_bitwise() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed as usize % 3);
            let mut c3k2 = C3k2::new(6, 8, n, false, 0.5, seed % 2 == 0).unwrap();
            init_random_full(&mut c3k2, &mut rng);
            let mut c2f = C2f::new(6, 8, n, seed % 2 == 0, 0.5).unwrap();
            copy_params(&c3k2, &mut c2f).unwrap();
            let x = Tensor4::random_uniform([1, 6, 5, 4], -2.0, 2.0, &mut rng);
            let a = forward_c3k2(&c3k2, &x).unwrap();
            let b = c2f.forward(&mut Eager, &x).unwrap();
            assert_eq!(a, b, "seed {seed}");
        }
    }

    #[test]
    fn swapped_split_breaks_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut c3k2 = C3k2::new(4, 8, 1, false, 0.5, true).unwrap();
        init_random_full(&mut c3k2, &mut rng);
        let mut c2f = C2f::new(4, 8, 1, true, 0.5).unwrap();
        copy_params(&c3k2, &mut c2f).unwrap();
        c3k2.split = SplitOrder::Swapped;
        let x = Tensor4::random_uniform([1, 4, 4, 4], -2.0, 2.0, &mut rng);
        assert_ne!(forward_c3k2(&c3k2, &x).unwrap(), c2f.forward(&mut Eager, &x).unwrap());
    }

    #[test]
    fn c3k_variant_preserves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = C3k2::new(8, 16, 1, true, 0.5, true).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([2, 8, 6, 5], -1.0, 1.0, &mut rng);
        assert_eq!(forward_c3k2(&b, &x).unwrap().shape(), [2, 16, 6, 5]);
    }

    /// Straight-line rewrite of the c3k=True wiring using only CBS calls.
    #[test]
    fn c3k_variant_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut b = C3k2::new(6, 8, 2, true, 0.5, true).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([1, 6, 5, 5], -1.5, 1.5, &mut rng);
        let got = forward_c3k2(&b, &x).unwrap();

        let y = forward_cbs(&b.cv1, &x).unwrap();
        let mut pieces = vec![y.channel_slice(0, 4).unwrap(), y.channel_slice(4, 4).unwrap()];
        for unit in &b.m {
            let CspUnit::C3k(c3k) = unit else {
                panic!("expected C3k units")
            };
            let input = pieces.last().unwrap().clone();
            let mut main = forward_cbs(&c3k.cv1, &input).unwrap();
            for bn in &c3k.m {
                let inner = forward_cbs(&bn.cv2, &forward_cbs(&bn.cv1, &main).unwrap()).unwrap();
                main = add(&main, &inner).unwrap();
            }
            let bypass = forward_cbs(&c3k.cv2, &input).unwrap();
            pieces.push(forward_cbs(&c3k.cv3, &concat_channels(&[&main, &bypass]).unwrap()).unwrap());
        }
        let refs: Vec<&Tensor4> = pieces.iter().collect();
        let want = forward_cbs(&b.cv2, &concat_channels(&refs).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn bottleneck_with_identity_convs_and_zero_second_conv_is_identity() {
        // cv2 outputs silu(0) = 0, so the residual passes x through untouched.
        let b = Bottleneck::new(4, 4, true, 3, 1.0).unwrap();
        let x = Tensor4::random_uniform([1, 4, 3, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(b.forward(&mut Eager, &x).unwrap(), x);
        let no_res = Bottleneck::new(4, 8, true, 3, 1.0).unwrap();
        assert!(!no_res.residual);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let b = C3k2::new(8, 8, 1, false, 0.5, true).unwrap();
        assert!(forward_c3k2(&b, &Tensor4::zeros([1, 4, 2, 2])).is_err());
    }

    #[test]
    fn param_counts() {
        // entry 8->8, exit 12->8, one 4->4 bottleneck pair
        let b = C3k2::new(8, 8, 1, false, 0.5, true).unwrap();
        let cbs = |ci: usize, co: usize, k: usize| k * k * ci * co + 2 * co;
        assert_eq!(b.param_count(), cbs(8, 8, 1) + cbs(12, 8, 1) + 2 * cbs(4, 4, 3));
        let c = C3k2::new(8, 8, 1, true, 0.5, true).unwrap();
        let c3k = 2 * cbs(4, 2, 1) + cbs(4, 4, 1) + 2 * 2 * cbs(2, 2, 3);
        assert_eq!(c.param_count(), cbs(8, 8, 1) + cbs(12, 8, 1) + c3k);
    }
}
