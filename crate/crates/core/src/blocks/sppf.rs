use super::{join, Backend, Cbs, Eager, ParamMut, ParamRef, Params};
use crate::tensor::{invalid, Result, Tensor4};

/// Spatial pyramid pooling, fast form: three chained stride-1 max pools of
/// the same kernel, concatenated with their input.
#[derive(Clone, Debug, PartialEq)]
pub struct Sppf {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub k: usize,
}

impl Sppf {
    pub fn new(c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(invalid("Sppf", format!("pool kernel {k} must be odd to preserve size")));
        }
        let hidden = c_in / 2;
        Ok(Self {
            cv1: Cbs::new(c_in, hidden, 1, 1)?,
            cv2: Cbs::new(4 * hidden, c_out, 1, 1)?,
            k,
        })
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let x0 = self.cv1.forward(be, x)?;
        let p1 = be.maxpool(&x0, self.k, 1, self.k / 2)?;
        let p2 = be.maxpool(&p1, self.k, 1, self.k / 2)?;
        let p3 = be.maxpool(&p2, self.k, 1, self.k / 2)?;
        let cat = be.concat(&[&x0, &p1, &p2, &p3])?;
        self.cv2.forward(be, &cat)
    }
}

impl Params for Sppf {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamRef<'_>)) {
        self.cv1.visit_params(&join(prefix, "cv1"), f);
        self.cv2.visit_params(&join(prefix, "cv2"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamMut<'_>)) {
        self.cv1.visit_params_mut(&join(prefix, "cv1"), f);
        self.cv2.visit_params_mut(&join(prefix, "cv2"), f);
    }
}

pub fn forward_sppf(b: &Sppf, x: &Tensor4) -> Result<Tensor4> {
    b.forward(&mut Eager, x)
}

/// Classic spatial pyramid pooling with parallel pools of growing kernels.
/// Kept as the reference the fast form must reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct Spp {
    pub cv1: Cbs,
    pub cv2: Cbs,
    pub kernels: [usize; 3],
}

impl Spp {
    /// Shares the convs of `fast`; pools of `k`, `2k - 1`, `3k - 2`.
    pub fn from_fast(fast: &Sppf) -> Self {
        let k = fast.k;
        Self {
            cv1: fast.cv1.clone(),
            cv2: fast.cv2.clone(),
            kernels: [k, 2 * k - 1, 3 * k - 2],
        }
    }

    pub fn forward<B: Backend>(&self, be: &mut B, x: &B::Value) -> Result<B::Value> {
        let x0 = self.cv1.forward(be, x)?;
        let mut parts = vec![x0.clone()];
        for &k in &self.kernels {
            parts.push(be.maxpool(&x0, k, 1, k / 2)?);
        }
        let refs: Vec<&B::Value> = parts.iter().collect();
        let cat = be.concat(&refs)?;
        self.cv2.forward(be, &cat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::init_random_full;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_with_identity_convs_stays_constant() {
        let mut b = Sppf::new(4, 8, 5).unwrap();
        // cv1: pick channels 0 and 1; cv2: pick channel 0 of every pooled copy and copy 1 of the rest
        b.cv1.weight = Tensor4::from_fn([2, 4, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        b.cv2.weight = Tensor4::from_fn([8, 8, 1, 1], |[o, i, _, _]| if o == i { 1.0 } else { 0.0 });
        let x = Tensor4::full([1, 4, 7, 7], 0.75);
        let y = forward_sppf(&b, &x).unwrap();
        let first = y.data()[0];
        assert!(y.data().iter().all(|&v| v == first));
    }

    #[test]
    fn preserves_spatial_dims_for_small_maps() {
        let b = Sppf::new(4, 6, 5).unwrap();
        for (h, w) in [(1, 1), (2, 3), (5, 5), (9, 4)] {
            let y = forward_sppf(&b, &Tensor4::zeros([1, 4, h, w])).unwrap();
            assert_eq!(y.shape(), [1, 6, h, w]);
        }
    }

    #[test]
    fn matches_parallel_pyramid() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut b = Sppf::new(8, 8, 5).unwrap();
        init_random_full(&mut b, &mut rng);
        let x = Tensor4::random_uniform([1, 8, 11, 9], -2.0, 2.0, &mut rng);
        let fast = forward_sppf(&b, &x).unwrap();
        let slow = Spp::from_fast(&b).forward(&mut Eager, &x).unwrap();
        for (a, s) in fast.data().iter().zip(slow.data()) {
            assert!((a - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }

    #[test]
    fn even_kernel_rejected() {
        assert!(Sppf::new(4, 4, 4).is_err());
    }
}
