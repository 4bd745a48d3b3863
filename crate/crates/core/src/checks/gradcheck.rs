//! Finite-difference validation of every differentiable op and block.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{init_random_full, Activation, Attention, Bottleneck, C2f, C2psa, C3k, C3k2, Cbs, PsaBlock, Sppf};
use crate::tensor::tape::finite_diff_check_with;
use crate::tensor::{AdjointFault, ConvParams, Result, Tape, Tensor4, Var};

/// Failure threshold on the maximum relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckItem {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl GradcheckItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

type Check = fn(&mut ChaCha8Rng, Option<AdjointFault>) -> Result<f64>;

/// Scalar objective: a fixed random projection of `y`, so every output
/// element carries a distinct, non-vanishing weight.
fn project(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let len = t.value(y)?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let weights: Vec<f64> = (0..len)
        .map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 })
        .collect();
    t.dot(y, &weights)
}

fn input(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    Tensor4::random_uniform(shape, -1.5, 1.5, rng)
}

/// Shuffled values on a grid spaced far wider than the step, so max pooling
/// never sees a near-tie.
fn separated(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor4 {
    use rand::seq::SliceRandom;
    let len: usize = shape.iter().product();
    let mut values: Vec<f32> = (0..len).map(|i| -1.5 + 3.0 * i as f32 / len as f32).collect();
    values.shuffle(rng);
    Tensor4::new(shape, values).expect("shape matches length")
}

fn check<F>(x: &Tensor4, fault: Option<AdjointFault>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_with(
        |t, v| {
            let y = f(t, v)?;
            project(t, y, 1)
        },
        x,
        GRADCHECK_STEP,
        fault,
    )
}

fn block_check<F>(rng: &mut ChaCha8Rng, shape: [usize; 4], fault: Option<AdjointFault>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &Var) -> Result<Var>,
{
    let x = input(rng, shape);
    check(&x, fault, |t, v| f(t, &v))
}

fn registry() -> Vec<(&'static str, Check)> {
    vec![
        ("conv2d/input", |rng, fault| {
            let w = input(rng, [3, 2, 3, 3]);
            let x = input(rng, [1, 2, 5, 4]);
            check(&x, fault, |t, v| {
                let w = t.input(&w)?;
                t.conv2d(v, w, None, ConvParams::same(3, 2))
            })
        }),
        ("conv2d/weight", |rng, fault| {
            let x = input(rng, [2, 2, 4, 4]);
            let w = input(rng, [3, 2, 3, 3]);
            check(&w, fault, |t, v| {
                let x = t.input(&x)?;
                t.conv2d(x, v, None, ConvParams::same(3, 1))
            })
        }),
        ("conv2d/bias", |rng, fault| {
            let x = input(rng, [1, 2, 3, 3]);
            let w = input(rng, [4, 2, 1, 1]);
            let b = input(rng, [1, 4, 1, 1]);
            check(&b, fault, |t, v| {
                let x = t.input(&x)?;
                let w = t.input(&w)?;
                t.conv2d(x, w, Some(v), ConvParams::same(1, 1))
            })
        }),
        ("conv2d/depthwise", |rng, fault| {
            let w = input(rng, [4, 1, 3, 3]);
            let x = input(rng, [1, 4, 4, 4]);
            check(&x, fault, |t, v| {
                let w = t.input(&w)?;
                t.conv2d(v, w, None, ConvParams::same(3, 1).with_groups(4))
            })
        }),
        ("batchnorm2d/input", |rng, fault| {
            let x = input(rng, [2, 3, 3, 3]);
            let gamma: Vec<f32> = (0..3).map(|_| rng.gen_range(0.5..1.5)).collect();
            let beta: Vec<f32> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
            check(&x, fault, |t, v| {
                let g = t.vector(&gamma)?;
                let b = t.vector(&beta)?;
                t.batchnorm(v, g, b, &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-3)
            })
        }),
        ("batchnorm2d/gamma", |rng, fault| {
            let x = Tensor4::random_uniform([2, 3, 3, 3], -1.5, 1.5, rng);
            let gamma = input(rng, [1, 3, 1, 1]);
            check(&gamma, fault, |t, v| {
                let xi = t.input(&x)?;
                let b = t.vector(&[0.0, 0.1, 0.2])?;
                t.batchnorm(xi, v, b, &[0.1, -0.2, 0.3], &[0.5, 1.0, 2.0], 1e-3)
            })
        }),
        ("silu", |rng, fault| {
            check(&input(rng, [1, 3, 4, 4]), fault, |t, v| t.silu(v))
        }),
        ("maxpool2d", |rng, fault| {
            check(&separated(rng, [1, 2, 6, 6]), fault, |t, v| t.maxpool2d(v, 5, 1, 2))
        }),
        ("maxpool2d/strided", |rng, fault| {
            check(&separated(rng, [1, 2, 6, 5]), fault, |t, v| t.maxpool2d(v, 3, 2, 1))
        }),
        ("upsample_nearest2x", |rng, fault| {
            check(&input(rng, [1, 2, 3, 3]), fault, |t, v| t.upsample2x(v))
        }),
        ("concat_channels", |rng, fault| {
            let other = input(rng, [2, 3, 2, 3]);
            check(&input(rng, [2, 2, 2, 3]), fault, |t, v| {
                let o = t.input(&other)?;
                let sq = t.silu(v)?;
                t.concat(&[o, sq, v])
            })
        }),
        ("slice_channels", |rng, fault| {
            check(&input(rng, [2, 5, 2, 2]), fault, |t, v| t.slice_channels(v, 1, 3))
        }),
        ("add", |rng, fault| {
            check(&input(rng, [1, 2, 3, 3]), fault, |t, v| {
                let s = t.silu(v)?;
                t.add(v, s)
            })
        }),
        ("scale", |rng, fault| {
            check(&input(rng, [1, 2, 2, 2]), fault, |t, v| t.scale(v, -0.37))
        }),
        ("matmul", |rng, fault| {
            let b = input(rng, [1, 2, 4, 3]);
            check(&input(rng, [1, 2, 5, 4]), fault, |t, v| {
                let b = t.input(&b)?;
                t.matmul(v, b)
            })
        }),
        ("transpose_last2", |rng, fault| {
            check(&input(rng, [1, 2, 3, 4]), fault, |t, v| t.transpose_last2(v))
        }),
        ("softmax_lastdim", |rng, fault| {
            check(&input(rng, [1, 2, 3, 6]), fault, |t, v| t.softmax_lastdim(v))
        }),
        ("global_avgpool", |rng, fault| {
            check(&input(rng, [2, 3, 3, 2]), fault, |t, v| t.global_avgpool(v))
        }),
        ("block/cbs", |rng, fault| {
            let mut b = Cbs::new(4, 6, 3, 2)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 4, 6, 6], fault, |t, x| b.forward(t, x))
        }),
        ("block/cbs_depthwise", |rng, fault| {
            let mut b = Cbs::grouped(4, 4, 3, 1, 4, Activation::Silu)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 4, 5, 5], fault, |t, x| b.forward(t, x))
        }),
        ("block/bottleneck", |rng, fault| {
            let mut b = Bottleneck::new(4, 4, true, 3, 1.0)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 4, 5, 5], fault, |t, x| b.forward(t, x))
        }),
        ("block/c2f", |rng, fault| {
            let mut b = C2f::new(6, 8, 2, true, 0.5)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 6, 5, 4], fault, |t, x| b.forward(t, x))
        }),
        ("block/c3k", |rng, fault| {
            let mut b = C3k::new(4, 8, 2, true, 0.5, 3)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 4, 5, 5], fault, |t, x| b.forward(t, x))
        }),
        ("block/c3k2", |rng, fault| {
            let mut b = C3k2::new(6, 8, 2, false, 0.5, true)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 6, 4, 5], fault, |t, x| b.forward(t, x))
        }),
        ("block/c3k2_c3k", |rng, fault| {
            let mut b = C3k2::new(8, 8, 1, true, 0.5, true)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 8, 5, 5], fault, |t, x| b.forward(t, x))
        }),
        ("block/sppf", |rng, fault| {
            let mut b = Sppf::new(8, 6, 5)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 8, 6, 6], fault, |t, x| b.forward(t, x))
        }),
        ("block/attention", |rng, fault| {
            let mut b = Attention::new(8)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 8, 3, 4], fault, |t, x| b.forward(t, x))
        }),
        ("block/psa", |rng, fault| {
            let mut b = PsaBlock::new(8)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 8, 4, 3], fault, |t, x| b.forward(t, x))
        }),
        ("block/c2psa", |rng, fault| {
            let mut b = C2psa::new(8, 1, 0.5)?;
            init_random_full(&mut b, rng);
            block_check(rng, [1, 8, 4, 4], fault, |t, x| b.forward(t, x))
        }),
    ]
}

/// Names of all registered items, in report order.
pub fn gradcheck_items() -> Vec<&'static str> {
    registry().into_iter().map(|(n, _)| n).collect()
}

/// Runs every registered check. With `fault`, the analytic pass uses a
/// deliberately wrong adjoint rule.
pub fn run_gradcheck(seed: u64, fault: Option<AdjointFault>) -> Result<Vec<GradcheckItem>> {
    registry()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
            Ok(GradcheckItem {
                name,
                max_rel_error: f(&mut rng, fault)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::OpKind;

    #[test]
    fn all_items_pass_at_default_seed() {
        let report = run_gradcheck(0, None).unwrap();
        assert_eq!(report.len(), gradcheck_items().len());
        for item in &report {
            assert!(item.passed(), "{} error {:e}", item.name, item.max_rel_error);
        }
    }

    #[test]
    fn corrupted_silu_adjoint_fails_blocks() {
        let fault = AdjointFault {
            kind: OpKind::Silu,
            factor: 1.5,
        };
        let report = run_gradcheck(0, Some(fault)).unwrap();
        let failed: Vec<_> = report.iter().filter(|i| !i.passed()).map(|i| i.name).collect();
        assert!(failed.contains(&"silu"));
        assert!(failed.contains(&"block/c2psa"));
        assert!(!failed.contains(&"matmul"));
    }
}
