//! Oracle-equivalence suite: fast kernels and blocks against brute force or
//! against an algebraically equivalent construction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles;
use crate::analysis::count_params;
use crate::blocks::{copy_params, init_random_full, C2f, C3k2, Eager, SplitOrder, Spp, Sppf};
use crate::model::{apply_scale, build_model, parse_config, BUILTIN_CONFIGS};
use crate::postprocess::nms;
use crate::tensor::{self, ConvParams, Tensor4};

/// Cases per kernel oracle.
pub const KERNEL_CASES: usize = 100;
/// Weight/input draws for the C3k2 degenerate-mode check.
pub const C3K2_CASES: usize = 50;
/// Inputs for the pyramid pooling identities.
pub const SPP_CASES: usize = 100;
/// Relative tolerance against the `f64` softmax.
pub const SOFTMAX_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub cases: usize,
    /// First failing case, if any.
    pub failure: Option<String>,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    /// Wire every C3k2 with its split halves swapped.
    pub miswire_c3k2: bool,
}

fn rng(seed: u64, case: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(case as u64))
}

fn run(name: &'static str, cases: usize, mut case: impl FnMut(usize) -> Result<(), String>) -> PropertyResult {
    let failure = (0..cases).find_map(|i| case(i).err().map(|e| format!("case {i}: {e}")));
    PropertyResult { name, cases, failure }
}

fn same(a: &Tensor4, b: &Tensor4) -> Result<(), String> {
    if a.shape() != b.shape() {
        return Err(format!("shape {:?} vs {:?}", a.shape(), b.shape()));
    }
    match a.data().iter().zip(b.data()).position(|(x, y)| x != y) {
        None => Ok(()),
        Some(i) => Err(format!("element {i}: {} vs {}", a.data()[i], b.data()[i])),
    }
}

pub fn conv2d_matches_oracle(seed: u64, cases: usize) -> PropertyResult {
    run("conv2d == direct loop", cases, |i| {
        let mut r = rng(seed, i);
        // Every tenth case is large enough to cross the kernel's blocking.
        let big = i % 10 == 9;
        let groups = match r.gen_range(0..3) {
            0 => 1,
            1 => 2,
            _ => r.gen_range(1..=4),
        };
        let depthwise = !big && r.gen_bool(0.25);
        let (cig, cog) = if depthwise {
            (1, 1)
        } else if big {
            (40, 9)
        } else {
            (r.gen_range(1..=4), r.gen_range(1..=4))
        };
        let k = if big { 3 } else { [1, 2, 3, 5][r.gen_range(0..4)] };
        let stride = r.gen_range(1..=3);
        let padding = r.gen_range(0..=k / 2);
        let (h, w) = if big {
            (18, 17)
        } else {
            (r.gen_range(k..=9), r.gen_range(k..=9))
        };
        let n = r.gen_range(1..=2);
        let x = Tensor4::random_uniform([n, cig * groups, h, w], -2.0, 2.0, &mut r);
        let wt = Tensor4::random_uniform([cog * groups, cig, k, k], -1.0, 1.0, &mut r);
        let bias: Option<Vec<f32>> = r
            .gen_bool(0.5)
            .then(|| (0..cog * groups).map(|_| r.gen_range(-1.0..1.0)).collect());
        let p = ConvParams::same(k, stride).with_padding(padding).with_groups(groups);
        let got = tensor::conv2d(&x, &wt, bias.as_deref(), p).map_err(|e| e.to_string())?;
        same(
            &got,
            &oracles::conv2d(&x, &wt, bias.as_deref(), stride, padding, groups),
        )
    })
}

pub fn maxpool_matches_oracle(seed: u64, cases: usize) -> PropertyResult {
    run("maxpool2d == window max", cases, |i| {
        let mut r = rng(seed, i);
        let k = r.gen_range(1..=5);
        let stride = r.gen_range(1..=3);
        let padding = r.gen_range(0..=k / 2);
        let x = Tensor4::random_uniform(
            [
                r.gen_range(1..=2),
                r.gen_range(1..=3),
                r.gen_range(k..=10),
                r.gen_range(k..=10),
            ],
            -3.0,
            3.0,
            &mut r,
        );
        let got = tensor::maxpool2d(&x, k, stride, padding).map_err(|e| e.to_string())?;
        same(&got, &oracles::maxpool2d(&x, k, stride, padding))
    })
}

pub fn matmul_matches_oracle(seed: u64, cases: usize) -> PropertyResult {
    run("matmul == triple loop", cases, |i| {
        let mut r = rng(seed, i);
        let (n, c) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let k = if i % 10 == 9 {
            r.gen_range(200..=400)
        } else {
            r.gen_range(1..=12)
        };
        let a = Tensor4::random_uniform([n, c, r.gen_range(1..=12), k], -1.0, 1.0, &mut r);
        let b = Tensor4::random_uniform([n, c, k, r.gen_range(1..=12)], -1.0, 1.0, &mut r);
        let got = tensor::matmul(&a, &b).map_err(|e| e.to_string())?;
        same(&got, &oracles::matmul(&a, &b))
    })
}

pub fn softmax_matches_oracle(seed: u64, cases: usize) -> PropertyResult {
    run("softmax == f64 reference", cases, |i| {
        let mut r = rng(seed, i);
        let x = Tensor4::random_uniform(
            [1, r.gen_range(1..=3), r.gen_range(1..=5), r.gen_range(1..=16)],
            -4.0,
            4.0,
            &mut r,
        );
        let got = tensor::softmax_lastdim(&x).map_err(|e| e.to_string())?;
        for (j, (&g, &o)) in got.data().iter().zip(&oracles::softmax_lastdim(&x)).enumerate() {
            let rel = (g as f64 - o).abs() / o;
            if rel > SOFTMAX_TOLERANCE {
                return Err(format!("element {j}: relative error {rel:.3e}"));
            }
        }
        Ok(())
    })
}

pub fn nms_matches_oracle(seed: u64, cases: usize) -> PropertyResult {
    run("nms == quadratic greedy", cases, |i| {
        let mut r = rng(seed, i);
        let n = r.gen_range(0..=64);
        let boxes = oracles::random_boxes(&mut r, n);
        let t = r.gen_range(0.1..0.9);
        let got = nms(&boxes, t).map_err(|e| e.to_string())?;
        let want = oracles::nms(&boxes, t);
        if got != want {
            return Err(format!("kept {} boxes, oracle kept {}", got.len(), want.len()));
        }
        Ok(())
    })
}

/// C3k2 with plain bottleneck units is C2f: same weights, same bits out.
pub fn c3k2_matches_c2f(seed: u64, cases: usize, miswire: bool) -> PropertyResult {
    run("C3k2(c3k=false) == C2f", cases, |i| {
        let mut r = rng(seed, i);
        let c_in = r.gen_range(1..=8);
        let c_out = 2 * r.gen_range(1..=8);
        let n = r.gen_range(1..=3);
        let shortcut = r.gen_bool(0.5);
        let mut c3k2 = C3k2::new(c_in, c_out, n, false, 0.5, shortcut).map_err(|e| e.to_string())?;
        init_random_full(&mut c3k2, &mut r);
        let mut c2f = C2f::new(c_in, c_out, n, shortcut, 0.5).map_err(|e| e.to_string())?;
        copy_params(&c3k2, &mut c2f).map_err(|e| e.to_string())?;
        if miswire {
            c3k2.split = SplitOrder::Swapped;
        }
        let x = Tensor4::random_uniform(
            [r.gen_range(1..=2), c_in, r.gen_range(1..=8), r.gen_range(1..=8)],
            -2.0,
            2.0,
            &mut r,
        );
        let a = c3k2.forward(&mut Eager, &x).map_err(|e| e.to_string())?;
        let b = c2f.forward(&mut Eager, &x).map_err(|e| e.to_string())?;
        same(&a, &b)
    })
}

/// Chained 5×5 pools equal 9×9 and 13×13 pools, and SPPF equals SPP.
pub fn sppf_matches_spp(seed: u64, cases: usize) -> PropertyResult {
    run("SPPF == SPP", cases, |i| {
        let mut r = rng(seed, i);
        let c = r.gen_range(2..=6);
        let x = Tensor4::random_uniform(
            [r.gen_range(1..=2), c, r.gen_range(1..=20), r.gen_range(1..=20)],
            -3.0,
            3.0,
            &mut r,
        );
        let pool = |t: &Tensor4, k: usize| tensor::maxpool2d(t, k, 1, k / 2).map_err(|e| e.to_string());
        let p5 = pool(&x, 5)?;
        let p55 = pool(&p5, 5)?;
        same(&p55, &pool(&x, 9)?).map_err(|e| format!("pool5∘pool5 vs pool9, {e}"))?;
        same(&pool(&p55, 5)?, &pool(&x, 13)?).map_err(|e| format!("pool5³ vs pool13, {e}"))?;

        let mut fast = Sppf::new(c, r.gen_range(1..=6), 5).map_err(|e| e.to_string())?;
        init_random_full(&mut fast, &mut r);
        let a = fast.forward(&mut Eager, &x).map_err(|e| e.to_string())?;
        let b = Spp::from_fast(&fast)
            .forward(&mut Eager, &x)
            .map_err(|e| e.to_string())?;
        same(&a, &b)
    })
}

/// Closed-form counts against tensor enumeration for every shipped config
/// and variant.
pub fn param_formula_matches_enumeration() -> PropertyResult {
    let mut cases = Vec::new();
    for (name, text) in BUILTIN_CONFIGS {
        if let Ok(spec) = parse_config(text) {
            for variant in spec.scales.keys() {
                cases.push((name, text, variant.clone()));
            }
        }
    }
    run("param formula == enumeration", cases.len(), |i| {
        let (name, text, variant) = &cases[i];
        let spec = parse_config(text).map_err(|e| format!("{name}: {e}"))?;
        let scaled = apply_scale(&spec, variant).map_err(|e| e.to_string())?;
        let m = build_model(name, &scaled, 0).map_err(|e| e.to_string())?;
        count_params(&m)
            .map(|_| ())
            .map_err(|e| format!("{name}@{variant}: {e}"))
    })
}

pub fn run_selftest(seed: u64, opts: SelftestOptions) -> Vec<PropertyResult> {
    vec![
        conv2d_matches_oracle(seed, KERNEL_CASES),
        maxpool_matches_oracle(seed, KERNEL_CASES),
        matmul_matches_oracle(seed, KERNEL_CASES),
        softmax_matches_oracle(seed, KERNEL_CASES),
        nms_matches_oracle(seed, KERNEL_CASES),
        c3k2_matches_c2f(seed, C3K2_CASES, opts.miswire_c3k2),
        sppf_matches_spp(seed, SPP_CASES),
        param_formula_matches_enumeration(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_oracles_pass() {
        for p in [
            conv2d_matches_oracle(0, KERNEL_CASES),
            maxpool_matches_oracle(0, KERNEL_CASES),
            matmul_matches_oracle(0, KERNEL_CASES),
            softmax_matches_oracle(0, KERNEL_CASES),
            nms_matches_oracle(0, KERNEL_CASES),
            sppf_matches_spp(0, SPP_CASES),
        ] {
            assert!(p.passed(), "{}: {:?}", p.name, p.failure);
        }
    }

    #[test]
    fn miswired_c3k2_is_caught() {
        assert!(c3k2_matches_c2f(0, C3K2_CASES, false).passed());
        let bad = c3k2_matches_c2f(0, C3K2_CASES, true);
        assert!(!bad.passed());
        assert!(bad.failure.unwrap().starts_with("case 0"));
    }
}
