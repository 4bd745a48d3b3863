//! Brute-force reference implementations. Slow on purpose: each one is the
//! textbook loop for its operation, written without the fast kernels.

use std::cmp::Ordering;

use rand::Rng;

use crate::postprocess::{iou, Detection};
use crate::tensor::Tensor4;

/// Direct convolution. Per output: input channels of the group in order, taps
/// row-major, padded taps skipped, bias added last.
pub fn conv2d(
    x: &Tensor4,
    weight: &Tensor4,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Tensor4 {
    let [n, c_in, h, w] = x.shape();
    let [c_out, cig, kh, kw] = weight.shape();
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let cog = c_out / groups;
    debug_assert_eq!(c_in, cig * groups);
    Tensor4::from_fn([n, c_out, oh, ow], |[b, co, oy, ox]| {
        let g = co / cog;
        let mut acc = 0f32;
        for ci in 0..cig {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let ix = (ox * stride + kx) as isize - padding as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    acc += weight.at([co, ci, ky, kx]) * x.at([b, g * cig + ci, iy as usize, ix as usize]);
                }
            }
        }
        acc + bias.map_or(0.0, |b| b[co])
    })
}

/// Max over the in-bounds part of each window.
pub fn maxpool2d(x: &Tensor4, k: usize, stride: usize, padding: usize) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    Tensor4::from_fn([n, c, oh, ow], |[b, ch, oy, ox]| {
        let mut m = f32::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - padding as isize;
                let ix = (ox * stride + kx) as isize - padding as isize;
                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                    m = m.max(x.at([b, ch, iy as usize, ix as usize]));
                }
            }
        }
        m
    })
}

/// Triple loop, summing over the shared axis in ascending order.
pub fn matmul(a: &Tensor4, b: &Tensor4) -> Tensor4 {
    let [n, c, r, k] = a.shape();
    let m = b.w();
    Tensor4::from_fn([n, c, r, m], |[bi, ci, i, j]| {
        let mut acc = 0f32;
        for t in 0..k {
            acc += a.at([bi, ci, i, t]) * b.at([bi, ci, t, j]);
        }
        acc
    })
}

/// Row softmax evaluated in `f64`.
pub fn softmax_lastdim(x: &Tensor4) -> Vec<f64> {
    let w = x.w();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks_exact(w) {
        let m = row.iter().map(|&v| v as f64).fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn better(a: &Detection, b: &Detection) -> bool {
    match b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal) {
        Ordering::Less => true,
        Ordering::Greater => false,
        Ordering::Equal => (a.class_id, a.bbox[0]) < (b.class_id, b.bbox[0]),
    }
}

/// Quadratic greedy suppression: take the best remaining box (score, then
/// class, then left edge) and drop same-class boxes overlapping it by at least
/// `thresh`.
pub fn nms(cands: &[Detection], thresh: f64) -> Vec<Detection> {
    let mut left = cands.to_vec();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut bi = 0;
        for i in 1..left.len() {
            if better(&left[i], &left[bi]) {
                bi = i;
            }
        }
        let best = left.remove(bi);
        left.retain(|d| d.class_id != best.class_id || (iou(d.bbox, best.bbox) as f64) < thresh);
        out.push(best);
    }
    out
}

/// Scattered boxes over three classes with coarse scores, so ties happen.
pub fn random_boxes<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..100.0f32);
            let y = rng.gen_range(0.0..100.0f32);
            Detection {
                class_id: rng.gen_range(0..3),
                score: rng.gen_range(1..20) as f32 / 20.0,
                bbox: [x, y, x + rng.gen_range(5.0..40.0f32), y + rng.gen_range(5.0..40.0f32)],
            }
        })
        .collect()
}
