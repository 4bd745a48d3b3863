//! Letterboxing on the way in; decoding, suppression and un-letterboxing on
//! the way out.

use std::cmp::Ordering;

use thiserror::Error;

use crate::model::{RawPredictions, BOX_OBJ_CHANNELS};
use crate::tensor::Tensor4;

/// Gray used for letterbox padding.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Raw size logits are clamped here before `exp`, keeping boxes finite.
const MAX_LOG_SIZE: f64 = 16.0;

#[derive(Debug, Error, PartialEq)]
pub enum PostError {
    #[error("image has zero size: {0:?}")]
    ZeroSized([usize; 4]),
    #[error("expected a (1, 3, h, w) image, got {0:?}")]
    BadImage([usize; 4]),
    #[error("target {h}x{w} must be positive multiples of 32")]
    BadTarget { h: usize, w: usize },
    #[error("{what} must be in [0, 1], got {value}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("decode needs detection maps")]
    NotDetection,
}

pub type Result<T> = std::result::Result<T, PostError>;

/// Maps original-image pixels to letterboxed pixels: `x' = x · scale + pad_x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LetterboxTransform {
    pub scale: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub orig_w: usize,
    pub orig_h: usize,
    pub target_w: usize,
    pub target_h: usize,
}

impl LetterboxTransform {
    pub fn identity(w: usize, h: usize) -> Self {
        Self {
            scale: 1.0,
            pad_x: 0.0,
            pad_y: 0.0,
            orig_w: w,
            orig_h: h,
            target_w: w,
            target_h: h,
        }
    }

    pub fn forward_box(&self, b: [f32; 4]) -> [f32; 4] {
        let fx = |x: f32| (x as f64 * self.scale + self.pad_x) as f32;
        let fy = |y: f32| (y as f64 * self.scale + self.pad_y) as f32;
        [fx(b[0]), fy(b[1]), fx(b[2]), fy(b[3])]
    }

    /// Inverse of [`forward_box`](Self::forward_box), clamped to the original image.
    pub fn inverse_box(&self, b: [f32; 4]) -> [f32; 4] {
        let ix = |x: f32| ((x as f64 - self.pad_x) / self.scale).clamp(0.0, self.orig_w as f64) as f32;
        let iy = |y: f32| ((y as f64 - self.pad_y) / self.scale).clamp(0.0, self.orig_h as f64) as f32;
        [ix(b[0]), iy(b[1]), ix(b[2]), iy(b[3])]
    }
}

/// Aspect-preserving bilinear resize into a gray `target_h`×`target_w`
/// canvas, content centered.
pub fn letterbox(image: &Tensor4, target_h: usize, target_w: usize) -> Result<(Tensor4, LetterboxTransform)> {
    let [n, c, h, w] = image.shape();
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(PostError::ZeroSized(image.shape()));
    }
    if n != 1 || c != 3 {
        return Err(PostError::BadImage(image.shape()));
    }
    if target_h == 0 || target_w == 0 || !target_h.is_multiple_of(32) || !target_w.is_multiple_of(32) {
        return Err(PostError::BadTarget {
            h: target_h,
            w: target_w,
        });
    }
    let scale = (target_w as f64 / w as f64).min(target_h as f64 / h as f64);
    let new_w = ((w as f64 * scale).round() as usize).clamp(1, target_w);
    let new_h = ((h as f64 * scale).round() as usize).clamp(1, target_h);
    let pad_x = (target_w - new_w) / 2;
    let pad_y = (target_h - new_h) / 2;

    let mut out = Tensor4::full([1, 3, target_h, target_w], PAD_VALUE);
    let src = image.data();
    let sx = w as f64 / new_w as f64;
    let sy = h as f64 / new_h as f64;
    // Half-pixel centers: source coordinate of destination pixel d is (d + 0.5) · s − 0.5.
    let taps = |d: usize, s: f64, len: usize| {
        let pos = ((d as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..new_w).map(|x| taps(x, sx, w)).collect();
    let data = out.data_mut();
    for ch in 0..3 {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..new_h {
            let (y0, y1, fy) = taps(y, sy, h);
            let row = (ch * target_h + y + pad_y) * target_w + pad_x;
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let p = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                data[row + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    let t = LetterboxTransform {
        scale,
        pad_x: pad_x as f64,
        pad_y: pad_y as f64,
        orig_w: w,
        orig_h: h,
        target_w,
        target_h,
    };
    Ok((out, t))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub score: f32,
    /// `(x1, y1, x2, y2)`.
    pub bbox: [f32; 4],
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(PostError::OutOfRange { what, value })
    }
}

/// Candidates of the first image in the batch, in letterboxed pixels. Each
/// cell contributes at most one candidate, for its best class.
pub fn decode(preds: &RawPredictions, conf_thresh: f64) -> Result<Vec<Detection>> {
    check_unit("confidence threshold", conf_thresh)?;
    let RawPredictions::Detect { maps, strides } = preds else {
        return Err(PostError::NotDetection);
    };
    let mut out = Vec::new();
    for (map, &stride) in maps.iter().zip(strides) {
        let [_, c, h, w] = map.shape();
        let plane = h * w;
        let d = &map.data()[..c * plane];
        let at = |ch: usize, cell: usize| d[ch * plane + cell] as f64;
        let stride = stride as f64;
        for i in 0..h {
            for j in 0..w {
                let cell = i * w + j;
                let (mut best, mut best_logit) = (0, f64::NEG_INFINITY);
                for k in 0..c - BOX_OBJ_CHANNELS {
                    let v = at(BOX_OBJ_CHANNELS + k, cell);
                    if v > best_logit {
                        best = k;
                        best_logit = v;
                    }
                }
                let score = (sigmoid(at(4, cell)) * sigmoid(best_logit)) as f32;
                if (score as f64) < conf_thresh {
                    continue;
                }
                let cx = (j as f64 + sigmoid(at(0, cell))) * stride;
                let cy = (i as f64 + sigmoid(at(1, cell))) * stride;
                let bw = at(2, cell).min(MAX_LOG_SIZE).exp() * stride;
                let bh = at(3, cell).min(MAX_LOG_SIZE).exp() * stride;
                out.push(Detection {
                    class_id: best,
                    score,
                    bbox: [
                        (cx - bw / 2.0) as f32,
                        (cy - bh / 2.0) as f32,
                        (cx + bw / 2.0) as f32,
                        (cy + bh / 2.0) as f32,
                    ],
                });
            }
        }
    }
    Ok(out)
}

pub fn iou(a: [f32; 4], b: [f32; 4]) -> f32 {
    let area = |r: [f32; 4]| ((r[2] - r[0]).max(0.0) as f64) * ((r[3] - r[1]).max(0.0) as f64);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0) as f64;
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0) as f64;
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if inter <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union) as f32
    }
}

/// Score descending, then lower class, then lower `x1`.
pub fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then(a.bbox[0].total_cmp(&b.bbox[0]))
}

/// Greedy per-class suppression. Output is in rank order.
pub fn nms(cands: &[Detection], iou_thresh: f64) -> Result<Vec<Detection>> {
    check_unit("IoU threshold", iou_thresh)?;
    let mut order: Vec<&Detection> = cands.iter().collect();
    order.sort_by(|a, b| rank(a, b));
    let mut kept_by_class: Vec<Vec<[f32; 4]>> = Vec::new();
    let mut out = Vec::new();
    for d in order {
        if kept_by_class.len() <= d.class_id {
            kept_by_class.resize(d.class_id + 1, Vec::new());
        }
        let kept = &mut kept_by_class[d.class_id];
        if kept.iter().all(|&k| (iou(k, d.bbox) as f64) < iou_thresh) {
            kept.push(d.bbox);
            out.push(*d);
        }
    }
    Ok(out)
}

/// Maps letterboxed boxes back to original-image pixels.
pub fn unletterbox(dets: &[Detection], t: &LetterboxTransform) -> Vec<Detection> {
    dets.iter()
        .map(|d| Detection {
            bbox: t.inverse_box(d.bbox),
            ..*d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::oracles::{self, random_boxes};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_maps(nc: usize) -> RawPredictions {
        RawPredictions::Detect {
            maps: vec![Tensor4::zeros([1, 5 + nc, 4, 4]), Tensor4::zeros([1, 5 + nc, 2, 2])],
            strides: vec![8, 16],
        }
    }

    #[test]
    fn letterbox_examples() {
        let (img, t) = letterbox(&Tensor4::full([1, 3, 640, 640], 0.5), 640, 640).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 0.0));
        assert!(img.data().iter().all(|&v| v == 0.5));

        let (img, t) = letterbox(&Tensor4::full([1, 3, 320, 640], 0.5), 640, 640).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (1.0, 0.0, 160.0));
        assert_eq!(img.at([0, 1, 159, 10]), PAD_VALUE);
        assert_eq!(img.at([0, 1, 160, 10]), 0.5);
        assert_eq!(img.at([0, 1, 479, 10]), 0.5);
        assert_eq!(img.at([0, 1, 480, 10]), PAD_VALUE);

        let (_, t) = letterbox(&Tensor4::full([1, 3, 50, 100], 0.5), 640, 640).unwrap();
        assert_eq!((t.scale, t.pad_x, t.pad_y), (6.4, 0.0, 160.0));
    }

    #[test]
    fn letterbox_errors() {
        assert!(matches!(
            letterbox(&Tensor4::zeros([1, 3, 0, 4]), 64, 64),
            Err(PostError::ZeroSized(_))
        ));
        assert!(matches!(
            letterbox(&Tensor4::zeros([1, 3, 4, 4]), 64, 48),
            Err(PostError::BadTarget { .. })
        ));
        assert!(matches!(
            letterbox(&Tensor4::zeros([1, 1, 4, 4]), 64, 64),
            Err(PostError::BadImage(_))
        ));
    }

    #[test]
    fn bilinear_upscale_of_a_ramp_is_linear_inside() {
        // A horizontal ramp doubled in size stays a ramp away from the borders.
        let img = Tensor4::from_fn([1, 3, 16, 16], |[_, _, _, x]| x as f32);
        let (out, _) = letterbox(&img, 32, 32).unwrap();
        for x in 1..31 {
            let want = ((x as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, 15.0) as f32;
            assert!((out.at([0, 0, 7, x]) - want).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_closed_forms() {
        assert!(decode(&zero_maps(3), 0.6).unwrap().is_empty());
        let all = decode(&zero_maps(3), 0.25).unwrap();
        assert_eq!(all.len(), 20);
        assert!(all.iter().all(|d| d.score == 0.25 && d.class_id == 0));
        // Cell (1, 2) at stride 8: center (2.5, 1.5)·8, size 8.
        assert_eq!(all[6].bbox, [16.0, 8.0, 24.0, 16.0]);
        assert!(decode(&zero_maps(3), 1.5).is_err());
    }

    /// Per-cell brute force written against the documented parameterization.
    fn decode_oracle(maps: &[Tensor4], strides: &[usize], conf: f64) -> Vec<Detection> {
        let sig = |x: f32| 1.0 / (1.0 + (-(x as f64)).exp());
        let mut out = Vec::new();
        for (m, &s) in maps.iter().zip(strides) {
            let s = s as f64;
            for i in 0..m.h() {
                for j in 0..m.w() {
                    let v = |c: usize| m.at([0, c, i, j]);
                    let mut best = 0;
                    for k in 1..m.c() - 5 {
                        if v(5 + k) > v(5 + best) {
                            best = k;
                        }
                    }
                    let score = (sig(v(4)) * sig(v(5 + best))) as f32;
                    if score as f64 >= conf {
                        let (cx, cy) = ((j as f64 + sig(v(0))) * s, (i as f64 + sig(v(1))) * s);
                        let (w, h) = ((v(2) as f64).exp() * s, (v(3) as f64).exp() * s);
                        out.push((best, score, [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]));
                    }
                }
            }
        }
        out.into_iter()
            .map(|(class_id, score, b)| Detection {
                class_id,
                score,
                bbox: b.map(|v| v as f32),
            })
            .collect()
    }

    #[test]
    fn decode_matches_per_cell_oracle() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps = vec![
                Tensor4::random_uniform([1, 9, 6, 5], -3.0, 3.0, &mut rng),
                Tensor4::random_uniform([1, 9, 3, 3], -3.0, 3.0, &mut rng),
            ];
            let strides = vec![8, 16];
            let conf = rng.gen_range(0.05..0.6);
            let got = decode(
                &RawPredictions::Detect {
                    maps: maps.clone(),
                    strides: strides.clone(),
                },
                conf,
            )
            .unwrap();
            let want = decode_oracle(&maps, &strides, conf);
            assert_eq!(got.len(), want.len(), "seed {seed}");
            for (g, w) in got.iter().zip(&want) {
                assert_eq!((g.class_id, g.score), (w.class_id, w.score));
                for k in 0..4 {
                    assert!((g.bbox[k] - w.bbox[k]).abs() <= 1e-4 * w.bbox[k].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, [3.0, 3.0, 4.0, 4.0]), 0.0);
        assert!((iou(a, [1.0, 0.0, 3.0, 2.0]) - 1.0 / 3.0).abs() < 1e-7);
        assert_eq!(iou([1.0, 1.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn nms_examples() {
        let d = |score, class_id, x| Detection {
            class_id,
            score,
            bbox: [x, 0.0, x + 10.0, 10.0],
        };
        assert_eq!(nms(&[d(0.3, 0, 0.0)], 0.5).unwrap().len(), 1);
        let kept = nms(&[d(0.8, 0, 0.0), d(0.9, 0, 0.0)], 0.5).unwrap();
        assert_eq!(kept, vec![d(0.9, 0, 0.0)]);
        // Other classes are never suppressed.
        assert_eq!(nms(&[d(0.8, 1, 0.0), d(0.9, 0, 0.0)], 0.5).unwrap().len(), 2);
        // Ties resolve by class, then x1.
        let kept = nms(&[d(0.5, 2, 3.0), d(0.5, 1, 9.0), d(0.5, 1, 2.0)], 0.01).unwrap();
        assert_eq!(kept, vec![d(0.5, 1, 2.0), d(0.5, 2, 3.0)]);
    }

    #[test]
    fn nms_matches_quadratic_oracle() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes = random_boxes(&mut rng, 64);
            let t = rng.gen_range(0.1..0.9);
            assert_eq!(nms(&boxes, t).unwrap(), oracles::nms(&boxes, t), "seed {seed}");
        }
    }

    #[test]
    fn unletterbox_examples() {
        let d = Detection {
            class_id: 0,
            score: 0.5,
            bbox: [10.0, 170.0, 50.0, 200.0],
        };
        assert_eq!(unletterbox(&[d], &LetterboxTransform::identity(640, 640)), vec![d]);
        let t = LetterboxTransform {
            pad_y: 160.0,
            orig_h: 320,
            ..LetterboxTransform::identity(640, 640)
        };
        assert_eq!(unletterbox(&[d], &t)[0].bbox, [10.0, 10.0, 50.0, 40.0]);
        // Clamped to the image.
        let far = Detection {
            bbox: [-20.0, 100.0, 700.0, 600.0],
            ..d
        };
        assert_eq!(unletterbox(&[far], &t)[0].bbox, [0.0, 0.0, 640.0, 320.0]);
    }

    #[test]
    fn cell_center_boxes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let w = rng.gen_range(20..900);
            let h = rng.gen_range(20..900);
            let (_, t) = letterbox(&Tensor4::zeros([1, 3, h, w]), 640, 640).unwrap();
            let (x, y) = (rng.gen_range(0..w) as f32 + 0.5, rng.gen_range(0..h) as f32 + 0.5);
            let b = [x - 0.5, y - 0.5, x + 0.5, y + 0.5];
            let back = t.inverse_box(t.forward_box(b));
            for k in 0..4 {
                assert!((back[k] - b[k]).abs() <= 0.51);
            }
        }
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(
            a in (0f32..50.0, 0f32..50.0, 0.1f32..30.0, 0.1f32..30.0),
            b in (0f32..50.0, 0f32..50.0, 0.1f32..30.0, 0.1f32..30.0),
        ) {
            let ba = [a.0, a.1, a.0 + a.2, a.1 + a.3];
            let bb = [b.0, b.1, b.0 + b.2, b.1 + b.3];
            let v = iou(ba, bb);
            prop_assert_eq!(v, iou(bb, ba));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((iou(ba, ba) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn nms_output_properties(seed in 0u64..1000, n in 1usize..80, t in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let boxes = random_boxes(&mut rng, n);
            let kept = nms(&boxes, t).unwrap();
            prop_assert!(kept.iter().all(|k| boxes.contains(k)));
            prop_assert!(kept.windows(2).all(|w| w[0].score >= w[1].score));
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || (iou(a.bbox, b.bbox) as f64) < t);
                }
            }
        }

        #[test]
        fn round_trip_within_one_pixel(w in 16usize..1200, h in 16usize..1200, fx in 0f64..1.0, fy in 0f64..1.0) {
            let (_, t) = letterbox(&Tensor4::zeros([1, 3, h, w]), 640, 640).unwrap();
            prop_assume!(t.scale >= 0.5);
            let (x, y) = ((fx * (w - 1) as f64) as f32, (fy * (h - 1) as f64) as f32);
            let b = [x, y, x + 1.0, y + 1.0];
            let back = t.inverse_box(t.forward_box(b));
            for k in 0..4 {
                prop_assert!((back[k] - b[k]).abs() <= 1.0);
            }
        }
    }
}
