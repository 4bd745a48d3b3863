use rayon::prelude::*;

use super::gemm::{gemm, MatRef, MR};
use super::{invalid, mismatch, ConvParams, Result, Tensor4, TensorError};

/// Columns of the packed operand handled per pass.
const NB: usize = 256;
/// Reduction depth per pass.
const KC: usize = 256;
/// Below this many MACs a convolution stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 22;

/// 2-D convolution.
///
/// The reduction for each output element runs over input channels, and within
/// a channel over kernel taps in row-major order; the bias is added after the
/// sum. Padded taps contribute nothing.
pub fn conv2d(x: &Tensor4, weight: &Tensor4, bias: Option<&[f32]>, p: ConvParams) -> Result<Tensor4> {
    const OP: &str = "conv2d";
    let [n, c_in, h, w] = x.shape();
    let [c_out, c_in_g, kh, kw] = weight.shape();
    let g = p.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 {
        return Err(invalid(
            OP,
            format!("groups {g} must divide c_in {c_in} and c_out {c_out}"),
        ));
    }
    if c_in / g != c_in_g {
        return Err(mismatch(
            OP,
            format!("weight expects {c_in_g} channels per group, input gives {}", c_in / g),
        ));
    }
    if (kh, kw) != p.kernel {
        return Err(mismatch(
            OP,
            format!("weight kernel {kh}x{kw} vs params {:?}", p.kernel),
        ));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(mismatch(
                OP,
                format!("bias length {} vs {c_out} output channels", b.len()),
            ));
        }
    }
    let (oh, ow) = p.output_hw(h, w).ok_or(TensorError::ZeroSizedOutput { op: OP })?;
    if oh == 0 || ow == 0 || n == 0 || c_out == 0 {
        return Err(TensorError::ZeroSizedOutput { op: OP });
    }
    x.check_finite(OP)?;

    let mut out = vec![0f32; n * c_out * oh * ow];
    let geo = Geometry {
        c: c_in_g,
        h,
        w,
        kh,
        kw,
        stride: p.stride,
        pad: p.padding,
        oh,
        ow,
    };
    let co_g = c_out / g;
    let plane_in = c_in * h * w;
    let plane_out = c_out * oh * ow;
    for b in 0..n {
        for gi in 0..g {
            let xin = &x.data()[b * plane_in + gi * c_in_g * h * w..b * plane_in + (gi + 1) * c_in_g * h * w];
            let wg = &weight.data()[gi * co_g * c_in_g * kh * kw..(gi + 1) * co_g * c_in_g * kh * kw];
            let o = &mut out[b * plane_out + gi * co_g * oh * ow..b * plane_out + (gi + 1) * co_g * oh * ow];
            if co_g == 1 && c_in_g == 1 {
                direct_single(xin, wg, o, &geo);
            } else {
                conv_group_gemm(xin, wg, co_g, o, &geo);
            }
        }
    }
    if let Some(bias) = bias {
        let plane = oh * ow;
        for (row, &bv) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
            for v in row {
                *v += bv;
            }
        }
    }
    let t = Tensor4::new([n, c_out, oh, ow], out)?;
    t.check_finite(OP)?;
    Ok(t)
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// One input channel, one output channel (the depthwise case).
fn direct_single(x: &[f32], wt: &[f32], out: &mut [f32], g: &Geometry) {
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let mut acc = 0f32;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    acc += wt[ky * g.kw + kx] * x[iy as usize * g.w + ix as usize];
                }
            }
            out[oy * g.ow + ox] = acc;
        }
    }
}

/// im2col rows `[k0, k0 + kc)` and columns `[p0, p0 + nb)` into `panel` (`kc × nb`).
fn pack_columns(x: &[f32], g: &Geometry, k0: usize, kc: usize, p0: usize, nb: usize, panel: &mut [f32]) {
    let taps = g.kh * g.kw;
    for r in 0..kc {
        let k = k0 + r;
        let ci = k / taps;
        let ky = (k % taps) / g.kw;
        let kx = k % g.kw;
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        let dst = &mut panel[r * nb..(r + 1) * nb];
        let mut oy = p0 / g.ow;
        let mut ox = p0 % g.ow;
        for d in dst.iter_mut() {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
            *d = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                src[iy as usize * g.w + ix as usize]
            } else {
                0.0
            };
            ox += 1;
            if ox == g.ow {
                ox = 0;
                oy += 1;
            }
        }
    }
}

fn conv_group_gemm(x: &[f32], wt: &[f32], c_out: usize, out: &mut [f32], g: &Geometry) {
    let k_total = g.c * g.kh * g.kw;
    let p_total = g.oh * g.ow;
    let parallel = rayon::current_num_threads() > 1 && c_out * k_total * p_total >= PAR_THRESHOLD;
    let mut panel = vec![0f32; KC.min(k_total) * NB.min(p_total)];
    let mut p0 = 0;
    while p0 < p_total {
        let nb = NB.min(p_total - p0);
        let mut k0 = 0;
        while k0 < k_total {
            let kc = KC.min(k_total - k0);
            let b = if g.is_pointwise() {
                MatRef {
                    data: &x[k0 * p_total + p0..],
                    ld: p_total,
                }
            } else {
                pack_columns(x, g, k0, kc, p0, nb, &mut panel[..kc * nb]);
                MatRef {
                    data: &panel[..kc * nb],
                    ld: nb,
                }
            };
            let a = &wt[k0..];
            let accumulate = k0 > 0;
            if parallel {
                out.par_chunks_mut(MR * p_total).enumerate().for_each(|(blk, c_rows)| {
                    let rows = c_rows.len() / p_total;
                    let a = MatRef {
                        data: &a[blk * MR * k_total..],
                        ld: k_total,
                    };
                    gemm(rows, nb, kc, a, b, &mut c_rows[p0..], p_total, accumulate);
                });
            } else {
                let a = MatRef { data: a, ld: k_total };
                gemm(c_out, nb, kc, a, b, &mut out[p0..], p_total, accumulate);
            }
            k0 += kc;
        }
        p0 += nb;
    }
}

/// Inference-mode batch normalization, evaluated in `f64` per element.
pub fn batchnorm2d_infer(
    x: &Tensor4,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> Result<Tensor4> {
    const OP: &str = "batchnorm2d_infer";
    let [n, c, h, w] = x.shape();
    for (name, v) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", running_mean),
        ("running_var", running_var),
    ] {
        if v.len() != c {
            return Err(mismatch(OP, format!("{name} has {} entries for {c} channels", v.len())));
        }
    }
    if running_var.iter().any(|&v| v < 0.0) {
        return Err(invalid(OP, "negative running variance"));
    }
    let plane = h * w;
    let mut out = x.clone();
    for b in 0..n {
        for ch in 0..c {
            let scale = gamma[ch] as f64 / (running_var[ch] as f64 + eps as f64).sqrt();
            let mean = running_mean[ch] as f64;
            let shift = beta[ch] as f64;
            let start = (b * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = ((*v as f64 - mean) * scale + shift) as f32;
            }
        }
    }
    out.check_finite(OP)?;
    Ok(out)
}

/// Logistic function, branching on sign so `exp` never overflows.
pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

pub fn silu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = silu_scalar(*v);
    }
    out
}

/// Elementwise sum of equal-shaped tensors.
pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    if a.shape() != b.shape() {
        return Err(mismatch("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    out.check_finite("add")?;
    Ok(out)
}

pub fn scale(x: &Tensor4, factor: f32) -> Result<Tensor4> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= factor;
    }
    out.check_finite("scale")?;
    Ok(out)
}

/// Max pooling; padded cells behave as negative infinity.
pub fn maxpool2d(x: &Tensor4, k: usize, stride: usize, padding: usize) -> Result<Tensor4> {
    const OP: &str = "maxpool2d";
    if k == 0 || stride == 0 {
        return Err(invalid(OP, format!("degenerate window k={k} stride={stride}")));
    }
    if padding >= k {
        return Err(invalid(
            OP,
            format!("padding {padding} must be smaller than the window {k}"),
        ));
    }
    let [n, c, h, w] = x.shape();
    let geo = ConvParams::same(k, stride).with_padding(padding);
    let (oh, ow) = geo.output_hw(h, w).ok_or(TensorError::ZeroSizedOutput { op: OP })?;
    if oh == 0 || ow == 0 {
        return Err(TensorError::ZeroSizedOutput { op: OP });
    }
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let y0 = (oy * stride) as isize - padding as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..ow {
                let x0 = (ox * stride) as isize - padding as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                let mut m = f32::NEG_INFINITY;
                for iy in ys.clone() {
                    for &v in &plane[iy * w + xs.start..iy * w + xs.end] {
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor4::new([n, c, oh, ow], out)
}

pub fn upsample_nearest2x(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(n * c * 4 * h * w);
    for plane in x.data().chunks_exact(h * w) {
        for y in 0..2 * h {
            let row = &plane[(y / 2) * w..(y / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor4 {
        shape: [n, c, 2 * h, 2 * w],
        data: out,
    }
}

/// Concatenation along the channel axis, preserving part order.
pub fn concat_channels(parts: &[&Tensor4]) -> Result<Tensor4> {
    const OP: &str = "concat_channels";
    let first = parts.first().ok_or_else(|| invalid(OP, "no parts"))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        let [pn, _, ph, pw] = p.shape();
        if (pn, ph, pw) != (n, h, w) {
            return Err(mismatch(OP, format!("{:?} vs {:?}", first.shape(), p.shape())));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for p in parts {
            let chunk = p.c() * h * w;
            data.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    Tensor4::new([n, c, h, w], data)
}

/// Row softmax over the last axis with max subtraction.
pub fn softmax_lastdim(x: &Tensor4) -> Result<Tensor4> {
    let w = x.w();
    let mut out = x.clone();
    if w == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_exact_mut(w) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0f32;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out.check_finite("softmax_lastdim")?;
    Ok(out)
}

/// Batched product over the last two axes: `(n, c, r, k) · (n, c, k, m) -> (n, c, r, m)`.
/// Each element sums over `k` in ascending order.
pub fn matmul(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
    const OP: &str = "matmul";
    let [n, c, r, k] = a.shape();
    let [bn, bc, bk, m] = b.shape();
    if (n, c) != (bn, bc) || k != bk {
        return Err(mismatch(OP, format!("{:?} · {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![0f32; n * c * r * m];
    for i in 0..n * c {
        gemm(
            r,
            m,
            k,
            MatRef {
                data: &a.data()[i * r * k..(i + 1) * r * k],
                ld: k,
            },
            MatRef {
                data: &b.data()[i * k * m..(i + 1) * k * m],
                ld: m,
            },
            &mut out[i * r * m..(i + 1) * r * m],
            m,
            false,
        );
    }
    let t = Tensor4::new([n, c, r, m], out)?;
    t.check_finite(OP)?;
    Ok(t)
}

pub fn transpose_last2(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let mut out = Vec::with_capacity(x.len());
    for plane in x.data().chunks_exact(h * w) {
        for j in 0..w {
            for i in 0..h {
                out.push(plane[i * w + j]);
            }
        }
    }
    Tensor4 {
        shape: [n, c, w, h],
        data: out,
    }
}

/// Spatial mean per channel, `(n, c, h, w) -> (n, c, 1, 1)`.
pub fn global_avgpool(x: &Tensor4) -> Tensor4 {
    let [n, c, h, w] = x.shape();
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64) as f32)
        .collect();
    Tensor4 {
        shape: [n, c, 1, 1],
        data,
    }
}
