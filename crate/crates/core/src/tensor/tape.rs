//! Reverse-mode differentiation over a recorded tape, in `f64`.
//!
//! This exists to validate the forward kernels and their composition into
//! blocks against central finite differences. It covers the op set the blocks
//! use and nothing else.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{invalid, mismatch, ConvParams, Result, Tensor4, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Primitive kinds, used to target fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv,
    BatchNorm,
    Silu,
    Add,
    Scale,
    MaxPool,
    Upsample,
    Concat,
    Slice,
    Reshape,
    Transpose,
    MatMul,
    Softmax,
    AvgPool,
    Sum,
    Dot,
}

/// Multiplies the adjoint flowing out of every op of `kind` by `factor`.
/// Used to prove that gradient checks notice a wrong backward rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdjointFault {
    pub kind: OpKind,
    pub factor: f64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        p: ConvParams,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Silu {
        x: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Upsample {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Slice {
        x: usize,
        start: usize,
    },
    Reshape {
        x: usize,
    },
    Transpose {
        x: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Softmax {
        x: usize,
    },
    AvgPool {
        x: usize,
    },
    Sum {
        x: usize,
    },
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv { .. } => OpKind::Conv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Silu { .. } => OpKind::Silu,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::Dot { .. } => OpKind::Dot,
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: [usize; 4],
    value: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive ops with the values needed to replay adjoints.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of a scalar output with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Result<&[f64]> {
        if v.tape != self.tape {
            return Err(TensorError::ForeignVar);
        }
        Ok(&self.grads[v.idx])
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: AdjointFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.idx < self.nodes.len() {
            Ok(v.idx)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn push(&mut self, shape: [usize; 4], value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "tape" });
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    pub fn shape(&self, v: Var) -> Result<[usize; 4]> {
        Ok(self.nodes[self.idx(v)?].shape)
    }

    pub fn value(&self, v: Var) -> Result<&[f64]> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Value rounded back to an `f32` tensor.
    pub fn to_tensor(&self, v: Var) -> Result<Tensor4> {
        let n = &self.nodes[self.idx(v)?];
        Tensor4::new(n.shape, n.value.iter().map(|&x| x as f32).collect())
    }

    pub fn leaf(&mut self, shape: [usize; 4], value: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(mismatch("leaf", format!("shape {shape:?} vs {} values", value.len())));
        }
        self.push(shape, value, Op::Leaf)
    }

    pub fn input(&mut self, t: &Tensor4) -> Result<Var> {
        self.leaf(t.shape(), t.data().iter().map(|&x| x as f64).collect())
    }

    /// Vector leaf laid out as `(1, len, 1, 1)`.
    pub fn vector(&mut self, v: &[f32]) -> Result<Var> {
        self.leaf([1, v.len(), 1, 1], v.iter().map(|&x| x as f64).collect())
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let [n, c_in, h, wd] = self.nodes[xi].shape;
        let [c_out, cig, kh, kw] = self.nodes[wi].shape;
        let g = p.groups;
        if g == 0 || c_in % g != 0 || c_out % g != 0 || c_in / g != cig || (kh, kw) != p.kernel {
            return Err(mismatch(
                "tape.conv2d",
                format!("x {:?} w {:?} {p:?}", self.nodes[xi].shape, self.nodes[wi].shape),
            ));
        }
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != c_out {
                return Err(mismatch("tape.conv2d", "bias length"));
            }
        }
        let (oh, ow) = p
            .output_hw(h, wd)
            .ok_or(TensorError::ZeroSizedOutput { op: "tape.conv2d" })?;
        let co_g = c_out / g;
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let mut out = vec![0f64; n * c_out * oh * ow];
        for b in 0..n {
            for co in 0..c_out {
                let gi = co / co_g;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0f64;
                        for ci in 0..cig {
                            let cin = gi * cig + ci;
                            for ky in 0..kh {
                                let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += wv[((co * cig + ci) * kh + ky) * kw + kx]
                                        * xv[((b * c_in + cin) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        if let Some(bi) = bi {
                            acc += self.nodes[bi].value[co];
                        }
                        out[((b * c_out + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.push([n, c_out, oh, ow], out, Op::Conv { x: xi, w: wi, b: bi, p })
    }

    /// `gamma` and `beta` are vector vars of length `c`; running stats are constants.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f32], var: &[f32], eps: f32) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let [n, c, h, w] = self.nodes[xi].shape;
        if self.nodes[gi].value.len() != c || self.nodes[bi].value.len() != c || mean.len() != c || var.len() != c {
            return Err(mismatch("tape.batchnorm", "parameter lengths"));
        }
        if var.iter().any(|&v| v < 0.0) {
            return Err(invalid("tape.batchnorm", "negative running variance"));
        }
        let mean: Vec<f64> = mean.iter().map(|&m| m as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v as f64 + eps as f64).sqrt()).collect();
        let plane = h * w;
        let mut out = self.nodes[xi].value.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = self.nodes[gi].value[ch] * (*v - mean[ch]) * inv_std[ch] + self.nodes[bi].value[ch];
        }
        self.push(
            [n, c, h, w],
            out,
            Op::BatchNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                mean,
                inv_std,
            },
        )
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.iter().map(|&v| v * sigmoid(v)).collect();
        self.push(self.nodes[xi].shape, out, Op::Silu { x: xi })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ai].shape != self.nodes[bi].shape {
            return Err(mismatch(
                "tape.add",
                format!("{:?} vs {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let out = self.nodes[ai]
            .value
            .iter()
            .zip(&self.nodes[bi].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(self.nodes[ai].shape, out, Op::Add { a: ai, b: bi })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let out = self.nodes[xi].value.iter().map(|&v| v * factor).collect();
        self.push(self.nodes[xi].shape, out, Op::Scale { x: xi, factor })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        if k == 0 || stride == 0 || padding >= k {
            return Err(invalid(
                "tape.maxpool2d",
                format!("k={k} stride={stride} pad={padding}"),
            ));
        }
        let [n, c, h, w] = self.nodes[xi].shape;
        let (oh, ow) = ConvParams::same(k, stride)
            .with_padding(padding)
            .output_hw(h, w)
            .ok_or(TensorError::ZeroSizedOutput { op: "tape.maxpool2d" })?;
        let xv = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for pl in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let o = (pl * h + iy as usize) * w + ix as usize;
                            if xv[o] > best {
                                best = xv[o];
                                at = o;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(at);
                }
            }
        }
        self.push([n, c, oh, ow], out, Op::MaxPool { x: xi, argmax })
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].shape;
        let xv = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(4 * xv.len());
        for pl in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.push(xv[(pl * h + y / 2) * w + xx / 2]);
                }
            }
        }
        self.push([n, c, 2 * h, 2 * w], out, Op::Upsample { x: xi })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = *idx.first().ok_or_else(|| invalid("tape.concat", "no parts"))?;
        let [n, _, h, w] = self.nodes[first].shape;
        let mut c = 0;
        for &i in &idx {
            let [pn, pc, ph, pw] = self.nodes[i].shape;
            if (pn, ph, pw) != (n, h, w) {
                return Err(mismatch("tape.concat", "spatial mismatch"));
            }
            c += pc;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for &i in &idx {
                let chunk = self.nodes[i].shape[1] * h * w;
                out.extend_from_slice(&self.nodes[i].value[b * chunk..(b + 1) * chunk]);
            }
        }
        self.push([n, c, h, w], out, Op::Concat { parts: idx })
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].shape;
        if len == 0 || start + len > c {
            return Err(mismatch("tape.slice_channels", format!("{start}+{len} of {c}")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let from = (b * c + start) * plane;
            out.extend_from_slice(&self.nodes[xi].value[from..from + len * plane]);
        }
        self.push([n, len, h, w], out, Op::Slice { x: xi, start })
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 4]) -> Result<Var> {
        let xi = self.idx(x)?;
        if shape.iter().product::<usize>() != self.nodes[xi].value.len() {
            return Err(mismatch(
                "tape.reshape",
                format!("{:?} -> {shape:?}", self.nodes[xi].shape),
            ));
        }
        let out = self.nodes[xi].value.clone();
        self.push(shape, out, Op::Reshape { x: xi })
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].shape;
        let xv = &self.nodes[xi].value;
        let mut out = Vec::with_capacity(xv.len());
        for pl in 0..n * c {
            for j in 0..w {
                for i in 0..h {
                    out.push(xv[(pl * h + i) * w + j]);
                }
            }
        }
        self.push([n, c, w, h], out, Op::Transpose { x: xi })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let [n, c, r, k] = self.nodes[ai].shape;
        let [bn, bc, bk, m] = self.nodes[bi].shape;
        if (n, c, k) != (bn, bc, bk) {
            return Err(mismatch(
                "tape.matmul",
                format!("{:?} · {:?}", self.nodes[ai].shape, self.nodes[bi].shape),
            ));
        }
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let mut out = vec![0f64; n * c * r * m];
        for pl in 0..n * c {
            for i in 0..r {
                for j in 0..m {
                    let mut s = 0f64;
                    for t in 0..k {
                        s += av[(pl * r + i) * k + t] * bv[(pl * k + t) * m + j];
                    }
                    out[(pl * r + i) * m + j] = s;
                }
            }
        }
        self.push([n, c, r, m], out, Op::MatMul { a: ai, b: bi })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].shape;
        let w = shape[3];
        let mut out = self.nodes[xi].value.clone();
        for row in out.chunks_exact_mut(w.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(shape, out, Op::Softmax { x: xi })
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let [n, c, h, w] = self.nodes[xi].shape;
        let out = self.nodes[xi]
            .value
            .chunks_exact(h * w)
            .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
            .collect();
        self.push([n, c, 1, 1], out, Op::AvgPool { x: xi })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.iter().sum();
        self.push([1, 1, 1, 1], vec![s], Op::Sum { x: xi })
    }

    /// Scalar `sum_i x_i * weights_i`; a random projection keeps gradients dense.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xi = self.idx(x)?;
        if weights.len() != self.nodes[xi].value.len() {
            return Err(mismatch("tape.dot", "weight count"));
        }
        let s = self.nodes[xi].value.iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push(
            [1, 1, 1, 1],
            vec![s],
            Op::Dot {
                x: xi,
                weights: weights.to_vec(),
            },
        )
    }

    /// Reverse sweep from a scalar `output`, visiting ops in strict reverse
    /// recording order.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        let out = self.idx(output)?;
        if self.nodes[out].value.len() != 1 {
            return Err(TensorError::NonScalarOutput(self.nodes[out].shape));
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[out][0] = 1.0;
        for i in (0..=out).rev() {
            let node = &self.nodes[i];
            let mut g = std::mem::take(&mut grads[i]);
            if let Some(f) = self.fault {
                if f.kind == node.op.kind() {
                    g.iter_mut().for_each(|v| *v *= f.factor);
                }
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = g;
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, p } => {
                let [n, c_in, h, wd] = self.nodes[*x].shape;
                let [c_out, cig, kh, kw] = self.nodes[*w].shape;
                let [_, _, oh, ow] = node.shape;
                let co_g = c_out / p.groups;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let mut gx = vec![0f64; xv.len()];
                let mut gw = vec![0f64; wv.len()];
                let mut gb = vec![0f64; c_out];
                for bt in 0..n {
                    for co in 0..c_out {
                        let gi = co / co_g;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = g[((bt * c_out + co) * oh + oy) * ow + ox];
                                gb[co] += go;
                                for ci in 0..cig {
                                    let cin = gi * cig + ci;
                                    for ky in 0..kh {
                                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xo = ((bt * c_in + cin) * h + iy as usize) * wd + ix as usize;
                                            let wo = ((co * cig + ci) * kh + ky) * kw + kx;
                                            gx[xo] += go * wv[wo];
                                            gw[wo] += go * xv[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[*x], &gx);
                accumulate(&mut grads[*w], &gw);
                if let Some(b) = b {
                    accumulate(&mut grads[*b], &gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let [_, c, h, w] = node.shape;
                let plane = h * w;
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*gamma].value;
                let mut gg = vec![0f64; c];
                let mut gbeta = vec![0f64; c];
                for (i, &go) in g.iter().enumerate() {
                    let ch = (i / plane) % c;
                    grads[*x][i] += go * gv[ch] * inv_std[ch];
                    gg[ch] += go * (xv[i] - mean[ch]) * inv_std[ch];
                    gbeta[ch] += go;
                }
                accumulate(&mut grads[*gamma], &gg);
                accumulate(&mut grads[*beta], &gbeta);
            }
            Op::Silu { x } => {
                for (i, &go) in g.iter().enumerate() {
                    let v = self.nodes[*x].value[i];
                    let s = sigmoid(v);
                    grads[*x][i] += go * (s + v * s * (1.0 - s));
                }
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[*a], g);
                accumulate(&mut grads[*b], g);
            }
            Op::Scale { x, factor } => {
                for (d, &go) in grads[*x].iter_mut().zip(g) {
                    *d += go * factor;
                }
            }
            Op::MaxPool { x, argmax } => {
                for (&at, &go) in argmax.iter().zip(g) {
                    grads[*x][at] += go;
                }
            }
            Op::Upsample { x } => {
                let [n, c, h2, w2] = node.shape;
                let (h, w) = (h2 / 2, w2 / 2);
                for pl in 0..n * c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            grads[*x][(pl * h + y / 2) * w + xx / 2] += g[(pl * h2 + y) * w2 + xx];
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let [n, c, h, w] = node.shape;
                let plane = h * w;
                for b in 0..n {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].shape[1];
                        let src = &g[(b * c + off) * plane..(b * c + off + pc) * plane];
                        for (d, &s) in grads[p][b * pc * plane..(b + 1) * pc * plane].iter_mut().zip(src) {
                            *d += s;
                        }
                        off += pc;
                    }
                }
            }
            Op::Slice { x, start } => {
                let [n, len, h, w] = node.shape;
                let c = self.nodes[*x].shape[1];
                let plane = h * w;
                for b in 0..n {
                    let dst = (b * c + start) * plane;
                    for (d, &s) in grads[*x][dst..dst + len * plane]
                        .iter_mut()
                        .zip(&g[b * len * plane..(b + 1) * len * plane])
                    {
                        *d += s;
                    }
                }
            }
            Op::Reshape { x } => accumulate(&mut grads[*x], g),
            Op::Transpose { x } => {
                // node is (n, c, w, h) of an (n, c, h, w) input
                let [n, c, w, h] = node.shape;
                for pl in 0..n * c {
                    for j in 0..w {
                        for i in 0..h {
                            grads[*x][(pl * h + i) * w + j] += g[(pl * w + j) * h + i];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let [n, c, r, k] = self.nodes[*a].shape;
                let m = self.nodes[*b].shape[3];
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let mut ga = vec![0f64; av.len()];
                let mut gb = vec![0f64; bv.len()];
                for pl in 0..n * c {
                    for i in 0..r {
                        for j in 0..m {
                            let go = g[(pl * r + i) * m + j];
                            for t in 0..k {
                                ga[(pl * r + i) * k + t] += go * bv[(pl * k + t) * m + j];
                                gb[(pl * k + t) * m + j] += go * av[(pl * r + i) * k + t];
                            }
                        }
                    }
                }
                accumulate(&mut grads[*a], &ga);
                accumulate(&mut grads[*b], &gb);
            }
            Op::Softmax { x } => {
                let w = node.shape[3];
                for (row, (y, go)) in node.value.chunks_exact(w).zip(g.chunks_exact(w)).enumerate() {
                    let dot: f64 = y.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        grads[*x][row * w + j] += y[j] * (go[j] - dot);
                    }
                }
            }
            Op::AvgPool { x } => {
                let [_, _, h, w] = self.nodes[*x].shape;
                let plane = h * w;
                for (i, d) in grads[*x].iter_mut().enumerate() {
                    *d += g[i / plane] / plane as f64;
                }
            }
            Op::Sum { x } => {
                for d in grads[*x].iter_mut() {
                    *d += g[0];
                }
            }
            Op::Dot { x, weights } => {
                for (d, &wt) in grads[*x].iter_mut().zip(weights) {
                    *d += g[0] * wt;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of the scalar `f` at `x`.
///
/// `f` records its computation on the tape it is given, starting from the
/// leaf holding `x`. Both routes run in `f64`. The error per element is
/// `|analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor4, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_with(f, x, h, None)
}

#[doc(hidden)]
pub fn finite_diff_check_with<F>(f: F, x: &Tensor4, h: f64, fault: Option<AdjointFault>) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(invalid("finite_diff_check", format!("step {h} must be positive")));
    }
    let base: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut tape = match fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let leaf = tape.leaf(x.shape(), base.clone())?;
    let out = f(&mut tape, leaf)?;
    let grads = tape.grad(out)?;
    let analytic = grads.wrt(leaf)?.to_vec();

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let leaf = t.leaf(x.shape(), values)?;
        let out = f(&mut t, leaf)?;
        let v = t.value(out)?;
        if v.len() != 1 {
            return Err(TensorError::NonScalarOutput(t.shape(out)?));
        }
        if !v[0].is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
            });
        }
        Ok(v[0])
    };

    let mut worst = 0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / numeric.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
