//! Parameter and MAC accounting, model comparison, summaries and latency.

mod counting;
mod formula;

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::blocks::Params;
use crate::model::{Model, ModelError, ScaledModule, Task, INPUT_CHANNELS};
use crate::tensor::Tensor4;

pub use counting::Counter;
pub use formula::{cbs as cbs_params, layer_params};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("layer {layer}: closed-form count {formula} disagrees with stored tensors {enumerated}")]
    ParamMismatch {
        layer: usize,
        formula: usize,
        enumerated: usize,
    },
    #[error("input {h}x{w} is not usable: {message}")]
    BadInput { h: usize, w: usize, message: String },
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerStats {
    pub index: usize,
    pub name: String,
    pub from: String,
    pub repeats: usize,
    pub args: String,
    pub params: usize,
    pub macs: u64,
    pub elementwise: u64,
    pub output_shape: Vec<[usize; 4]>,
}

/// Per-layer parameters with their totals.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    /// `(index, module, params)` per layer.
    pub layers: Vec<(usize, &'static str, usize)>,
    pub total: usize,
}

/// Counts trainable parameters twice, from the hyperparameter formulas and by
/// enumerating stored tensors, and fails unless both agree for every layer.
pub fn count_params(m: &Model) -> Result<ParamReport> {
    let mut layers = Vec::with_capacity(m.nodes.len());
    for node in &m.nodes {
        let formula = layer_params(&node.spec, &node.c_in);
        let enumerated = node.layer.param_count();
        if formula != enumerated {
            return Err(AnalysisError::ParamMismatch {
                layer: node.index,
                formula,
                enumerated,
            });
        }
        layers.push((node.index, node.module, formula));
    }
    let total = layers.iter().map(|l| l.2).sum();
    Ok(ParamReport { layers, total })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub h: usize,
    pub w: usize,
    /// `(macs, elementwise ops, output shapes)` per layer, batch 1.
    pub layers: Vec<(u64, u64, Vec<[usize; 4]>)>,
    pub total_macs: u64,
    pub total_elementwise: u64,
}

impl MacReport {
    pub fn flops(&self) -> u64 {
        2 * self.total_macs
    }
}

/// Walks the graph with the shape-only [`Counter`] backend.
pub fn estimate_macs(m: &Model, h: usize, w: usize) -> Result<MacReport> {
    if h == 0 || w == 0 || (m.task == Task::Detect && (!h.is_multiple_of(32) || !w.is_multiple_of(32))) {
        return Err(AnalysisError::BadInput {
            h,
            w,
            message: "detect inputs must be positive multiples of 32".into(),
        });
    }
    let mut shapes: Vec<[usize; 4]> = Vec::with_capacity(m.nodes.len());
    let mut layers = Vec::with_capacity(m.nodes.len());
    let input = [1, INPUT_CHANNELS, h, w];
    for node in &m.nodes {
        let ins: Vec<&[usize; 4]> = if node.sources.is_empty() {
            vec![&input]
        } else {
            node.sources.iter().map(|&s| &shapes[s]).collect()
        };
        let mut counter = Counter::default();
        let outs = node
            .layer
            .forward(&mut counter, &ins)
            .map_err(|source| ModelError::Layer {
                layer: node.index,
                source,
            })?;
        shapes.push(outs[0]);
        layers.push((counter.macs, counter.elementwise, outs));
    }
    Ok(MacReport {
        h,
        w,
        total_macs: layers.iter().map(|l| l.0).sum(),
        total_elementwise: layers.iter().map(|l| l.1).sum(),
        layers,
    })
}

pub fn layer_stats(m: &Model, h: usize, w: usize) -> Result<Vec<LayerStats>> {
    let params = count_params(m)?;
    let macs = estimate_macs(m, h, w)?;
    Ok(m.nodes
        .iter()
        .zip(params.layers)
        .zip(macs.layers)
        .map(|((node, (_, _, p)), (macs, elementwise, shapes))| LayerStats {
            index: node.index,
            from: node.from_text.clone(),
            name: node.module.to_string(),
            repeats: node.repeats,
            args: node.args_text.clone(),
            params: p,
            macs,
            elementwise,
            output_shape: shapes,
        })
        .collect())
}

fn shape_text(shapes: &[[usize; 4]]) -> String {
    shapes
        .iter()
        .map(|s| s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_table(header: &[&str], rows: &[Vec<String>], right_aligned: &[bool]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in widths.iter_mut().zip(r) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            if right_aligned[i] {
                let _ = write!(s, "{cell:>w$}", w = widths[i]);
            } else {
                let _ = write!(s, "{cell:<w$}", w = widths[i]);
            }
        }
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for r in rows {
        line(r);
    }
    out
}

/// Layer table at the reference input size: header, one row per layer, totals.
pub fn summary(m: &Model) -> Result<String> {
    let params = count_params(m)?;
    let mut rows: Vec<Vec<String>> = m
        .nodes
        .iter()
        .zip(&params.layers)
        .map(|(node, &(_, _, p))| {
            vec![
                node.index.to_string(),
                node.from_text.clone(),
                node.module.to_string(),
                node.repeats.to_string(),
                node.args_text.clone(),
                shape_text(&node.out_shapes),
                p.to_string(),
            ]
        })
        .collect();
    rows.push(vec![
        String::new(),
        String::new(),
        "total".into(),
        String::new(),
        String::new(),
        String::new(),
        params.total.to_string(),
    ]);
    Ok(render_table(
        &["idx", "from", "module", "n", "args", "output", "params"],
        &rows,
        &[true, false, false, true, false, false, true],
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelTotals {
    pub name: String,
    pub variant: String,
    pub params: usize,
    pub macs: u64,
}

/// Parameters of the three graph stages. The backbone runs up to the first
/// upsample, the head is the last layer, the neck is everything between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StageParams {
    pub backbone: usize,
    pub neck: usize,
    pub head: usize,
}

pub fn stage_params(m: &Model) -> Result<StageParams> {
    let report = count_params(m)?;
    let neck_start = m
        .nodes
        .iter()
        .position(|n| matches!(n.spec, ScaledModule::Upsample))
        .unwrap_or(m.nodes.len().saturating_sub(1));
    let head = m.nodes.len().saturating_sub(1);
    let mut s = StageParams {
        backbone: 0,
        neck: 0,
        head: 0,
    };
    for &(i, _, p) in &report.layers {
        if i == head {
            s.head += p;
        } else if i >= neck_start {
            s.neck += p;
        } else {
            s.backbone += p;
        }
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub param_ratio: f64,
    pub macs_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareReport {
    pub a: ModelTotals,
    pub b: ModelTotals,
    pub stages_a: StageParams,
    pub stages_b: StageParams,
    pub comparison: Comparison,
    /// Median latencies in milliseconds, when benchmarked.
    pub latency_ms: Option<(f64, f64)>,
}

pub fn totals(m: &Model, h: usize, w: usize) -> Result<ModelTotals> {
    Ok(ModelTotals {
        name: m.name.clone(),
        variant: m.variant.clone(),
        params: count_params(m)?.total,
        macs: estimate_macs(m, h, w)?.total_macs,
    })
}

/// Ratios are `a / b`.
pub fn compare(a: &Model, b: &Model, h: usize, w: usize) -> Result<CompareReport> {
    let ta = totals(a, h, w)?;
    let tb = totals(b, h, w)?;
    let comparison = Comparison {
        param_ratio: ta.params as f64 / tb.params as f64,
        macs_ratio: ta.macs as f64 / tb.macs as f64,
    };
    Ok(CompareReport {
        stages_a: stage_params(a)?,
        stages_b: stage_params(b)?,
        a: ta,
        b: tb,
        comparison,
        latency_ms: None,
    })
}

impl CompareReport {
    pub fn to_text(&self) -> String {
        let ratio = |x: f64, y: f64| {
            if y == 0.0 {
                "-".to_string()
            } else {
                format!("{:.4}", x / y)
            }
        };
        let delta = |x: usize, y: usize| format!("{:+}", x as i64 - y as i64);
        let label = |t: &ModelTotals| format!("{}@{}", t.name, t.variant);
        let mut rows = vec![
            vec![
                "params".into(),
                self.a.params.to_string(),
                self.b.params.to_string(),
                delta(self.a.params, self.b.params),
                format!("{:.4}", self.comparison.param_ratio),
            ],
            vec![
                "MACs".into(),
                self.a.macs.to_string(),
                self.b.macs.to_string(),
                format!("{:+}", self.a.macs as i128 - self.b.macs as i128),
                format!("{:.4}", self.comparison.macs_ratio),
            ],
        ];
        for (name, x, y) in [
            ("backbone params", self.stages_a.backbone, self.stages_b.backbone),
            ("neck params", self.stages_a.neck, self.stages_b.neck),
            ("head params", self.stages_a.head, self.stages_b.head),
        ] {
            rows.push(vec![
                name.into(),
                x.to_string(),
                y.to_string(),
                delta(x, y),
                ratio(x as f64, y as f64),
            ]);
        }
        if let Some((la, lb)) = self.latency_ms {
            rows.push(vec![
                "median ms".into(),
                format!("{la:.2}"),
                format!("{lb:.2}"),
                format!("{:+.2}", la - lb),
                ratio(la, lb),
            ]);
        }
        let mut out = render_table(
            &["", &label(&self.a), &label(&self.b), "delta", "ratio"],
            &rows,
            &[false, true, true, true, true],
        );
        let _ = writeln!(
            out,
            "param_ratio = {:.4} ({:.1}% fewer parameters)",
            self.comparison.param_ratio,
            100.0 * (1.0 - self.comparison.param_ratio)
        );
        out
    }

    /// `{model, per_layer, comparison, baseline}`.
    pub fn to_json(&self, per_layer: &[LayerStats]) -> serde_json::Value {
        let mut v = serde_json::json!({
            "model": self.a,
            "per_layer": per_layer,
            "comparison": self.comparison,
            "baseline": self.b,
            "stages": {"model": self.stages_a, "baseline": self.stages_b},
        });
        if let Some((la, lb)) = self.latency_ms {
            v["latency_ms"] = serde_json::json!({"model": la, "baseline": lb});
        }
        v
    }
}

/// `{model, per_layer}` for a single model.
pub fn model_json(totals: &ModelTotals, per_layer: &[LayerStats]) -> serde_json::Value {
    serde_json::json!({ "model": totals, "per_layer": per_layer })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub h: usize,
    pub w: usize,
    pub iters: usize,
    pub warmup: usize,
    pub samples_ms: Vec<f64>,
    pub min_ms: f64,
    pub median_ms: f64,
    pub mean_ms: f64,
}

impl BenchResult {
    pub fn from_samples(h: usize, w: usize, warmup: usize, samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median_ms = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Self {
            h,
            w,
            iters: n,
            warmup,
            min_ms: sorted[0],
            median_ms,
            mean_ms: sorted.iter().sum::<f64>() / n as f64,
            samples_ms,
        }
    }
}

/// Times `iters` forwards on a fixed seeded input after `warmup` untimed ones.
/// Run on an otherwise idle machine for meaningful numbers.
pub fn bench_forward(m: &Model, h: usize, w: usize, iters: usize, warmup: usize) -> Result<BenchResult> {
    if iters == 0 {
        return Err(AnalysisError::NoIterations);
    }
    let x = Tensor4::random_uniform([1, INPUT_CHANNELS, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for _ in 0..warmup {
        m.forward(&x)?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = m.forward(&x)?;
        samples.push(t.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    Ok(BenchResult::from_samples(h, w, warmup, samples))
}
