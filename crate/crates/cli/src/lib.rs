//! `yk` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid invocation or input, 2 runtime failure
//! (I/O, a failed check, a numeric fault during the forward pass).

pub mod io;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use yk_core::analysis::{self, model_json, totals};
use yk_core::checks::{run_gradcheck, run_selftest, SelftestOptions, GRADCHECK_TOLERANCE};
use yk_core::model::{build_from_text, builtin_config, load_weights, save_weights, Model, RawPredictions, Task};
use yk_core::postprocess::{decode, letterbox, nms, unletterbox};
use yk_core::tensor::{softmax_lastdim, AdjointFault, OpKind};

#[derive(Debug, Parser)]
#[command(
    name = "yk",
    version,
    about = "YOLO11-family CPU inference and architecture analysis"
)]
struct Cli {
    /// Write results to this file instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Config file path or shipped config name (yolo11-detect, yolov8-ref, yolo11-cls).
    #[arg(long)]
    config: String,
    #[arg(long, default_value = "n")]
    variant: String,
    /// Seed for weight initialization when no weights file is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weights file to load instead of seeded initialization.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Layer table with output shapes and parameter counts.
    Summary {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-layer and total trainable parameters.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long)]
        json: bool,
    },
    /// Per-layer and total multiply-accumulates.
    Flops {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long)]
        json: bool,
    },
    /// Compare two models; ratios are A / B.
    Compare {
        #[arg(long)]
        config_a: String,
        #[arg(long, default_value = "n")]
        variant_a: String,
        #[arg(long)]
        config_b: String,
        #[arg(long, default_value = "n")]
        variant_b: String,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        /// Also time both models with this many iterations.
        #[arg(long)]
        bench_iters: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Detect (or classify) one image; prints one JSON object per line.
    Infer {
        #[command(flatten)]
        model: ModelArgs,
        /// Binary PPM (P6) or YTEN raw tensor file.
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, default_value_t = 0.25)]
        conf: f64,
        #[arg(long, default_value_t = 0.45)]
        iou: f64,
        /// Also write the weights used to this file.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Wall-clock forward latency.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 640)]
        imgsz: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference validation of every op and block backward rule.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Kernel and block equivalence checks against brute-force references.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true)]
        miswire_c3k2: bool,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Runtime(m) => m,
        }
    }
}

type Outcome = Result<(), Failure>;

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Parses `YK_THREADS`; `None` means use every core.
fn thread_cap() -> Result<Option<usize>, Failure> {
    match std::env::var("YK_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(invalid(format!("YK_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

/// Runs with the process streams.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

/// Runs with explicit output and diagnostic streams. `argv[0]` is the program name.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = thread_cap().and_then(|cap| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cap.unwrap_or(0))
            .build()
            .map_err(runtime)?;
        let mut buf = Vec::new();
        // Reports are emitted even when a check fails.
        let outcome = pool.install(|| dispatch(cli.command, &mut buf));
        match &cli.out {
            Some(path) => std::fs::write(path, &buf).map_err(|e| runtime(format!("{}: {e}", path.display())))?,
            None => match out.write_all(&buf).and_then(|()| out.flush()) {
                // A closed reader (`yk ... | head`) is not a failure.
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(runtime(e)),
                _ => {}
            },
        }
        outcome
    });
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message());
            f.code()
        }
    }
}

fn model_name(config: &str) -> String {
    Path::new(config)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| config.to_string())
}

fn config_text(config: &str) -> Result<String, Failure> {
    let path = Path::new(config);
    if path.is_file() {
        return std::fs::read_to_string(path).map_err(|e| runtime(format!("{config}: {e}")));
    }
    builtin_config(config)
        .map(str::to_string)
        .ok_or_else(|| runtime(format!("{config}: no such file or shipped config")))
}

fn load_model(config: &str, variant: &str, seed: u64, weights: Option<&Path>) -> Result<Model, Failure> {
    let text = config_text(config)?;
    let mut m =
        build_from_text(&model_name(config), &text, variant, seed).map_err(|e| invalid(format!("{config}: {e}")))?;
    if let Some(path) = weights {
        let bytes = std::fs::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        load_weights(&mut m, &bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(m)
}

fn model_from(a: &ModelArgs) -> Result<Model, Failure> {
    load_model(&a.config, &a.variant, a.seed, a.weights.as_deref())
}

fn check_imgsz(m: &Model, imgsz: usize) -> Outcome {
    if imgsz == 0 || (m.task == Task::Detect && !imgsz.is_multiple_of(m.max_stride())) {
        return Err(invalid(format!(
            "--imgsz {imgsz} must be a positive multiple of {}",
            m.max_stride()
        )));
    }
    Ok(())
}

fn json_line(out: &mut Vec<u8>, v: &impl Serialize) -> Outcome {
    serde_json::to_writer(&mut *out, v).map_err(runtime)?;
    out.push(b'\n');
    Ok(())
}

#[derive(Serialize)]
struct DetectionRecord {
    class_id: usize,
    score: f32,
    #[serde(rename = "box")]
    bbox: [f32; 4],
}

#[derive(Serialize)]
struct ClassRecord {
    class_id: usize,
    score: f32,
}

/// Classes reported per image for classifier models.
const TOP_K: usize = 5;

fn dispatch(cmd: Command, out: &mut Vec<u8>) -> Outcome {
    match cmd {
        Command::Summary { model } => {
            let m = model_from(&model)?;
            out.extend(analysis::summary(&m).map_err(runtime)?.into_bytes());
        }
        Command::Params { model, imgsz, json } => {
            let m = model_from(&model)?;
            check_imgsz(&m, imgsz)?;
            if json {
                let stats = analysis::layer_stats(&m, imgsz, imgsz).map_err(runtime)?;
                let t = totals(&m, imgsz, imgsz).map_err(runtime)?;
                json_line(out, &model_json(&t, &stats))?;
            } else {
                let report = analysis::count_params(&m).map_err(runtime)?;
                for (i, module, p) in &report.layers {
                    writeln!(out, "{i:>3}  {module:<9} {p:>12}").map_err(runtime)?;
                }
                writeln!(out, "total params: {}", report.total).map_err(runtime)?;
            }
        }
        Command::Flops { model, imgsz, json } => {
            let m = model_from(&model)?;
            check_imgsz(&m, imgsz)?;
            if json {
                let stats = analysis::layer_stats(&m, imgsz, imgsz).map_err(runtime)?;
                let t = totals(&m, imgsz, imgsz).map_err(runtime)?;
                json_line(out, &model_json(&t, &stats))?;
            } else {
                let r = analysis::estimate_macs(&m, imgsz, imgsz).map_err(runtime)?;
                writeln!(out, "idx  module            MACs   elementwise").map_err(runtime)?;
                for (node, (macs, ew, _)) in m.nodes.iter().zip(&r.layers) {
                    writeln!(out, "{:>3}  {:<9} {macs:>14} {ew:>13}", node.index, node.module).map_err(runtime)?;
                }
                writeln!(
                    out,
                    "total MACs: {} ({:.2} GFLOPs) at {imgsz}x{imgsz}",
                    r.total_macs,
                    r.flops() as f64 / 1e9
                )
                .map_err(runtime)?;
            }
        }
        Command::Compare {
            config_a,
            variant_a,
            config_b,
            variant_b,
            imgsz,
            bench_iters,
            json,
        } => {
            let a = load_model(&config_a, &variant_a, 0, None)?;
            let b = load_model(&config_b, &variant_b, 0, None)?;
            check_imgsz(&a, imgsz)?;
            check_imgsz(&b, imgsz)?;
            let mut report = analysis::compare(&a, &b, imgsz, imgsz).map_err(runtime)?;
            if let Some(iters) = bench_iters {
                if iters == 0 {
                    return Err(invalid("--bench-iters must be at least 1"));
                }
                let ra = analysis::bench_forward(&a, imgsz, imgsz, iters, 1).map_err(runtime)?;
                let rb = analysis::bench_forward(&b, imgsz, imgsz, iters, 1).map_err(runtime)?;
                report.latency_ms = Some((ra.median_ms, rb.median_ms));
            }
            if json {
                let stats = analysis::layer_stats(&a, imgsz, imgsz).map_err(runtime)?;
                json_line(out, &report.to_json(&stats))?;
            } else {
                out.extend(report.to_text().into_bytes());
            }
        }
        Command::Infer {
            model,
            image,
            imgsz,
            conf,
            iou,
            save_weights: save_to,
        } => {
            if !(0.0..=1.0).contains(&conf) || !(0.0..=1.0).contains(&iou) {
                return Err(invalid("--conf and --iou must lie in [0, 1]"));
            }
            let m = model_from(&model)?;
            check_imgsz(&m, imgsz)?;
            let img = io::load_image(&image).map_err(runtime)?;
            let (x, t) = letterbox(&img, imgsz, imgsz).map_err(runtime)?;
            let preds = m.forward(&x).map_err(runtime)?;
            match &preds {
                RawPredictions::Detect { .. } => {
                    let dets = decode(&preds, conf).map_err(runtime)?;
                    let kept = nms(&dets, iou).map_err(runtime)?;
                    for d in unletterbox(&kept, &t) {
                        json_line(
                            out,
                            &DetectionRecord {
                                class_id: d.class_id,
                                score: d.score,
                                bbox: d.bbox,
                            },
                        )?;
                    }
                }
                RawPredictions::Classify { logits } => {
                    let nc = logits.c();
                    let probs =
                        softmax_lastdim(&logits.clone().reshape([1, 1, 1, nc]).map_err(runtime)?).map_err(runtime)?;
                    let mut order: Vec<usize> = (0..nc).collect();
                    order.sort_by(|&i, &j| probs.data()[j].total_cmp(&probs.data()[i]).then(i.cmp(&j)));
                    for &c in order.iter().take(TOP_K) {
                        json_line(
                            out,
                            &ClassRecord {
                                class_id: c,
                                score: probs.data()[c],
                            },
                        )?;
                    }
                }
            }
            if let Some(path) = save_to {
                std::fs::write(&path, save_weights(&m)).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            }
        }
        Command::Bench {
            model,
            imgsz,
            iters,
            warmup,
            json,
        } => {
            if iters == 0 {
                return Err(invalid("--iters must be at least 1"));
            }
            let m = model_from(&model)?;
            check_imgsz(&m, imgsz)?;
            let r = analysis::bench_forward(&m, imgsz, imgsz, iters, warmup).map_err(runtime)?;
            if json {
                json_line(out, &r)?;
            } else {
                writeln!(
                    out,
                    "{}@{} {imgsz}x{imgsz} iters={} warmup={} min_ms={:.3} median_ms={:.3} mean_ms={:.3}",
                    m.name, m.variant, r.iters, r.warmup, r.min_ms, r.median_ms, r.mean_ms
                )
                .map_err(runtime)?;
            }
        }
        Command::Gradcheck { seed, corrupt_adjoint } => {
            let fault = corrupt_adjoint.then_some(AdjointFault {
                kind: OpKind::Silu,
                factor: 1.5,
            });
            let items = run_gradcheck(seed, fault).map_err(runtime)?;
            let mut failed = 0;
            for it in &items {
                let ok = it.max_rel_error < GRADCHECK_TOLERANCE;
                failed += usize::from(!ok);
                writeln!(
                    out,
                    "{:<24} {:.3e} {}",
                    it.name,
                    it.max_rel_error,
                    if ok { "PASS" } else { "FAIL" }
                )
                .map_err(runtime)?;
            }
            if failed > 0 {
                return Err(runtime(format!(
                    "{failed} of {} items exceed relative error {GRADCHECK_TOLERANCE:e}",
                    items.len()
                )));
            }
        }
        Command::Selftest { seed, miswire_c3k2 } => {
            let results = run_selftest(seed, SelftestOptions { miswire_c3k2 });
            let mut failed = 0;
            for r in &results {
                failed += usize::from(!r.passed());
                match &r.failure {
                    None => writeln!(out, "PASS {} ({} cases)", r.name, r.cases),
                    Some(f) => writeln!(out, "FAIL {} ({} cases): {f}", r.name, r.cases),
                }
                .map_err(runtime)?;
            }
            if failed > 0 {
                return Err(runtime(format!("{failed} of {} properties failed", results.len())));
            }
        }
    }
    Ok(())
}
