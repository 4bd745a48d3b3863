use yk_core::analysis::{compare, count_params, estimate_macs, summary};
use yk_core::model::{
    apply_scale, build_from_text, build_model, builtin_config, parse_config, ScaledModule, ScaledSpec, BUILTIN_CONFIGS,
    VARIANTS,
};

const SUMMARY_NANO: &str = include_str!("golden/summary_yolo11_detect_n.txt");

// Second implementation: re-derives every shape from the scaled spec and
// applies the MAC formulas directly, without building any layers.

fn conv(c1: usize, c2: usize, k: usize, g: usize, h: usize, w: usize) -> u64 {
    (k * k * (c1 / g) * c2 * h * w) as u64
}

fn out_hw(h: usize, k: usize, s: usize) -> usize {
    (h + 2 * (k / 2) - k) / s + 1
}

fn bottleneck(c: usize, h: usize, w: usize) -> u64 {
    2 * conv(c, c, 3, 1, h, w)
}

fn c3k(c: usize, h: usize, w: usize) -> u64 {
    let m = c / 2;
    2 * conv(c, m, 1, 1, h, w) + 2 * bottleneck(m, h, w) + conv(2 * m, c, 1, 1, h, w)
}

fn csp(c1: usize, c2: usize, n: usize, e: f64, h: usize, w: usize, unit: fn(usize, usize, usize) -> u64) -> u64 {
    let c = (c2 as f64 * e) as usize;
    conv(c1, 2 * c, 1, 1, h, w) + n as u64 * unit(c, h, w) + conv((2 + n) * c, c2, 1, 1, h, w)
}

fn psa(c: usize, h: usize, w: usize) -> u64 {
    let heads = (c / 64).max(1);
    let hd = c / heads;
    let kd = hd / 2;
    let t = (h * w) as u64;
    let attn = conv(c, c + 2 * kd * heads, 1, 1, h, w)
        + heads as u64 * (t * t * kd as u64 + t * t * hd as u64)
        + conv(c, c, 3, c, h, w)
        + conv(c, c, 1, 1, h, w);
    attn + conv(c, 2 * c, 1, 1, h, w) + conv(2 * c, c, 1, 1, h, w)
}

fn walker(spec: &ScaledSpec, h0: usize, w0: usize) -> u64 {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::new();
    let mut total = 0u64;
    for l in &spec.layers {
        let ins: Vec<(usize, usize, usize)> = if l.decl.sources.is_empty() {
            vec![(3, h0, w0)]
        } else {
            l.decl.sources.iter().map(|&s| shapes[s]).collect()
        };
        let (c1, h, w) = ins[0];
        let out = match l.module {
            ScaledModule::Conv { c_out, k, s, g } => {
                let (oh, ow) = (out_hw(h, k, s), out_hw(w, k, s));
                total += conv(c1, c_out, k, g, oh, ow);
                (c_out, oh, ow)
            }
            ScaledModule::C2f { c_out, n, e, .. } => {
                total += csp(c1, c_out, n, e, h, w, bottleneck);
                (c_out, h, w)
            }
            ScaledModule::C3k2 {
                c_out,
                n,
                c3k: use_c3k,
                e,
                ..
            } => {
                total += csp(c1, c_out, n, e, h, w, if use_c3k { c3k } else { bottleneck });
                (c_out, h, w)
            }
            ScaledModule::Sppf { c_out, .. } => {
                total += conv(c1, c1 / 2, 1, 1, h, w) + conv(4 * (c1 / 2), c_out, 1, 1, h, w);
                (c_out, h, w)
            }
            ScaledModule::C2psa { c, n, e } => {
                let m = (c as f64 * e) as usize;
                total += conv(c, 2 * m, 1, 1, h, w) + n as u64 * psa(m, h, w) + conv(2 * m, c, 1, 1, h, w);
                (c, h, w)
            }
            ScaledModule::Upsample => (c1, 2 * h, 2 * w),
            ScaledModule::Concat => (ins.iter().map(|s| s.0).sum(), h, w),
            ScaledModule::Detect { nc, dw } => {
                let cb = (ins[0].0 / 4).max(64);
                let cc = ins[0].0.max(nc.min(100));
                for &(c, h, w) in &ins {
                    total += conv(c, cb, 3, 1, h, w) + conv(cb, cb, 3, 1, h, w) + conv(cb, 5, 1, 1, h, w);
                    total += if dw {
                        conv(c, c, 3, c, h, w)
                            + conv(c, cc, 1, 1, h, w)
                            + conv(cc, cc, 3, cc, h, w)
                            + conv(cc, cc, 1, 1, h, w)
                    } else {
                        conv(c, cc, 3, 1, h, w) + conv(cc, cc, 3, 1, h, w)
                    };
                    total += conv(cc, nc, 1, 1, h, w);
                }
                (5 + nc, h, w)
            }
            ScaledModule::Classify { hidden, nc } => {
                total += conv(c1, hidden, 1, 1, h, w) + conv(hidden, nc, 1, 1, 1, 1);
                (nc, 1, 1)
            }
        };
        shapes.push(out);
    }
    total
}

fn scaled(name: &str, variant: &str) -> ScaledSpec {
    apply_scale(&parse_config(builtin_config(name).unwrap()).unwrap(), variant).unwrap()
}

#[test]
fn formula_matches_enumeration_for_every_shipped_config() {
    for (name, text) in BUILTIN_CONFIGS {
        let spec = parse_config(text).unwrap();
        for variant in spec.scales.keys() {
            let m = build_model(name, &apply_scale(&spec, variant).unwrap(), 0).unwrap();
            let report = count_params(&m).unwrap_or_else(|e| panic!("{name} {variant}: {e}"));
            assert_eq!(report.total, m.param_count(), "{name} {variant}");
        }
    }
}

#[test]
fn params_increase_with_variant() {
    for cfg in ["yolo11-detect", "yolov8-ref"] {
        let totals: Vec<usize> = VARIANTS
            .iter()
            .map(|v| {
                count_params(&build_model(cfg, &scaled(cfg, v), 0).unwrap())
                    .unwrap()
                    .total
            })
            .collect();
        assert!(totals.windows(2).all(|p| p[0] < p[1]), "{cfg}: {totals:?}");
    }
}

#[test]
fn macs_match_independent_walker() {
    for (cfg, variant) in [
        ("yolo11-detect", "n"),
        ("yolo11-detect", "m"),
        ("yolov8-ref", "n"),
        ("yolo11-cls", "n"),
    ] {
        let spec = scaled(cfg, variant);
        let m = build_model(cfg, &spec, 0).unwrap();
        let (h, w) = if cfg == "yolo11-cls" { (224, 224) } else { (640, 640) };
        assert_eq!(
            estimate_macs(&m, h, w).unwrap().total_macs,
            walker(&spec, h, w),
            "{cfg} {variant}"
        );
    }
}

#[test]
fn nano_macs_in_expected_range() {
    // Published nano detect cost is about 6.5 GFLOPs at 640.
    let m = build_model("yolo11-detect", &scaled("yolo11-detect", "n"), 0).unwrap();
    let gflops = estimate_macs(&m, 640, 640).unwrap().flops() as f64 / 1e9;
    assert!((5.0..9.0).contains(&gflops), "{gflops}");
}

#[test]
fn conv_macs_scale_with_area() {
    let text = "[meta]\ntask=detect\nnc=4\n[layers]\n\
        from=-1 module=Conv args=c=16,k=3,s=2\n\
        from=-1 module=Conv args=c=32,k=3,s=2\n\
        from=-1 module=C3k2 repeats=2 args=c=32,c3k=true\n\
        from=-1 module=Conv args=c=64,k=3,s=2\n\
        from=-1 module=Conv args=c=64,k=3,s=2\n\
        from=-1 module=SPPF args=c=64\n\
        from=-1 module=Conv args=c=64,k=3,s=2\n\
        from=3,5,6 module=Detect\n";
    let m = build_from_text("convs", text, "n", 0).unwrap();
    let small = estimate_macs(&m, 320, 320).unwrap();
    let big = estimate_macs(&m, 640, 640).unwrap();
    assert_eq!(big.total_macs, 4 * small.total_macs);
    for (a, b) in small.layers.iter().zip(&big.layers) {
        assert_eq!(b.0, 4 * a.0);
    }
}

#[test]
fn yolo11m_against_reference() {
    let a = build_model("yolo11-detect", &scaled("yolo11-detect", "m"), 0).unwrap();
    let b = build_model("yolov8-ref", &scaled("yolov8-ref", "m"), 0).unwrap();
    let r = compare(&a, &b, 640, 640).unwrap();
    assert!(
        (0.75..=0.81).contains(&r.comparison.param_ratio),
        "{}",
        r.comparison.param_ratio
    );
    assert!(r.comparison.macs_ratio < 1.0);
    let back = compare(&b, &a, 640, 640).unwrap();
    assert!((r.comparison.param_ratio * back.comparison.param_ratio - 1.0).abs() < 1e-12);

    let x = build_model("yolo11-detect", &scaled("yolo11-detect", "x"), 0).unwrap();
    let n = build_model("yolo11-detect", &scaled("yolo11-detect", "n"), 0).unwrap();
    assert!(compare(&n, &x, 640, 640).unwrap().comparison.param_ratio < 1.0);
}

#[test]
fn json_report_field_names() {
    let a = build_model("yolo11-detect", &scaled("yolo11-detect", "n"), 0).unwrap();
    let b = build_model("yolov8-ref", &scaled("yolov8-ref", "n"), 0).unwrap();
    let r = compare(&a, &b, 640, 640).unwrap();
    let stats = yk_core::analysis::layer_stats(&a, 640, 640).unwrap();
    let v = r.to_json(&stats);
    for key in ["name", "variant", "params", "macs"] {
        assert!(v["model"].get(key).is_some(), "{key}");
    }
    assert_eq!(v["per_layer"].as_array().unwrap().len(), a.nodes.len());
    assert!(v["comparison"]["param_ratio"].as_f64().unwrap() > 0.0);
    assert!(v["comparison"]["macs_ratio"].as_f64().unwrap() > 0.0);
    let layer = &v["per_layer"][0];
    for key in ["index", "name", "params", "macs", "output_shape"] {
        assert!(layer.get(key).is_some(), "{key}");
    }
}

#[test]
fn nano_summary_snapshot() {
    let m = build_model("yolo11-detect", &scaled("yolo11-detect", "n"), 0).unwrap();
    assert_eq!(summary(&m).unwrap(), SUMMARY_NANO);
}
