use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use yk_core::blocks::{ParamKind, Params};
use yk_core::model::{
    apply_scale, build_from_text, build_model, builtin_config, load_weights, parse_config, save_weights, Model,
    ModelError, RawPredictions, Task, VARIANTS,
};
use yk_core::tensor::{softmax_lastdim, Tensor4};

fn shipped(name: &str, variant: &str) -> Model {
    build_from_text(name, builtin_config(name).unwrap(), variant, 0).unwrap()
}

fn small_detect() -> Model {
    // Nano-sized graph with fewer classes, for fast forward passes.
    let text = builtin_config("yolo11-detect").unwrap().replace("nc = 80", "nc = 3");
    build_from_text("yolo11-detect", &text, "n", 7).unwrap()
}

#[test]
fn shipped_detect_config_layout() {
    let spec = parse_config(builtin_config("yolo11-detect.cfg").unwrap()).unwrap();
    assert_eq!(spec.layers.len(), 24);
    assert_eq!(spec.task, Task::Detect);
    assert_eq!(spec.scales.len(), 5);
    assert_eq!(spec.head().sources, vec![16, 19, 22]);
}

#[test]
fn medium_channel_table_matches_hand_applied_rule() {
    let spec = parse_config(builtin_config("yolo11-detect").unwrap()).unwrap();
    let scaled = apply_scale(&spec, "m").unwrap();
    let got: Vec<usize> = scaled.layers.iter().map(|l| l.c_out).collect();
    // Worked out by hand from min(c, 512) · 1.0 rounded to 8, concat sums and passthroughs.
    let want = [
        64, 128, 256, 256, 512, 512, 512, 512, 512, 512, 512, 512, 1024, 512, 512, 1024, 256, 256, 768, 512, 512, 1024,
        512, 85,
    ];
    assert_eq!(got, want);
    assert!(scaled.layers.iter().all(|l| l.decl.repeats == 1 || l.c_out % 8 == 0));
    for l in &scaled.layers {
        if let yk_core::model::ScaledModule::C3k2 { n, c3k, .. } = l.module {
            assert_eq!(n, 1);
            assert!(c3k, "medium forces C3k inner units");
        }
    }
}

#[test]
fn parameter_totals_match_independent_oracle() {
    // Produced by a separate script that applies the per-block formulas.
    let yolo11 = [2_707_231, 9_825_503, 20_103_167, 25_360_639, 56_948_991];
    let yolov8 = [3_145_679, 11_155_039, 25_891_119, 43_679_999, 68_215_295];
    for (i, v) in VARIANTS.iter().enumerate() {
        assert_eq!(shipped("yolo11-detect", v).param_count(), yolo11[i], "yolo11 {v}");
        assert_eq!(shipped("yolov8-ref", v).param_count(), yolov8[i], "yolov8 {v}");
    }
}

#[test]
fn params_strictly_increase_with_variant() {
    for cfg in ["yolo11-detect", "yolov8-ref", "yolo11-cls"] {
        let counts: Vec<usize> = VARIANTS.iter().map(|v| shipped(cfg, v).param_count()).collect();
        assert!(counts.windows(2).all(|w| w[0] < w[1]), "{cfg}: {counts:?}");
    }
}

#[test]
fn nano_head_inputs_follow_strides() {
    let m = shipped("yolo11-detect", "n");
    assert_eq!(m.strides, vec![8, 16, 32]);
    let c = |i: usize| m.nodes[i].out_shapes[0];
    assert_eq!(c(16), [1, 64, 80, 80]);
    assert_eq!(c(19), [1, 128, 40, 40]);
    assert_eq!(c(22), [1, 256, 20, 20]);
    assert_eq!(
        m.head().out_shapes,
        vec![[1, 85, 80, 80], [1, 85, 40, 40], [1, 85, 20, 20]]
    );
}

#[test]
fn build_is_deterministic_and_initializes_batchnorm_to_identity() {
    let a = shipped("yolo11-detect", "n");
    let b = shipped("yolo11-detect", "n");
    assert_eq!(save_weights(&a), save_weights(&b));
    let other = build_from_text("yolo11-detect", builtin_config("yolo11-detect").unwrap(), "n", 1).unwrap();
    assert_ne!(save_weights(&a), save_weights(&other));
    a.visit_params("", &mut |name, p| match p.kind {
        ParamKind::BnGamma => assert!(p.data.iter().all(|&v| v == 1.0), "{name}"),
        ParamKind::BnBeta => assert!(p.data.iter().all(|&v| v == 0.0), "{name}"),
        ParamKind::ConvWeight { fan_in } => {
            let bound = (1.0 / fan_in as f32).sqrt();
            assert!(p.data.iter().all(|v| v.abs() <= bound), "{name}");
        }
        _ => {}
    });
}

#[test]
fn observed_shapes_equal_precomputed_at_two_sizes() {
    let m = small_detect();
    for size in [320, 640] {
        let want = m.infer_shapes(size, size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(size as u64);
        let x = Tensor4::random_uniform([1, 3, size, size], 0.0, 1.0, &mut rng);
        let mut seen = Vec::new();
        let out = m
            .forward_observed(&x, |i, outs| {
                seen.push((i, outs.iter().map(|t| t.shape()).collect::<Vec<_>>()))
            })
            .unwrap();
        assert_eq!(seen.len(), want.len());
        for (i, shapes) in seen {
            assert_eq!(shapes, want[i], "layer {i} at {size}");
        }
        let RawPredictions::Detect { maps, strides } = out else {
            panic!()
        };
        assert_eq!(strides, vec![8, 16, 32]);
        let cells: usize = maps.iter().map(|t| t.h() * t.w()).sum();
        assert_eq!(cells, size * size / 64 + size * size / 256 + size * size / 1024);
        assert!(maps.iter().all(|t| t.c() == 8));
    }
}

#[test]
fn forward_rejects_bad_inputs() {
    let m = small_detect();
    assert!(matches!(
        m.forward(&Tensor4::zeros([1, 3, 100, 96])),
        Err(ModelError::Input(_))
    ));
    assert!(matches!(
        m.forward(&Tensor4::zeros([1, 4, 64, 64])),
        Err(ModelError::Input(_))
    ));
    let mut x = Tensor4::zeros([1, 3, 64, 64]);
    x.data_mut()[5] = f32::NAN;
    assert!(m.forward(&x).is_err());
}

#[test]
fn overflowing_activation_is_reported_with_layer_index() {
    let mut m = small_detect();
    if let yk_core::model::Layer::Conv(c) = &mut m.nodes[3].layer {
        c.bn.gamma.iter_mut().for_each(|g| *g = 1e30);
    }
    let x = Tensor4::full([1, 3, 64, 64], 0.5);
    match m.forward(&x) {
        Err(ModelError::NonFinite { layer }) => assert!(layer >= 3, "layer {layer}"),
        other => panic!("{other:?}"),
    }
}

fn digest(p: &RawPredictions) -> String {
    let mut h = Sha256::new();
    let maps = match p {
        RawPredictions::Detect { maps, .. } => maps.clone(),
        RawPredictions::Classify { logits } => vec![logits.clone()],
    };
    for t in maps {
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn nano_forward_golden_hash() {
    let m = shipped("yolo11-detect", "n");
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor4::random_uniform([1, 3, 128, 128], 0.0, 1.0, &mut rng);
    let a = m.forward(&x).unwrap();
    assert_eq!(a, m.forward(&x).unwrap());
    assert_eq!(digest(&a), GOLDEN_NANO_128);
}

// Recorded from the first verified run.
const GOLDEN_NANO_128: &str = "f8879802734e2bd2013081885c19a66786753a5a696dd3e19f9cc5ffb2400704";

#[test]
fn weights_round_trip_is_bit_exact() {
    let m = small_detect();
    let bytes = save_weights(&m);
    assert_eq!(&bytes[..4], b"YWTS");
    let mut other = build_from_text(
        "yolo11-detect",
        &builtin_config("yolo11-detect").unwrap().replace("nc = 80", "nc = 3"),
        "n",
        99,
    )
    .unwrap();
    let x = Tensor4::random_uniform([1, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    assert_ne!(m.forward(&x).unwrap(), other.forward(&x).unwrap());
    load_weights(&mut other, &bytes).unwrap();
    assert_eq!(save_weights(&other), bytes);
    assert_eq!(m.forward(&x).unwrap(), other.forward(&x).unwrap());
}

#[test]
fn weights_errors() {
    let m = small_detect();
    let bytes = save_weights(&m);
    let mut target = m.clone();

    let err = load_weights(&mut target, &bytes[..bytes.len() - 3]).unwrap_err();
    assert_eq!(err.to_string(), "unexpected end of data");
    assert_eq!(
        load_weights(&mut target, &bytes[..10]).unwrap_err().to_string(),
        "unexpected end of data"
    );

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(load_weights(&mut target, &bad), Err(ModelError::BadMagic)));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(
        load_weights(&mut target, &bad),
        Err(ModelError::UnsupportedVersion(2))
    ));

    // Rename one tensor; the header length is unchanged.
    let renamed = replace_once(&bytes, b"model.3.conv.weight", b"model.3.conv.weighT");
    let err = load_weights(&mut target, &renamed).unwrap_err();
    assert!(err.to_string().contains("model.3.conv.weight"), "{err}");

    let wrong_shape = build_from_text(
        "yolo11-detect",
        &builtin_config("yolo11-detect").unwrap().replace("nc = 80", "nc = 4"),
        "n",
        7,
    )
    .unwrap();
    let err = load_weights(&mut target, &save_weights(&wrong_shape)).unwrap_err();
    assert!(matches!(err, ModelError::WeightShape { .. }), "{err}");
    assert_eq!(target, m, "failed loads leave the model untouched");
}

fn replace_once(hay: &[u8], from: &[u8], to: &[u8]) -> Vec<u8> {
    let pos = hay.windows(from.len()).position(|w| w == from).unwrap();
    let mut out = hay.to_vec();
    out[pos..pos + from.len()].copy_from_slice(to);
    out
}

#[test]
fn classifier_logits_softmax_to_one() {
    let text = builtin_config("yolo11-cls").unwrap().replace("nc = 1000", "nc = 10");
    let spec = apply_scale(&parse_config(&text).unwrap(), "n").unwrap();
    let m = build_model("yolo11-cls", &spec, 5).unwrap();
    let x = Tensor4::random_uniform([2, 3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let RawPredictions::Classify { logits } = m.forward(&x).unwrap() else {
        panic!()
    };
    assert_eq!(logits.shape(), [2, 10, 1, 1]);
    let rows = softmax_lastdim(&logits.reshape([2, 1, 1, 10]).unwrap()).unwrap();
    for r in rows.data().chunks(10) {
        let s: f64 = r.iter().map(|&v| v as f64).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}
