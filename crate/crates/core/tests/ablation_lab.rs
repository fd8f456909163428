mod common;

use common::*;
use cvsnet::ablation::{
    adjust_brightness, capture_taps, feature_change, hsv_to_rgb, rgb_to_hsv, rotate_hue, run_sweep, test_card, validate_taps,
    StimulusSweep, SweepKind,
};
use cvsnet::model::tap_names;
use cvsnet::pixmap::{channel_grid_pixmap, export_feature_map, feature_map_pixmap, quantize, Pixmap};
use cvsnet::tensor::{Shape, Tensor4D};
use cvsnet::{CvsError, Model, ModelConfig};
use proptest::prelude::*;

fn pixel(rgb: [f64; 3]) -> T64 {
    Tensor4D::from_f64(Shape::new(1, 3, 1, 1), &rgb).unwrap()
}

#[test]
fn brightness_examples() {
    let img = random(Shape::new(1, 3, 4, 4), 0.0, 1.0, 1);
    assert_eq!(adjust_brightness(&img, 1.0).unwrap(), img);
    let p = Tensor4D::<f64>::full(Shape::new(1, 1, 1, 1), 0.8);
    assert!((adjust_brightness(&p, 0.5).unwrap().data()[0] - 0.4).abs() < 1e-15);
    assert!(adjust_brightness(&img, 0.0).is_err());
    assert!(adjust_brightness(&img, -0.3).is_err());
}

#[test]
fn brightness_on_valid_images_is_plain_scaling() {
    for seed in 0..20 {
        let img = random_f32(Shape::new(1, 3, 6, 6), seed);
        let f = 0.05 + 0.9 * (seed as f64 / 20.0);
        let out = adjust_brightness(&img, f).unwrap();
        let ff = f as f32;
        assert!(out.data().iter().zip(img.data()).all(|(o, i)| *o == i * ff));
    }
}

#[test]
fn hue_zero_is_identity() {
    let img = random(Shape::new(2, 3, 5, 5), 0.0, 1.0, 2);
    assert!(max_abs_diff(&rotate_hue(&img, 0.0).unwrap(), &img) < 1e-6);
}

#[test]
fn red_rotated_by_120_is_green() {
    let g = rotate_hue(&pixel([1.0, 0.0, 0.0]), 120.0).unwrap();
    assert!(max_abs_diff(&g, &pixel([0.0, 1.0, 0.0])) < 1e-6);
    let b = rotate_hue(&pixel([1.0, 0.0, 0.0]), 240.0).unwrap();
    assert!(max_abs_diff(&b, &pixel([0.0, 0.0, 1.0])) < 1e-6);
}

#[test]
fn hue_needs_rgb() {
    assert!(rotate_hue(&Tensor4D::<f64>::zeros(Shape::new(1, 2, 2, 2)), 10.0).is_err());
}

#[test]
fn hsv_round_trip_and_known_values() {
    assert_eq!(rgb_to_hsv(0.0, 0.0, 1.0), (240.0, 1.0, 1.0));
    assert_eq!(rgb_to_hsv(0.5, 0.5, 0.5), (0.0, 0.0, 0.5));
    let (r, g, b) = hsv_to_rgb(60.0, 1.0, 1.0);
    assert!((r - 1.0).abs() < 1e-12 && (g - 1.0).abs() < 1e-12 && b.abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hue_compositions_summing_to_360_return_to_start(a in 0.0f64..360.0, split in 0.0f64..1.0, seed in any::<u64>()) {
        let img = random(Shape::new(1, 3, 3, 3), 0.0, 1.0, seed);
        let b = (360.0 - a) * split;
        let c = 360.0 - a - b;
        let out = rotate_hue(&rotate_hue(&rotate_hue(&img, a).unwrap(), b).unwrap(), c).unwrap();
        prop_assert!(max_abs_diff(&out, &img) < 1e-5);
    }

    #[test]
    fn hue_rotation_preserves_value(deg in 0.0f64..360.0, seed in any::<u64>()) {
        let img = random(Shape::new(1, 3, 4, 4), 0.0, 1.0, seed);
        let out = rotate_hue(&img, deg).unwrap();
        for i in 0..16 {
            let v = |t: &T64| (0..3).map(|c| t.plane(0, c)[i]).fold(f64::MIN, f64::max);
            prop_assert!((v(&out) - v(&img)).abs() < 1e-6);
        }
    }

    #[test]
    fn change_metric_detects_scale(beta in -3.0f64..3.0, seed in any::<u64>()) {
        let f = random(Shape::new(1, 4, 3, 3), -1.0, 1.0, seed);
        let got = feature_change(&f, &f.scale(beta)).unwrap();
        prop_assert!((got - (beta - 1.0).abs()).abs() < 1e-7);
    }

    #[test]
    fn change_metric_matches_norm_oracle(seed in any::<u64>()) {
        let a = random(Shape::new(2, 3, 4, 4), -1.0, 1.0, seed);
        let b = random(Shape::new(2, 3, 4, 4), -1.0, 1.0, seed ^ 1);
        let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
        let norm: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((feature_change(&a, &b).unwrap() - diff / (norm + 1e-8)).abs() < 1e-6);
    }
}

#[test]
fn change_metric_examples() {
    let f = random(Shape::new(1, 3, 2, 2), -1.0, 1.0, 3);
    assert_eq!(feature_change(&f, &f).unwrap(), 0.0);
    assert!((feature_change(&f, &f.scale(2.0)).unwrap() - 1.0).abs() < 1e-7);
    assert!(feature_change(&f, &Tensor4D::zeros(Shape::new(1, 3, 2, 3))).is_err());
}

fn all_taps() -> Vec<String> {
    tap_names()
}

#[test]
fn identity_only_sweep_reports_zero() {
    let model = Model::<f32>::build(ModelConfig::tiny(16, 3)).unwrap();
    for sweep in [
        StimulusSweep { kind: SweepKind::Brightness, values: vec![1.0] },
        StimulusSweep { kind: SweepKind::Hue, values: vec![0.0] },
    ] {
        let r = run_sweep(&model, &test_card(16), &sweep, &all_taps(), None).unwrap();
        for rows in r.taps.values() {
            assert!(rows.iter().all(|v| v.change == 0.0));
        }
        assert!(r.baseline.iter().all(|v| v.change == 0.0));
    }
}

#[test]
fn bias_free_model_is_homogeneous_under_brightness() {
    let mut cfg = ModelConfig::tiny(16, 3);
    cfg.bias = false;
    let model = Model::<f32>::build(cfg).unwrap();
    let base = test_card(16);
    let sweep = StimulusSweep { kind: SweepKind::Brightness, values: vec![1.0, 0.8, 0.6, 0.4, 0.1] };
    let r = run_sweep(&model, &base, &sweep, &all_taps(), None).unwrap();
    assert_eq!(r.taps.len(), 11);
    for (tap, rows) in &r.taps {
        for v in rows {
            assert!((v.change - (1.0 - v.value)).abs() < 1e-5, "{tap} at {}: {}", v.value, v.change);
        }
    }
    // the plain baseline block is bias-free as well
    for v in &r.baseline {
        assert!((v.change - (1.0 - v.value)).abs() < 1e-5);
    }
}

#[test]
fn biased_model_breaks_homogeneity() {
    let mut model = Model::<f64>::build(ModelConfig::tiny(16, 3)).unwrap();
    randomize_biases(&mut model.params, 9);
    let model = model.cast::<f32>();
    let sweep = StimulusSweep { kind: SweepKind::Brightness, values: vec![1.0, 0.5] };
    let r = run_sweep(&model, &test_card(16), &sweep, &["striate.blob_conv".to_string()], None).unwrap();
    assert!((r.taps["striate.blob_conv"][1].change - 0.5).abs() > 1e-4);
}

#[test]
fn sweep_report_is_byte_deterministic_and_lists_images() {
    let model = Model::<f32>::build(ModelConfig::tiny(16, 3)).unwrap();
    let taps: Vec<String> = ["inner_out", "lgn.m", "lgn.p", "lgn.k"].iter().map(|s| s.to_string()).collect();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_sweep(&model, &test_card(16), &StimulusSweep::hue_default(), &taps, Some(a.path())).unwrap();
    run_sweep(&model, &test_card(16), &StimulusSweep::hue_default(), &taps, Some(b.path())).unwrap();
    let json_a = std::fs::read(a.path().join("hue/report.json")).unwrap();
    assert_eq!(json_a, std::fs::read(b.path().join("hue/report.json")).unwrap());
    assert_eq!(String::from_utf8(json_a).unwrap(), ra.to_json().unwrap());
    for img in &ra.images {
        let pa = std::fs::read(a.path().join(img)).unwrap();
        assert_eq!(pa, std::fs::read(b.path().join(img)).unwrap(), "{img}");
        Pixmap::decode(&pa).unwrap();
    }
    assert!(ra.images.iter().any(|i| i == "hue/panel_grid.ppm"));
    assert!(ra.images.iter().any(|i| i == "hue/lgn_k/h120.ppm"));
    let p = ra.pathways.as_ref().unwrap();
    assert_eq!(p.expected_ordering, ["M", "P", "K"]);
    let mut sorted = p.ordering.clone();
    sorted.sort();
    assert_eq!(sorted, ["K", "M", "P"]);
    // ordering is re-derivable from the metric table
    let mut by_mean = p.ordering.clone();
    by_mean.sort_by(|x, y| p.mean_change[x].total_cmp(&p.mean_change[y]));
    assert_eq!(by_mean, p.ordering);
    assert_eq!(p.matches_expected, p.ordering == p.expected_ordering);
}

#[test]
fn report_json_keys_are_sorted() {
    let model = Model::<f32>::build(ModelConfig::tiny(16, 3)).unwrap();
    let r = run_sweep(&model, &test_card(16), &StimulusSweep::brightness_default(), &["lgn.m".into()], None).unwrap();
    let text = r.to_json().unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    assert!(keys.windows(2).all(|w| w[0] < w[1]));
    assert!(r.pathways.is_none());
}

#[test]
fn unknown_taps_list_the_valid_names() {
    match validate_taps(&["lgn.q".to_string()]) {
        Err(CvsError::UnknownTap { name, valid }) => {
            assert_eq!(name, "lgn.q");
            for t in tap_names() {
                assert!(valid.contains(&t));
            }
        }
        other => panic!("{other:?}"),
    }
    let model = Model::<f32>::build(ModelConfig::tiny(16, 3)).unwrap();
    assert!(run_sweep(&model, &test_card(16), &StimulusSweep::hue_default(), &["nope".into()], None).is_err());
    assert!(capture_taps(&model, &test_card(16), &["nope".into()]).is_err());
}

#[test]
fn sweep_values_out_of_range_are_rejected() {
    let model = Model::<f32>::build(ModelConfig::tiny(16, 3)).unwrap();
    let bad = StimulusSweep { kind: SweepKind::Hue, values: vec![0.0, 400.0] };
    assert!(run_sweep(&model, &test_card(16), &bad, &["lgn.m".into()], None).is_err());
    let bad = StimulusSweep { kind: SweepKind::Brightness, values: vec![0.0] };
    assert!(run_sweep(&model, &test_card(16), &bad, &["lgn.m".into()], None).is_err());
}

#[test]
fn constant_map_renders_mid_grey() {
    let t = Tensor4D::<f32>::full(Shape::new(1, 4, 3, 3), 2.5);
    let p = feature_map_pixmap(&t).unwrap();
    assert!(p.rgb.iter().all(|&v| v == 128));
}

#[test]
fn two_by_two_map_hits_both_endpoints() {
    let t = Tensor4D::<f64>::from_f64(Shape::new(1, 1, 2, 2), &[0.0, 1.0, 1.0, 0.0]).unwrap();
    let p = feature_map_pixmap(&t).unwrap();
    let grey: Vec<u8> = (0..4).map(|i| p.pixel(i % 2, i / 2)[0]).collect();
    assert_eq!(grey, [0, 255, 255, 0]);
    assert_eq!(p.pixel(1, 0), [255, 255, 255]);
}

#[test]
fn exported_pixmap_reparses_to_quantized_values() {
    let t = random(Shape::new(1, 5, 7, 6), -2.0, 3.0, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/map.ppm");
    export_feature_map(&t, &path).unwrap();
    let back = Pixmap::read(&path).unwrap();
    assert_eq!((back.width, back.height), (6, 7));
    // channel mean then min-max to 0..=255, computed here independently
    let mean: Vec<f64> = (0..42).map(|i| (0..5).map(|c| t.plane(0, c)[i]).sum::<f64>() / 5.0).collect();
    let (lo, hi) = mean.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
    let want: Vec<u8> = mean.iter().map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect();
    let got: Vec<u8> = back.rgb.chunks(3).map(|px| px[0]).collect();
    assert_eq!(got, want);
    assert_eq!(quantize(&mean), want);
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P6\n6 7\n255\n"));
}

#[test]
fn export_requires_a_single_item() {
    assert!(feature_map_pixmap(&Tensor4D::<f32>::zeros(Shape::new(2, 1, 2, 2))).is_err());
    let dir = tempfile::tempdir().unwrap();
    assert!(export_feature_map(&Tensor4D::<f32>::zeros(Shape::new(2, 1, 2, 2)), &dir.path().join("x.ppm")).is_err());
}

#[test]
fn channel_grid_tiles_with_gutters() {
    let t = random(Shape::new(1, 5, 3, 4), 0.0, 1.0, 5);
    let p = channel_grid_pixmap(&t, 2).unwrap();
    assert_eq!((p.width, p.height), (2 * 5 - 1, 3 * 4 - 1));
    assert_eq!(p.pixel(4, 0), [0, 0, 0]);
}

#[test]
fn pixmap_decode_rejects_other_formats() {
    assert!(Pixmap::decode(b"P5\n1 1\n255\n\x00").is_err());
    assert!(Pixmap::decode(b"P6\n2 2\n255\n\x00\x00").is_err());
    let p = Pixmap::from_grey(2, 1, &[3, 200]);
    assert_eq!(Pixmap::decode(&p.encode()).unwrap(), p);
}
