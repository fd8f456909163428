use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn cvsnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cvsnet")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let text = r#"{
        "input_resolution": 16,
        "retina": {"units_per_cell_type": 1, "inner_stride": 1},
        "lgn": {"stride": 1},
        "striate": {"blob_branch_channels": 2, "blob_stem_channels": 2},
        "head": {"classes": 3, "token_expansion": 1, "channel_expansion": 1}
    }"#;
    std::fs::write(&path, text).unwrap();
    path
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(out.join("manifest.json")).expect("manifest written")).unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn inspect_default_config_prints_cost_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = configs().join("default.json");
    let out = cvsnet(&["inspect", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("params:") && stdout.contains("flops:"), "{stdout}");
    let m = manifest(dir.path());
    assert_eq!(m["status"], "ok");
    assert_eq!(m["command"], "inspect");
    assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    assert!(dir.path().join("inspect.json").exists());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = cvsnet(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = cvsnet(&["inspect", "--colour", "red"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_subcommand_is_a_usage_error() {
    assert_eq!(cvsnet(&[]).status.code(), Some(1));
}

#[test]
fn runtime_failure_exits_two_and_still_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent");
    let out = cvsnet(&["eval", "--data", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let m = manifest(dir.path());
    assert!(m["status"].as_str().unwrap().starts_with("failed"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"input_resolution": 2}"#).unwrap();
    let out2 = dir.path().join("second");
    let out = cvsnet(&["inspect", "--config", bad.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(manifest(&out2)["status"].as_str().unwrap().starts_with("failed"));
}

#[test]
fn gradcheck_with_seed_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvsnet(&["gradcheck", "--seed", "7", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}\n{}", text(&out.stdout), text(&out.stderr));
    let results: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(results.len() > 10);
    assert!(results.iter().all(|r| r["passed"] == true));
    assert_eq!(manifest(dir.path())["seed"], 7);
}

#[test]
fn pathways_report_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = cvsnet(&["pathways", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("P 64"));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("pathways.json")).unwrap()).unwrap();
    assert_eq!(r["p_channels"], 64);
}

fn ablate(cfg: &Path, out: &Path) -> Output {
    cvsnet(&[
        "ablate-brightness",
        "--config",
        cfg.to_str().unwrap(),
        "--taps",
        "inner_out,lgn.m,lgn.p,lgn.k",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn ablation_outputs_are_identical_across_processes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ra = ablate(&cfg, &a);
    assert_eq!(ra.status.code(), Some(0), "{}", text(&ra.stderr));
    assert_eq!(ablate(&cfg, &b).status.code(), Some(0));
    let report_a = std::fs::read(a.join("brightness/report.json")).unwrap();
    assert_eq!(report_a, std::fs::read(b.join("brightness/report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    for img in report["images"].as_array().unwrap() {
        let rel = img.as_str().unwrap();
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
    assert!(a.join("brightness/panel_grid.ppm").exists());
    assert!(report["pathways"]["ordering"].as_array().unwrap().len() == 3);
    assert!(text(&ra.stdout).contains("pathway ordering"));
}

#[test]
fn ablation_rejects_unknown_taps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cvsnet(&["ablate-color", "--config", cfg.to_str().unwrap(), "--taps", "lgn.z", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("striate.blob_conv"));
}

#[test]
fn export_features_writes_maps_for_each_tap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = cvsnet(&[
        "export-features",
        "--config",
        cfg.to_str().unwrap(),
        "--taps",
        "lgn.m,striate.blob_conv",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    for f in ["lgn_m.ppm", "lgn_m_channels.ppm", "striate_blob_conv.ppm"] {
        assert!(dir.path().join("features").join(f).exists(), "{f}");
    }
}

fn write_cifar(dir: &Path, name: &str, n: usize) {
    let mut bytes = Vec::new();
    for i in 0..n {
        let label = (i % 3) as u8;
        bytes.push(label);
        for c in 0..3 {
            let level = if c == label as usize { 200u8 } else { 40 };
            bytes.extend(std::iter::repeat_n(level.wrapping_add((i * 7 % 13) as u8), 1024));
        }
    }
    std::fs::write(dir.join(name), bytes).unwrap();
}

#[test]
fn train_then_eval_round_trip_on_synthetic_cifar() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cifar");
    std::fs::create_dir_all(&data).unwrap();
    for f in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"] {
        write_cifar(&data, f, 4);
    }
    write_cifar(&data, "test_batch.bin", 6);
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"input_resolution": 32, "retina": {"units_per_cell_type": 1},
             "striate": {"blob_branch_channels": 2, "blob_stem_channels": 2},
             "head": {"classes": 10, "token_expansion": 1, "channel_expansion": 1}},
            "train": {"epochs": 2, "warmup_epochs": 1, "batch_size": 10}}"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let r = cvsnet(&args);
    assert_eq!(r.status.code(), Some(0), "{}", text(&r.stderr));
    for f in ["metrics.jsonl", "epoch_000.ckpt", "epoch_001.ckpt", "best.ckpt", "final.ckpt", "train_config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let ckpt = out.join("final.ckpt");
    let eval_out = dir.path().join("eval");
    let r = cvsnet(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", eval_out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(0), "{}", text(&r.stderr));
    assert!(text(&r.stdout).contains("top1"));
    let m = manifest(&eval_out);
    assert_eq!(m["checkpoint_sha256"].as_str().unwrap().len(), 64);

    // a second training process reproduces the metrics log byte for byte
    let out2 = dir.path().join("run2");
    let args2 = ["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", out2.to_str().unwrap()];
    assert_eq!(cvsnet(&args2).status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("metrics.jsonl")).unwrap(), std::fs::read(out2.join("metrics.jsonl")).unwrap());
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(out2.join("final.ckpt")).unwrap());
}
