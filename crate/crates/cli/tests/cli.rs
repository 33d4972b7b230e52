use std::path::Path;
use std::process::{Command, Output};

fn dinoyolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dinoyolo")).args(args).output().expect("spawn dinoyolo")
}

fn ok(args: &[&str]) -> String {
    let out = dinoyolo(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn full_scale_params_report_two_frozen_teachers() {
    let out = ok(&["params", "--scale", "L", "--teacher", "vitb16-full", "--strategy", "dualp0p3", "--input-size", "640", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let frozen = v["frozen"].as_u64().unwrap() as f64;
    assert!((frozen / 172e6 - 1.0).abs() < 0.05, "frozen {frozen}");
    assert_eq!(v["total"].as_u64(), Some(v["trainable"].as_u64().unwrap() + v["frozen"].as_u64().unwrap()));

    let text = ok(&["params", "--scale", "S", "--strategy", "none"]);
    assert!(text.contains("frozen 0"), "{text}");
}

#[test]
fn ablate_with_no_strategies_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("out.csv");
    let out = dinoyolo(&["ablate", "--strategies", "", "--out", p(&csv)]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("usage"), "{err}");
    assert!(!csv.exists());
}

#[test]
fn unknown_subcommands_and_flags_fail_with_usage() {
    for args in [&["frobnicate"][..], &["params", "--bogus"]] {
        let out = dinoyolo(args);
        assert!(!out.status.success());
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    }
}

#[test]
fn bad_inputs_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = dinoyolo(&["bench", "--checkpoint", p(&missing)]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
}

#[test]
fn train_eval_bench_and_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--samples", "24", "--seed", "3", "--out", p(&data)]);
    assert!(data.join("images/sample_00000.png").exists());
    assert!(data.join("labels/sample_00000.txt").exists());

    let config = dir.path().join("run.json");
    std::fs::write(&config, r#"{"strategy": "dualp0p3", "epochs": 2, "eval_every": 1, "val_samples": 8}"#).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let history = dir.path().join("history.csv");
    let data_flag = p(&data);
    ok(&["train", "--config", p(&config), "--data-dir", data_flag, "--batch-size", "8", "--out", p(&ckpt), "--history", p(&history)]);

    let rows = dinoyolo::harness::read_history(&history).unwrap();
    assert_eq!(rows.len(), 2);
    let last = rows.last().unwrap();

    let eval = ok(&["eval", "--checkpoint", p(&ckpt), "--config", p(&config), "--data-dir", data_flag]);
    let v: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(v["map50"].as_f64(), last.map50);
    assert_eq!(v["map5095"].as_f64(), last.map5095);

    let bench = ok(&["bench", "--checkpoint", p(&ckpt), "--warmup", "1", "--runs", "3"]);
    let v: serde_json::Value = serde_json::from_str(&bench).unwrap();
    assert_eq!(v["runs"].as_u64(), Some(3));
    assert!(v["fps"].as_f64().unwrap() > 0.0);

    let params = ok(&["params", "--checkpoint", p(&ckpt), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&params).unwrap();
    assert!(v["frozen"].as_u64().unwrap() > 0);

    let maps = dir.path().join("maps");
    let image = data.join("images/sample_00000.png");
    ok(&["dump-features", "--checkpoint", p(&ckpt), "--image", p(&image), "--site", "P3-post", "--out", p(&maps), "--colormap"]);
    let pgm = std::fs::read(maps.join("P3-post_c000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n8 8 255\n"));
    assert!(maps.join("P3-post_mean.ppm").exists());
}
