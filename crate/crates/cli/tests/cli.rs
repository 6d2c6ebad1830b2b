use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use casp_core::backbone::Variant;
use casp_core::{PipelineConfig, PipelineWeights};
use serde_json::Value;

fn casp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_casp"))
        .args(args)
        .env("CASP_LOG", "error")
        .output()
        .expect("run casp")
}

fn schema(name: &str) -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_valid(schema_name: &str, doc: &Value) {
    if let Err(e) = jsonschema::validate(&schema(schema_name), doc) {
        panic!("{schema_name}: {e}");
    }
}

fn write_image(dir: &Path, name: &str, w: u32, h: u32) -> PathBuf {
    let img = image::GrayImage::from_fn(w, h, |x, y| {
        let (x, y) = (x as f32, y as f32);
        let v = 0.5 + 0.2 * (0.31 * x).sin() * (0.23 * y).cos() + 0.15 * (0.11 * x + 0.17 * y).sin();
        image::Luma([(v * 255.0) as u8])
    });
    let p = dir.join(name);
    img.save(&p).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn self_match_is_diagonal_and_in_original_frame() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.pgm", 65, 67);
    let b = write_image(dir.path(), "b.png", 65, 67);
    let out = casp(&["match", s(&a), s(&b), "--variant", "lite", "--theta", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("match.schema.json", &doc);
    assert_eq!(doc["image_sizes"]["a"], serde_json::json!([65, 67]));
    let matches = doc["matches"].as_array().unwrap();
    assert!(!matches.is_empty());
    for m in matches {
        assert_eq!(m["iA"], m["iB"]);
        let (x, y) = (m["subpix_B"][0].as_f64().unwrap(), m["subpix_B"][1].as_f64().unwrap());
        assert!(x < 64.5 && y < 66.5);
    }
    let again = casp(&["match", s(&a), s(&b), "--variant", "lite", "--theta", "0"]);
    assert_eq!(out.stdout, again.stdout);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 64, 64);
    let k3 = casp(&["match", s(&a), s(&a), "--k", "3"]);
    assert_eq!(k3.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&k3.stderr).contains("k = 3"));
    assert_eq!(casp(&["match", "missing.png", s(&a)]).status.code(), Some(2));
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not weights").unwrap();
    assert_eq!(casp(&["match", s(&a), s(&a), "--weights", s(&junk)]).status.code(), Some(3));
}

#[test]
fn weight_file_reproduces_seeded_weights() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 64, 64);
    let cfg = PipelineConfig {
        variant: Variant::Lite,
        seed: 5,
        ..PipelineConfig::default()
    };
    let wpath = dir.path().join("lite.caspw");
    PipelineWeights::random(&cfg).export().save(&wpath).unwrap();
    let from_file = casp(&["match", s(&a), s(&a), "--variant", "lite", "--weights", s(&wpath), "--theta", "0"]);
    let seeded = casp(&["match", s(&a), s(&a), "--variant", "lite", "--seed", "5", "--theta", "0"]);
    assert!(from_file.status.success());
    assert_eq!(from_file.stdout, seeded.stdout);
    // Weights of the other variant do not fit.
    assert_eq!(casp(&["match", s(&a), s(&a), "--weights", s(&wpath)]).status.code(), Some(3));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 64, 64);
    let cfg = dir.path().join("casp.cfg");
    std::fs::write(&cfg, "variant = lite\nk = 3\ntheta = 1.1\n").unwrap();
    assert_eq!(casp(&["--config", s(&cfg), "match", s(&a), s(&a)]).status.code(), Some(2));
    let out = casp(&["--config", s(&cfg), "match", s(&a), s(&a), "--k", "8"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["matches"].as_array().unwrap().is_empty());
    let out = casp(&["--config", s(&cfg), "match", s(&a), s(&a), "--k", "8", "--theta", "0"]);
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!doc["matches"].as_array().unwrap().is_empty());
}

#[test]
fn identity_eval_is_perfect_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"scene": {"family": "identity", "width": 96, "height": 96}, "count": 2}"#).unwrap();
    let out_dir = dir.path().join("out");
    let run = casp(&["eval", s(&spec), "--out", s(&out_dir), "--seed", "4"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let mut names: Vec<String> = std::fs::read_dir(&out_dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["eval_report.csv", "eval_report.json"]);
    let bytes = std::fs::read(out_dir.join("eval_report.json")).unwrap();
    let doc: Value = serde_json::from_slice(&bytes).unwrap();
    assert_valid("eval_report.schema.json", &doc);
    assert_eq!(doc["precision"], 1.0);
    assert!((doc["auc"][0].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert_eq!(doc["oracle_equal"], true);
    assert_eq!(doc["spec"]["scene"]["seed"], 4);

    let stdout = casp(&["eval", s(&spec), "--seed", "4"]);
    assert_eq!(stdout.stdout, bytes);
}

#[test]
fn bench_smoke_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = casp(&["bench", "--sizes", "128,256", "--repeats", "1", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_valid("bench_report.schema.json", &doc);
    assert_eq!(doc["entries"].as_array().unwrap().len(), 2);
    assert_eq!(std::fs::read_to_string(dir.path().join("bench.csv")).unwrap().lines().count(), 3);
    assert!(dir.path().join("bench.dat").exists());
    assert!(String::from_utf8_lossy(&out.stdout).contains("op_ratio"));
}

#[test]
fn selftest_passes_and_names_a_corrupted_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let out = casp(&["selftest", "--out", s(dir.path())]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert!(text.contains("gradient-fd"));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("selftest.json")).unwrap()).unwrap();
    assert_valid("selftest.schema.json", &doc);

    let wpath = dir.path().join("w.caspw");
    PipelineWeights::random(&PipelineConfig::default()).export().save(&wpath).unwrap();
    let mut bytes = std::fs::read(&wpath).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    std::fs::write(&wpath, bytes).unwrap();
    let bad = casp(&["selftest", "--weights", s(&wpath)]);
    assert_eq!(bad.status.code(), Some(4));
    let text = String::from_utf8_lossy(&bad.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL") && l.contains("weights-checksum")), "{text}");
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = write_image(dir.path(), "a.png", 64, 64);
    let out = Command::new(env!("CARGO_BIN_EXE_casp"))
        .args(["match", s(&a), s(&a), "--variant", "lite"])
        .env("CASP_LOG", "info")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("matches; extraction"));
}
