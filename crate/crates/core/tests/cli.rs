use std::path::Path;
use std::process::{Command, Output};

use legaussians::cli::RunManifest;

fn leg3d(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leg3d"))
        .args(args)
        .env_remove("LEG3D_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = leg3d(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn manifest(dir: &Path, command: &str) -> RunManifest {
    let text = std::fs::read_to_string(dir.join(format!("manifest_{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn relative_hashes(m: &RunManifest, root: &Path) -> Vec<(String, String)> {
    m.outputs
        .iter()
        .map(|f| (f.path.strip_prefix(root).unwrap().display().to_string(), f.sha256.clone()))
        .collect()
}

fn gen_small(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["gen", "--out", d, "--objects", "2", "--cameras", "5", "--size", "24", "--gaussians-per-object", "150", "--init-gaussians", "300"]);
}

#[test]
fn full_pipeline_writes_a_metric_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scene");
    gen_small(&dir);
    let d = dir.to_str().unwrap();
    ok(&["quantize", "--dir", d, "--codebook-size", "8", "--epochs", "2"]);
    ok(&["train", "--dir", d, "--iterations", "30", "--codebook-size", "8", "--log-every", "0"]);
    ok(&["render", "--dir", d, "--views", "0", "--novel", "1"]);
    ok(&["query", "--dir", d, "--views", "1"]);
    let out = ok(&["eval", "--dir", d]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mIoU"));
    let summary = std::fs::read_to_string(dir.join("eval/summary.csv")).unwrap();
    assert!(summary.starts_with("psnr,ssim,mpa,mp,miou,map\n"));
    assert_eq!(summary.lines().count(), 2);
    let seg = std::fs::read_to_string(dir.join("eval/segmentation.csv")).unwrap();
    assert_eq!(seg.lines().count(), 1 + 2 + 1);
    for f in ["render/rgb_view_000.png", "render/pca_novel_000.png", "query/object0/heat_001.png", "query/object1/mask_001.png"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    for cmd in ["gen", "quantize", "train", "render", "query", "eval"] {
        let m = manifest(&dir, cmd);
        assert!(!m.outputs.is_empty());
        for f in &m.outputs {
            assert_eq!(f.sha256, legaussians::cli::sha256_file(&f.path).unwrap());
        }
    }
}

#[test]
fn same_config_and_seed_give_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        gen_small(&dir);
        let d = dir.to_str().unwrap();
        ok(&["quantize", "--dir", d, "--codebook-size", "8", "--epochs", "2"]);
        ok(&["train", "--dir", d, "--iterations", "20", "--codebook-size", "8", "--log-every", "0"]);
        let all: Vec<_> = ["gen", "quantize", "train"].iter().flat_map(|c| relative_hashes(&manifest(&dir, c), &dir)).collect();
        hashes.push(all);
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn mismatched_codebook_size_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("scene");
    gen_small(&dir);
    let d = dir.to_str().unwrap();
    ok(&["quantize", "--dir", d, "--codebook-size", "8", "--epochs", "1"]);
    let out = leg3d(&["train", "--dir", d, "--codebook-size", "16", "--iterations", "5"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("N = 16") && err.contains("N = 8"), "{err}");
}

#[test]
fn empty_scene_generates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("empty");
    ok(&["gen", "--out", dir.to_str().unwrap(), "--objects", "0", "--cameras", "2", "--size", "16"]);
    assert!(dir.join("views/rgb_001.png").exists());
    let q = std::fs::read_to_string(dir.join("queries.toml")).unwrap();
    assert!(!q.contains("[[query]]"));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("env");
    let out = Command::new(env!("CARGO_BIN_EXE_leg3d"))
        .args(["gen", "--objects", "1", "--cameras", "2", "--size", "16", "--gaussians-per-object", "50"])
        .env("LEG3D_OUT", &dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.join("scene.json").exists());
}

#[test]
fn exit_codes() {
    assert_eq!(leg3d(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(leg3d(&["gen", "--bogus"]).status.code(), Some(2));
    assert_eq!(leg3d(&["--help"]).status.code(), Some(0));
    let tmp = tempfile::tempdir().unwrap();
    let missing = leg3d(&["train", "--dir", tmp.path().to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("scene.json"));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "object_count = \"four\"\n").unwrap();
    assert_eq!(leg3d(&["gen", "--out", tmp.path().to_str().unwrap(), "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn bench_reports_timings() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    ok(&["bench", "--out", d, "--gaussians", "500", "--size", "32", "--frames", "3", "--threads", "2"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["frames"], 3);
    assert_eq!(report["threads"], 2);
    assert_eq!(report["gaussians"], 500);
}
