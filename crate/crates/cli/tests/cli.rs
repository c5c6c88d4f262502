use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rose"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path, seed: &str) -> Output {
    rose(&[
        "generate", "--count", "1", "--seed", seed, "--frames", "8", "--height", "32", "--width", "32",
        "--out", s(dir),
    ])
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rose(&[]).status.code(), Some(1));
    assert_eq!(rose(&["frobnicate"]).status.code(), Some(1));
    let out = rose(&["generate", "--out", "/tmp/x", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(rose(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, "[1, 2]").unwrap();
    assert_eq!(rose(&["generate", "--config", s(&cfg), "--out", s(dir.path())]).status.code(), Some(1));
    let out = rose(&["generate", "--categories", "shadow,nope", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = rose(&["filter", "--data", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    let junk = dir.path().join("junk.rvt");
    fs::write(&junk, b"RVT1garbage").unwrap();
    let out = rose(&["augment", "--mask", s(&junk), "--out", s(&dir.path().join("a"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn generate_is_reproducible_and_config_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(small_dataset(&a, "7").status.success());
    assert!(small_dataset(&b, "7").status.success());
    let ta = tree(&a);
    assert_eq!(ta.len(), 6 * 3 + 1);
    assert_eq!(ta, tree(&b));

    let cfg = dir.path().join("gen.json");
    fs::write(&cfg, r#"{"count": 1, "frames": 8, "height": 32, "width": 32, "categories": ["mirror"]}"#).unwrap();
    let c = dir.path().join("c");
    assert!(rose(&["generate", "--config", s(&cfg), "--seed", "7", "--out", s(&c)]).status.success());
    let tc = tree(&c);
    assert_eq!(tc.len(), 4);
    let key = PathBuf::from("mirror/000_original.rvt");
    assert_eq!(tc[&key], ta[&key]);
    let manifest = String::from_utf8(tc[&PathBuf::from("manifest.json")].clone()).unwrap();
    assert!(manifest.contains("\"config_sha256\""));
    assert!(manifest.contains("\"seed\": 7"));
}

#[test]
fn filter_augment_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_dataset(&data, "3").status.success());
    let f = dir.path().join("f");
    assert!(rose(&["filter", "--data", s(&data), "--out", s(&f)]).status.success());
    assert!(f.join("filter_report.json").exists());
    let strict = dir.path().join("strict");
    let out = rose(&["filter", "--data", s(&data), "--min-fg-ratio", "1.0", "--out", s(&strict)]);
    assert!(out.status.success());
    assert_eq!(tree(&strict).len(), 2);

    let mask = data.join("shadow/000_mask.rvt");
    let a = dir.path().join("aug");
    let out = rose(&["augment", "--mask", s(&mask), "--kind", "dilate", "--radius", "2", "--out", s(&a)]);
    assert!(out.status.success());
    assert!(fs::read_to_string(a.join("augment.json")).unwrap().contains("dilate"));
    assert_eq!(rose(&["augment", "--mask", s(&mask), "--kind", "dilate", "--out", s(&a)]).status.code(), Some(1));

    let e = dir.path().join("eval");
    let orig = data.join("shadow/000_original.rvt");
    let edit = data.join("shadow/000_edited.rvt");
    let out = rose(&[
        "eval", "--input", s(&orig), "--output", s(&edit), "--mask", s(&mask), "--gt", s(&edit), "--out", s(&e),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = fs::read_to_string(e.join("metrics.json")).unwrap();
    assert!(m.contains("\"psnr\": 99.0"), "{m}");
}

#[test]
fn train_infer_and_bench_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(small_dataset(&data, "5").status.success());
    let cfg = dir.path().join("train.json");
    fs::write(&cfg, r#"{"model": {"patch": [4, 8, 8], "dim": 8}, "train": {"probes_per_sample": 1}}"#).unwrap();
    let run = |out: &Path| {
        rose(&[
            "train", "--data", s(&data), "--config", s(&cfg), "--steps", "3", "--categories", "shadow",
            "--seed", "1", "--out", s(out),
        ])
    };
    let (t1, t2) = (dir.path().join("t1"), dir.path().join("t2"));
    let out = run(&t1);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run(&t2).status.success());
    assert_eq!(tree(&t1), tree(&t2));
    let trace = fs::read_to_string(t1.join("loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
    assert!(trace.starts_with("step,diffusion_loss,mask_loss,total"));

    let ckpt = t1.join("checkpoint.ckpt");
    let video = data.join("shadow/000_original.rvt");
    let mask = data.join("shadow/000_mask.rvt");
    let i = dir.path().join("inf");
    let out = rose(&[
        "infer", "--checkpoint", s(&ckpt), "--video", s(&video), "--mask", s(&mask), "--steps", "3", "--out", s(&i),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["erased.rvt", "composite.rvt", "d_hat.rvt", "manifest.json"] {
        assert!(i.join(f).exists(), "{f}");
    }

    let other = dir.path().join("other");
    assert!(rose(&[
        "generate", "--count", "1", "--frames", "8", "--height", "32", "--width", "48", "--categories", "shadow",
        "--out", s(&other),
    ])
    .status
    .success());
    let out = rose(&[
        "infer", "--checkpoint", s(&ckpt), "--video", s(&other.join("shadow/000_original.rvt")), "--mask",
        s(&other.join("shadow/000_mask.rvt")), "--out", s(&dir.path().join("bad")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects"));

    let b = dir.path().join("bench");
    let out = rose(&["bench", "--bench-dir", s(&data), "--method", "identity", "--out", s(&b)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(b.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    assert!(csv.lines().last().unwrap().starts_with("Mean,"));
    assert!(fs::read_to_string(b.join("report.txt")).unwrap().contains("Light Source"));
    let out = rose(&["bench", "--bench-dir", s(&data), "--out", s(&b)]);
    assert_eq!(out.status.code(), Some(1));
}
