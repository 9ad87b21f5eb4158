use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nucleoseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nucleoseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("NUCLEOSEG_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = nucleoseg(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    nucleoseg(args, cwd).status.code().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

const TINY: &str = "train.epochs = 1\ntrain.batch_size = 2\n";

/// gen -> train -> infer in `dir`, returning nothing; artifacts land in
/// `data`, `ck` and `pred`.
fn full_run(dir: &Path) {
    fs::write(dir.join("cfg.txt"), TINY).unwrap();
    ok(&["gen", "--out", "data", "--images", "4", "--size", "32x40", "--seed", "5"], dir);
    ok(&["train", "--manifest", "data/manifest.tsv", "--config", "cfg.txt", "--out", "ck"], dir);
    ok(&["infer", "--checkpoints", "ck", "--in", "data", "--out", "pred", "--dump-intermediate"], dir);
}

#[test]
fn end_to_end_and_byte_identical_reruns() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_run(a.path());
    full_run(b.path());
    for sub in ["data", "ck", "pred"] {
        assert_eq!(tree(&a.path().join(sub)), tree(&b.path().join(sub)), "{sub} differs");
    }
    let names: Vec<String> = tree(&a.path().join("pred")).into_iter().map(|(n, _)| n).collect();
    for suffix in ["_prob.png", "_labels.png", "_overlay.png", "_region.nst", "_boundary.nst", "_fused.nst"] {
        assert!(names.contains(&format!("scene_002{suffix}")), "{suffix} missing");
    }
    let log = fs::read_to_string(a.path().join("ck/region_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,acc"));
    // two training images, batch 2, one epoch
    assert_eq!(log.lines().count(), 2);

    let table = ok(&["eval", "--pred", "pred", "--truth", "data/manifest.tsv", "--out", "report.csv"], a.path());
    assert!(table.contains("Fused-ENet+CD+Watershed"));
    let csv = fs::read_to_string(a.path().join("report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("ALL,"));
}

#[test]
fn gen_layout_and_seed_from_env() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", "a", "--images", "3", "--size", "48x48", "--seed", "9"], d.path());
    let manifest = fs::read_to_string(d.path().join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    for f in ["scene_000.png", "scene_000_labels.png", "scene_000.ann.tsv"] {
        assert!(d.path().join("a").join(f).exists(), "{f}");
    }
    let out = Command::new(env!("CARGO_BIN_EXE_nucleoseg"))
        .args(["gen", "--out", "b", "--images", "3", "--size", "48x48"])
        .current_dir(d.path())
        .env("NUCLEOSEG_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(tree(&d.path().join("a")), tree(&d.path().join("b")));
}

#[test]
fn zero_images_gives_empty_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", "e", "--images", "0"], d.path());
    assert_eq!(fs::read_to_string(d.path().join("e/manifest.tsv")).unwrap(), "");
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    assert_eq!(code(&["gen", "--out", "x", "--images", "2", "--size", "4y5"], p), 2);
    assert_eq!(code(&["frobnicate"], p), 2);

    ok(&["gen", "--out", "data", "--images", "2", "--size", "32x32", "--seed", "1"], p);
    fs::write(p.join("bad.txt"), "train.epochs = many\n").unwrap();
    assert_eq!(code(&["train", "--manifest", "data/manifest.tsv", "--config", "bad.txt", "--out", "ck"], p), 2);
    assert_eq!(code(&["train", "--manifest", "data/manifest.tsv", "--out", "ck", "--stage", "fusion"], p), 4);
    assert_eq!(code(&["train", "--manifest", "missing.tsv", "--out", "ck"], p), 1);
    assert_eq!(code(&["infer", "--checkpoints", "ck", "--in", "data", "--out", "pred"], p), 4);

    fs::create_dir(p.join("empty")).unwrap();
    assert_eq!(code(&["eval", "--pred", "empty", "--truth", "data/manifest.tsv", "--out", "r.csv"], p), 4);
}

#[test]
fn eval_names_missing_predictions() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["gen", "--out", "data", "--images", "4", "--size", "32x32", "--seed", "2"], p);
    fs::create_dir(p.join("pred")).unwrap();
    // a truth map stands in for one prediction; the other test image has none
    fs::copy(p.join("data/scene_000_labels.png"), p.join("pred/scene_000_labels.png")).unwrap();
    let out = nucleoseg(&["eval", "--pred", "pred", "--truth", "data/manifest.tsv", "--out", "r.csv", "--split", "all"], p);
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scene_001") && !err.contains("scene_000"), "{err}");
}

#[test]
fn perfect_predictions_score_one() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&["gen", "--out", "data", "--images", "2", "--size", "48x48", "--seed", "3"], p);
    fs::create_dir(p.join("pred")).unwrap();
    for i in 0..2 {
        let name = format!("scene_{i:03}_labels.png");
        fs::copy(p.join("data").join(&name), p.join("pred").join(&name)).unwrap();
    }
    ok(&["eval", "--pred", "pred", "--truth", "data/manifest.tsv", "--out", "r.csv", "--split", "all"], p);
    let csv = fs::read_to_string(p.join("r.csv")).unwrap();
    let all = csv.lines().last().unwrap();
    assert!(all.starts_with("ALL,1.0000,1.0000,1.0000,1.0000,1.0000,1.0000"), "{all}");
}

#[test]
fn model_describe_lists_seventeen_layers() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(&["model", "describe", "--size", "360x480"], d.path());
    assert_eq!(out.lines().count(), 18);
    assert!(out.lines().last().unwrap().contains("(1,2,360,480)"));
}
