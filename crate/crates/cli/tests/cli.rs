use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn motionparse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motionparse"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> serde_json::Value {
    let out = motionparse(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok_json(&["synth", "--scene", "moving-box", "--out", p(&a), "--seed", "7"]);
    ok_json(&["synth", "--scene", "moving-box", "--out", p(&b), "--seed", "7"]);
    let (la, lb) = (listing(&a), listing(&b));
    assert!(la.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(la, lb);

    let c = dir.path().join("c");
    ok_json(&["synth", "--scene", "moving-box", "--out", p(&c), "--seed", "8"]);
    assert_ne!(listing(&c), la);
}

#[test]
fn parse_writes_masks_and_motion_maps() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let parsed = dir.path().join("parsed");
    ok_json(&["synth", "--scene", "moving-box", "--out", p(&scene), "--seed", "3"]);
    let report = ok_json(&[
        "parse",
        "--manifest",
        p(&scene.join("manifest.json")),
        "--out",
        p(&parsed),
    ]);
    assert!(report.is_object());
    for name in [
        "visibility.png",
        "segmentation.png",
        "moving_soft.pfm",
        "m_d.pfm",
        "m_b.pfm",
    ] {
        assert!(parsed.join(name).is_file(), "{name} missing");
    }

    let seg = motionparse::io::read_mask(&parsed.join("segmentation.png")).unwrap();
    let gt = motionparse::io::read_mask(&scene.join("moving.png")).unwrap();
    assert!(seg.count() > 0 && gt.count() > 0);
}

#[test]
fn loss_at_ground_truth_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok_json(&["synth", "--scene", "static", "--out", p(&scene), "--seed", "1"]);
    let report = ok_json(&["loss", "--manifest", p(&scene.join("manifest.json")), "--all-terms"]);
    let text = report.to_string();
    assert!(text.contains("total"), "{text}");
}

#[test]
fn eval_depth_of_identical_files_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    ok_json(&["synth", "--scene", "static", "--out", p(&scene), "--seed", "2"]);
    let depth = scene.join("depth_t.pfm");
    let report = ok_json(&["eval-depth", "--pred", p(&depth), "--gt", p(&depth), "--median-scale"]);
    for key in ["abs_rel", "sq_rel", "rmse", "rmse_log"] {
        assert_eq!(report[key].as_f64(), Some(0.0), "{key}: {report}");
    }
}

#[test]
fn optimize_runs_a_short_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let scene = dir.path().join("scene");
    let out = dir.path().join("opt");
    ok_json(&[
        "synth",
        "--scene",
        "moving-box",
        "--size",
        "32",
        "--out",
        p(&scene),
        "--seed",
        "4",
    ]);
    ok_json(&[
        "optimize",
        "--manifest",
        p(&scene.join("manifest.json")),
        "--out",
        p(&out),
        "--max-iters",
        "2",
    ]);
    for name in [
        "depth_t.pfm",
        "flow_t_to_s.flo",
        "segmentation.png",
        "pose.txt",
        "trace.json",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(motionparse(&["synth", "--bogus"]).status.code(), Some(2));
    assert_eq!(motionparse(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = motionparse(&["loss", "--manifest", p(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
