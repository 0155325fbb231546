use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenes() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenes")
}

fn occlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_occlift")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_fit_eval_round_trip() {
    let cfg = scenes().join("smoke_2x2x2.config.json");
    let gt = tempfile::tempdir().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let again = tempfile::tempdir().unwrap();
    for dir in [&gt, &again] {
        let out = occlift(&["gen", "--config", s(&cfg), "--out", s(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["scene.json", "labels.ocgr", "flow.ocgr", "depth.oclt", "semantic.ocgr"] {
        assert_eq!(std::fs::read(gt.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap(), "{f}");
    }

    for dir in [&a, &b] {
        let out = occlift(&["fit", "--config", s(&cfg), "--out", s(dir.path()), "--steps", "4", "--seed", "9"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["loss_trace.csv", "labels.ocgr", "flow.ocgr", "transfer.ocmt"] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        assert_eq!(x, y, "{f} differs between identical runs");
    }

    let out = occlift(&["eval", "--config", s(&cfg), "--pred", s(gt.path()), "--gt", s(gt.path())]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l == "miou = 1.000000"), "{text}");
}

#[test]
fn errors_map_to_exit_codes() {
    let missing = occlift(&["gen", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let orphan = dir.path().join("orphan.config.json");
    std::fs::write(&orphan, r#"{ "scene": "nowhere.json" }"#).unwrap();
    let no_scene = occlift(&["gen", "--config", s(&orphan), "--out", s(dir.path())]);
    assert_eq!(no_scene.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_scene.stderr).contains("nowhere.json"));

    let bad_flag = occlift(&["fit", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(1));

    let cfg = scenes().join("smoke_2x2x2.config.json");
    let no_out = occlift(&["gen", "--config", s(&cfg)]);
    assert_eq!(no_out.status.code(), Some(1));

    let small = tempfile::tempdir().unwrap();
    let big = tempfile::tempdir().unwrap();
    occlift(&["gen", "--config", s(&cfg), "--out", s(small.path())]);
    occlift(&["gen", "--config", s(&scenes().join("cube_4x4x4.config.json")), "--out", s(big.path())]);
    let mismatch = occlift(&["eval", "--config", s(&cfg), "--pred", s(big.path()), "--gt", s(small.path())]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("does not match"));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let cfg = scenes().join("two_boxes.config.json");
    let out_dir = tempfile::tempdir().unwrap();
    let out = occlift(&[
        "fit", "--config", s(&cfg), "--out", s(out_dir.path()), "--optimizer", "gd", "--lr", "1000", "--steps", "20",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("at step"));
}
