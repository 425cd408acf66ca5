use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ctxagg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctxagg"))
        .args(args)
        .current_dir(dir)
        .env("CTXAGG_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"{"seed": 4, "toy": {"train": {"iterations": 2}, "eval": {"scenes": 1}}}"#;

#[test]
fn params_reports_hroie_gate_weights() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(&["params", "--module", "hroie"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("1048576"), "{}", stdout(&o));

    let o = ctxagg(&["params", "--module", "hroie", "--json"], dir.path());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["params"]["weights"], 1_048_576);
    assert_eq!(v["params"]["total"], 1_050_624);
}

#[test]
fn unknown_module_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(&["params", "--module", "bifpn"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_and_selftest_pass() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(&["gradcheck"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("densefpn"));
    let o = ctxagg(&["selftest", "--filter", "core"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn flops_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(&["flops", "--out", "r"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/flops.json")).unwrap())
            .unwrap();
    assert_eq!(v["reports"].as_array().unwrap().len(), 3);
}

#[test]
fn train_is_deterministic_and_feeds_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    for out in ["a", "b"] {
        let o = ctxagg(
            &["--config", "tiny.json", "--out", out, "train"],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "loss.csv",
        "config.json",
        "checkpoint/params.bin",
        "checkpoint/manifest.json",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let log = fs::read_to_string(dir.path().join("a/loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(log.starts_with("iteration,cls_loss,box_loss,mask_loss,total\n"));

    let o = ctxagg(&["--out", "a", "eval"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["scenes"], 1);

    let o = ctxagg(
        &["--out", "a", "dump-maps", "--checkpoint", "a/checkpoint"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pgm = fs::read(dir.path().join("a/maps/scp_l2_gate.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n65535\n"));
    assert_eq!(pgm.len(), b"P5\n32 32\n65535\n".len() + 32 * 32 * 2);
    let gates = fs::read_to_string(dir.path().join("a/maps/hroie_gates.csv")).unwrap();
    assert_eq!(gates.lines().count(), 9);
}

#[test]
fn bad_config_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), r#"{"toy": {"chanels": 8}}"#).unwrap();
    let o = ctxagg(&["--config", "bad.json", "--out", "o", "train"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("chanels"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn eval_without_checkpoint_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let o = ctxagg(&["--out", "missing", "eval"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("missing").exists());
}
