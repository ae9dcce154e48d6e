use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn avssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avssl"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("AVSSL_DATA_ROOT")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = avssl(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn unknown_command_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = avssl(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
}

#[test]
fn count_params_prints_reference() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["count-params", "--preset", "large"]);
    assert!(text.contains("reference: 328M"), "{text}");
    assert!(text.contains("306685312"), "{text}");
}

#[test]
fn missing_data_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = avssl(dir.path(), &["pretrain", "--data", "nowhere"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_is_reproducible_and_greedy_equals_beam_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-data", "--count", "3", "--out", "data"]);
    ok(
        d,
        &[
            "gen-data", "--count", "2", "--start", "7000", "--out", "held",
        ],
    );
    for out in ["pre1", "pre2"] {
        ok(
            d,
            &["pretrain", "--data", "data", "--epochs", "1", "--out", out],
        );
    }
    let a = fs::read(d.join("pre1/pretrain-epoch0001.ckpt")).unwrap();
    let b = fs::read(d.join("pre2/pretrain-epoch0001.ckpt")).unwrap();
    assert_eq!(a, b);

    // data root from the environment
    let out = Command::new(env!("CARGO_BIN_EXE_avssl"))
        .args([
            "finetune",
            "--task",
            "audio",
            "--epochs",
            "1",
            "--init",
            "pre1/pretrain-epoch0001.ckpt",
            "--out",
            "ft",
        ])
        .current_dir(d)
        .env("AVSSL_DATA_ROOT", d.join("data"))
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let ckpt = "ft/finetune-audio.ckpt";
    let greedy = ok(d, &["decode", "--ckpt", ckpt, "--data", "held", "--greedy"]);
    let beam1 = ok(
        d,
        &["decode", "--ckpt", ckpt, "--data", "held", "--beam", "1"],
    );
    assert_eq!(greedy, beam1);
    assert_eq!(greedy.lines().count(), 2);

    ok(
        d,
        &[
            "eval", "--ckpt", ckpt, "--data", "held", "--beam", "2", "--out", "ev",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("ev/eval.json")).unwrap()).unwrap();
    assert_eq!(report["beam"], 2);
}
