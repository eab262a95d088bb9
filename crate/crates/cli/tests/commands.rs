use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dgp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgp")).args(args).output().expect("run dgp")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_train_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.json");
    let pred = dir.path().join("pred");

    let out = dgp(&["gen-data", "--n", "30", "--grid", "16", "--out-grid", "8", "--kle", "6", "--seed", "1", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n"], 30);

    let out = dgp(&[
        "train", "--data", s(&data), "--target", "p", "--dims", "2,2", "--inducing", "8,8", "--iters", "10", "--out", s(&model),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("model.elbo.csv").exists());
    assert!(dir.path().join("model.ard.csv").exists());

    let out = dgp(&["predict", "--model", s(&model), "--inputs", s(&data.join("K.dgpm")), "--out", s(&pred)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(pred.join("mean.dgpm").exists());
    assert!(pred.join("variance.dgpm").exists());
}

#[test]
fn usage_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dgp(&["train", "--bogus"]).status.code(), Some(2));
    let out = dgp(&["gen-data", "--n", "4", "--grid", "16", "--out-grid", "5", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = dgp(&["predict", "--model", s(&dir.path().join("missing.json")), "--inputs", "x", "--out", s(dir.path())]);
    assert_ne!(out.status.code(), Some(0));
}
