//! Drives the `vpu` binary end to end and checks outputs and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vpu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vpu")).args(args).output().expect("vpu binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = vpu(args);
    assert_eq!(code(&out), 0, "vpu {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"epochs": 1, "batch_size": 2, "rounds": 2,
  "model": {"d_model": 8, "ffn_hidden": 16, "dma_layers": 1, "decoder_scales": [4], "max_prompts": 8}}"#;

#[test]
fn gen_train_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let cfg = p("cfg.json");
    fs::write(&cfg, SMALL).unwrap();
    ok(&["gen-data", "--out", s(&p("train")), "--count", "6", "--seed", "3"]);
    ok(&["gen-data", "--out", s(&p("test")), "--count", "4", "--seed", "900", "--split", "test"]);
    ok(&["train", "--data", s(&p("train")), "--out", s(&p("m.vpuf")), "--config", s(&cfg), "--seed", "5", "--log", s(&p("log.csv"))]);
    let log = fs::read_to_string(p("log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,lr,nfl,dice,p2cl,total\n"));
    assert_eq!(log.lines().count(), 1 + 3);

    for protocol in ["click", "mixed"] {
        let report = p(&format!("{protocol}.json"));
        ok(&[
            "eval", "--checkpoint", s(&p("m.vpuf")), "--data", s(&p("test")), "--protocol", protocol,
            "--targets", "0.85,0.90", "--max-interactions", "6", "--out", s(&report),
            "--curve", s(&p("curve.csv")), "--sessions", s(&p("sessions")),
        ]);
        let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
        assert_eq!(r["instances"], 4);
        assert_eq!(r["max_interactions"], 6);
        assert_eq!(r["iou_at_k"].as_array().unwrap().len(), 6);
        for t in ["0.85", "0.90"] {
            let noc = r["noc"][t].as_f64().unwrap();
            assert!((1.0..=6.0).contains(&noc));
            assert!(r["nof"][t].as_u64().unwrap() <= 4);
        }
    }
    let curve = fs::read_to_string(p("curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("k,miou"));
    assert_eq!(curve.lines().count(), 7);
    let session: serde_json::Value = serde_json::from_slice(&fs::read(p("sessions").join("00002.json")).unwrap()).unwrap();
    assert_eq!(session["instance_id"], "00002");
    assert!(!session["steps"].as_array().unwrap().is_empty());
}

#[test]
fn encode_writes_the_vector() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--out", s(dir.path()), "--count", "1"]);
    let img = dir.path().join("00000_image.png");
    let out = dir.path().join("v.csv");
    ok(&["encode", "--image", s(&img), "--prompt", "click:+:12,30", "--out", s(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<(String, usize, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 64 + 64 + 2);
    let get = |c: &str, i: usize| rows.iter().find(|r| r.0 == c && r.1 == i).unwrap().2;
    // the anchor has zero distance to itself
    assert_eq!(get("q_h", 12), 1.0);
    assert_eq!(get("q_v", 30), 1.0);
    assert_eq!(get("q_b", 0), 1.0);

    ok(&["encode", "--image", s(&img), "--prompt", "scribble:-:3,3;20,9", "--seed", "4", "--out", s(&out)]);
    let first = fs::read(&out).unwrap();
    ok(&["encode", "--image", s(&img), "--prompt", "scribble:-:3,3;20,9", "--seed", "4", "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), first);
}

#[test]
fn gradcheck_passes_on_the_miniature_model() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("loss.p2cl"));
    assert!(text.contains("max relative error"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    ok(&["gen-data", "--out", s(&p("d")), "--count", "2"]);

    // validation
    fs::write(p("bad.json"), r#"{"lr": -1}"#).unwrap();
    assert_eq!(code(&vpu(&["train", "--data", s(&p("d")), "--out", s(&p("m")), "--config", s(&p("bad.json"))])), 2);
    assert_eq!(code(&vpu(&["encode", "--image", s(&p("d/00000_image.png")), "--prompt", "click:+:99,1", "--out", s(&p("v"))])), 2);
    assert_eq!(code(&vpu(&["encode", "--image", s(&p("d/00000_image.png")), "--prompt", "tap", "--out", s(&p("v"))])), 2);

    // IO and corruption
    assert_eq!(code(&vpu(&["train", "--data", s(&p("missing")), "--out", s(&p("m"))])), 3);
    fs::write(p("junk.vpuf"), b"junk").unwrap();
    let eval = vpu(&["eval", "--checkpoint", s(&p("junk.vpuf")), "--data", s(&p("d")), "--out", s(&p("r.json"))]);
    assert_eq!(code(&eval), 3);
    fs::write(p("d/00001_mask.png"), b"tampered").unwrap();
    assert_eq!(code(&vpu(&["train", "--data", s(&p("d")), "--out", s(&p("m"))])), 3);

    // numeric: an absurd learning rate drives the weights to infinity
    ok(&["gen-data", "--out", s(&p("e")), "--count", "2"]);
    fs::write(p("cfg.json"), SMALL).unwrap();
    let out = vpu(&["train", "--data", s(&p("e")), "--out", s(&p("m")), "--config", s(&p("cfg.json")), "--lr", "1e300", "--epochs", "2"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    // usage errors come from the argument parser
    assert_eq!(code(&vpu(&["frobnicate"])), 2);
}
