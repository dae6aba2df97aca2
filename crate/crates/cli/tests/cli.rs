mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;

fn mcforge(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcforge"))
        .arg("--config")
        .arg(cfg)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = mcforge(cfg, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn commands_chain_from_image_to_segmentation() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let cfg = dir.join("cfg.json");
    fast_config().save(&cfg).unwrap();
    save(&two_phase(["streak-h", "grain"], 256, 7), dir, "image.pgm");

    let out = ok(&cfg, &["step1", &p("image.pgm"), "--out", &p("s1")]);
    assert!(out.starts_with("suggested K 2"), "{out}");
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("s1/summary.json")).unwrap()).unwrap();
    let regions = summary["regions"].as_array().unwrap();
    let first = &regions[0];
    let other = regions.iter().find(|r| r["label"] != first["label"]).unwrap();

    ok(&cfg, &["catalog", "init", &p("cat"), "--patch-size", "32"]);
    assert!(!mcforge(&cfg, &["catalog", "init", &p("cat")]).status.success());
    for (name, r) in [("first", first), ("second", other)] {
        let id = r["id"].to_string();
        ok(&cfg, &["catalog", "add-mc", &p("cat"), "--name", name, "--from", &p("s1"), "--region", &id]);
    }
    let list = ok(&cfg, &["catalog", "list", &p("cat")]);
    assert!(list.contains("2 classes"), "{list}");

    let out = ok(&cfg, &["train-classifier", "--catalog", &p("cat"), "--epochs", "3"]);
    assert!(out.starts_with("registered classifier model 0"), "{out}");
    ok(&cfg, &["step2", &p("s1"), "--catalog", &p("cat"), "--dry-run"]);
    assert!(dir.join("s1/predictions.json").is_file());

    ok(&cfg, &["augment", "--catalog", &p("cat"), "--out", &p("aug"), "--count", "20"]);
    assert!(dir.join("aug/manifest.json").is_file());
    ok(&cfg, &["train-segnet", "--data", &p("aug"), "--out", &p("seg/model.ckpt"), "--epochs", "1"]);
    assert!(dir.join("seg/model.metrics.json").is_file());
    let out = ok(&cfg, &["segment", &p("image.pgm"), "--checkpoint", &p("seg/model.ckpt"), "--out", &p("segout")]);
    assert_eq!(out.lines().count(), 2, "{out}");
    assert!(dir.join("segout/mask.pgm").is_file());

    let check = ok(&cfg, &["catalog", "check", &p("cat")]);
    assert!(check.starts_with("ok: version"), "{check}");
    let bad = mcforge(&cfg, &["catalog", "decide", &p("cat"), "99", "--assign", "0"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("error:"));
}
