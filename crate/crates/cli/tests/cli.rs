use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn ctn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctn")).args(args).env_remove("CTN_DATA_ROOT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ctn(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY: &str = r#"{"epochs": 2, "batch_size": 2, "learning_rate": 0.001,
  "model": {"n_vertices": 16, "encoder_channels": [2, 4, 4, 4], "gcn_blocks": 2, "gcn_layers": 2, "gcn_width": 8}}"#;

fn small_corpus(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["synth", "--count", "5", "--size", "32", "--n-vertices", "16", "--seed", "3", "--out", p(&data)]);
    data
}

#[test]
fn help_lists_every_subcommand() {
    let out = ok(&["--help"]);
    for cmd in ["synth", "select-exemplar", "train", "finetune", "infer", "eval", "ablate", "simulate-corrections", "serve"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn exit_codes_follow_error_class() {
    let bad_flag = ctn(&["train", "--bogus"]);
    assert_eq!(bad_flag.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = ctn(&["select-exemplar", "--data", p(&dir.path().join("nope"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error[data]: "));

    let data = small_corpus(dir.path());
    let no_exemplar = ctn(&["train", "--data", p(&data), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(no_exemplar.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_exemplar.stderr).starts_with("error[usage]: "));
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--count", "4", "--size", "32", "--seed", "7", "--out", p(d)]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 4 + 4 + 1);
    assert_eq!(ta, tb);
}

#[test]
fn eval_of_labels_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let out = ok(&["eval", "--json", "--data", p(&data), "--predictions", p(&data.join("labels"))]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["summary"]["count"], 5);
    assert_eq!(v["summary"]["mean_iou"], 1.0);
    assert_eq!(v["summary"]["worst_hd"], 0.0);
}

#[test]
fn data_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_corpus(dir.path());
    let out = Command::new(env!("CARGO_BIN_EXE_ctn"))
        .args(["select-exemplar", "--json"])
        .env("CTN_DATA_ROOT", &data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let meta: Value = serde_json::from_str(&fs::read_to_string(data.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["exemplar"], v["exemplar"]);
}

#[test]
fn train_infer_correct_finetune_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = small_corpus(d);
    let cfg = d.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    ok(&["select-exemplar", "--data", p(&data)]);

    let (ck, ck2, log) = (d.join("m.ckpt"), d.join("m2.ckpt"), d.join("train.ndjson"));
    let out = ok(&["train", "--json", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck), "--log", p(&log)]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["final"]["epoch"], 2);
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 2);
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&ck2)]);
    assert_eq!(fs::read(&ck).unwrap(), fs::read(&ck2).unwrap());

    let image = data.join("images/img_002.pgm");
    let (c1, c2, mask, overlay) = (d.join("c1.json"), d.join("c2.json"), d.join("mask.pgm"), d.join("o.png"));
    ok(&["infer", "--checkpoint", p(&ck), "--image", p(&image), "--out", p(&c1), "--mask", p(&mask), "--overlay", p(&overlay)]);
    ok(&["infer", "--checkpoint", p(&ck), "--image", p(&image), "--out", p(&c2)]);
    assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    let contour: Value = serde_json::from_slice(&fs::read(&c1).unwrap()).unwrap();
    assert_eq!(contour["points"].as_array().unwrap().len(), 16);
    assert!(fs::read(&mask).unwrap().starts_with(b"P5"));
    assert_eq!(&fs::read(&overlay).unwrap()[1..4], b"PNG");

    let no_corr = ctn(&["finetune", "--data", p(&data), "--checkpoint", p(&ck), "--out", p(&ck2)]);
    assert_eq!(no_corr.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_corr.stderr).contains("no corrections"));

    let sim = ok(&["simulate-corrections", "--json", "--data", p(&data), "--checkpoint", p(&ck), "--fraction", "0.5", "--mode", "full"]);
    let v: Value = serde_json::from_str(&sim).unwrap();
    assert_eq!(v["images"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_dir(data.join("corrections")).unwrap().count(), 2);

    let ft = d.join("ft.ckpt");
    ok(&["finetune", "--data", p(&data), "--config", p(&cfg), "--checkpoint", p(&ck), "--out", p(&ft)]);
    assert_ne!(fs::read(&ft).unwrap(), fs::read(&ck).unwrap());

    let csv = ok(&["eval", "--csv", "--data", p(&data), "--checkpoint", p(&ft), "--exclude-exemplar"]);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next(), Some("id,iou,hd"));

    let ab = ok(&["ablate", "--json", "--data", p(&data), "--config", p(&cfg), "--epochs", "1", "--drop", "none,edge"]);
    let rows: Value = serde_json::from_str(&ab).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 2);
    assert_eq!(rows[1]["drop"], "edge");
}
