use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn incseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn incseg")
}

fn ok(args: &[&str]) -> Output {
    let out = incseg(args);
    assert!(
        out.status.success(),
        "incseg {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Small synthetic dataset plus a {background, road} checkpoint.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out",
        p(&data),
        "--size",
        "64",
        "--pretrain",
        "3",
        "--incremental",
        "2",
        "--rect-density",
        "12",
        "--min-new-class-pixels",
        "40",
        "--seed",
        "4",
    ]);
    let manifest = data.join("manifest.json");
    let ckpt = dir.join("old.ckpt");
    ok(&[
        "pretrain",
        "--manifest",
        p(&manifest),
        "--out",
        p(&ckpt),
        "--classes",
        "background,road",
        "--arch",
        "tiny",
        "--lr",
        "1e-3",
        "--epochs",
        "1",
        "--samples-per-epoch",
        "40",
        "--crop",
        "32",
        "--batch",
        "4",
    ]);
    (manifest, ckpt)
}

const FAST: &[&str] = &[
    "--seeds",
    "1",
    "--lr",
    "3e-4",
    "--steps",
    "2",
    "--iterations",
    "2",
    "--selection-window",
    "2",
    "--batch",
    "2",
    "--crop",
    "32",
    "--window",
    "64",
];

#[test]
fn protocol_commands_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = fixture(tmp.path());

    let pre = read_json(&PathBuf::from(format!("{}.report.json", ckpt.display())));
    assert_eq!(pre["command"], "pretrain");
    assert_eq!(pre["result"]["updates"], 10);
    assert_eq!(pre["inputs"]["manifest"].as_str().unwrap().len(), 64);
    assert_eq!(pre["config"]["arch"]["stem_channels"], 8);

    let report = tmp.path().join("inc.json");
    let csv = tmp.path().join("inc.csv");
    let mut args = vec![
        "increment",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--budget",
        "20",
        "--regularizer",
        "sdr",
        "--out",
        p(&report),
        "--csv",
        p(&csv),
    ];
    args.extend_from_slice(FAST);
    ok(&args);
    let inc = read_json(&report);
    assert_eq!(inc["result"]["new_class"], "building");
    assert_eq!(inc["result"]["budget"], 20);
    assert_eq!(inc["result"]["images"].as_array().unwrap().len(), 2);
    assert_eq!(inc["config"]["finetune"]["loss"]["regularizer"], "sdr");
    assert!(inc["inputs"]["checkpoint"].is_string());
    let miou = inc["result"]["mean_iou"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() > 1);

    let curve = tmp.path().join("sweep").join("curve.csv");
    let mut args = vec![
        "sweep",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--budgets",
        "5,20",
        "--out",
        p(&curve),
    ];
    args.extend_from_slice(FAST);
    ok(&args);
    let rows: Vec<String> = std::fs::read_to_string(&curve)
        .unwrap()
        .lines()
        .map(str::to_owned)
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].starts_with("budget,miou_mean"));
    assert!(rows[1].starts_with("5,") && rows[2].starts_with("20,"));
    assert!(std::fs::read_to_string(curve.with_extension("svg"))
        .unwrap()
        .contains("<svg"));
    assert_eq!(
        read_json(&curve.with_extension("json"))["result"]
            .as_array()
            .unwrap()
            .len(),
        2
    );

    let eval = tmp.path().join("eval.json");
    ok(&[
        "eval",
        "--checkpoint",
        p(&ckpt),
        "--manifest",
        p(&manifest),
        "--split",
        "pretrain",
        "--window",
        "64",
        "--out",
        p(&eval),
    ]);
    let ev = read_json(&eval);
    assert_eq!(ev["result"]["per_image"].as_object().unwrap().len(), 3);
    assert!(ev["result"]["per_class"]["road"].is_number());
}

#[test]
fn runs_are_deterministic_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (manifest, ckpt) = fixture(tmp.path());
    let again = tmp.path().join("again.ckpt");
    ok(&[
        "pretrain",
        "--manifest",
        p(&manifest),
        "--out",
        p(&again),
        "--classes",
        "background,road",
        "--arch",
        "tiny",
        "--lr",
        "1e-3",
        "--epochs",
        "1",
        "--samples-per-epoch",
        "40",
        "--crop",
        "32",
        "--batch",
        "4",
    ]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(&again).unwrap()
    );

    let results: Vec<Value> = ["a.json", "b.json"]
        .iter()
        .map(|name| {
            let out = tmp.path().join(name);
            let mut args = vec![
                "increment",
                "--checkpoint",
                p(&ckpt),
                "--manifest",
                p(&manifest),
                "--budget",
                "10",
                "--out",
                p(&out),
            ];
            args.extend_from_slice(FAST);
            ok(&args);
            read_json(&out)["result"].clone()
        })
        .collect();
    assert_eq!(results[0], results[1]);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = incseg(&[
        "eval",
        "--checkpoint",
        p(&missing),
        "--manifest",
        p(&missing),
        "--out",
        p(&tmp.path().join("e.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest"));

    let out = incseg(&["increment", "--budget", "ten"]);
    assert_eq!(out.status.code(), Some(2));

    let out = incseg(&[
        "synth",
        "--out",
        p(tmp.path()),
        "--size",
        "16",
        "--pretrain",
        "1",
        "--incremental",
        "1",
        "--min-new-class-pixels",
        "100000",
    ]);
    assert_eq!(out.status.code(), Some(1));
}
