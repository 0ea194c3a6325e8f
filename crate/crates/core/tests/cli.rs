use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use uniadet::io::formats::write_feature_file;
use uniadet::io::pnm::read_mask;
use uniadet::model::{FeatureStack, LayerFeatures};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uniadet"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    /// Small two-class corpus plus weights trained for a few epochs.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&[
            "synth",
            "--out",
            s(&root.join("data")),
            "--images-per-class",
            "16",
            "--size",
            "32",
            "--seed",
            "3",
        ]);
        ok(&[
            "train",
            "--manifest",
            s(&root.join("data/manifest.json")),
            "--provider",
            "synthetic",
            "--epochs",
            "3",
            "--out",
            s(&root.join("w.uadw")),
        ]);
        Fixture { _dir: dir, root }
    }

    fn manifest(&self) -> String {
        s(&self.root.join("data/manifest.json")).to_string()
    }

    fn weights(&self) -> String {
        s(&self.root.join("w.uadw")).to_string()
    }
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b", "c"] {
        let seed = if name == "c" { "9" } else { "5" };
        ok(&[
            "synth",
            "--out",
            s(&dir.path().join(name)),
            "--images-per-class",
            "6",
            "--size",
            "24",
            "--seed",
            seed,
        ]);
    }
    let a = tree(&dir.path().join("a"));
    assert!(a.len() > 6);
    assert_eq!(a, tree(&dir.path().join("b")));
    assert_ne!(a, tree(&dir.path().join("c")));
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = run(&["eval", "--manifest", s(&missing), "--weights", "w.uadw"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.json"));

    let o = run(&["synth", "--out", s(&dir.path().join("d")), "--classes", "0"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&[
        "train",
        "--manifest",
        "m.json",
        "--out",
        "w",
        "--provider",
        "imaginary",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn degenerate_features_exit_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let stack = |id: &str, zero: bool, shift: f32| {
        let g: Vec<f32> = if zero {
            vec![0.0; 4]
        } else {
            vec![1.0 + shift, 0.5, -0.2, 0.1]
        };
        let p: Vec<f32> = (0..16).map(|k| (k as f32 * 0.37 + shift).sin()).collect();
        FeatureStack::new(vec![LayerFeatures::new(1, 2, 2, g, p).unwrap()], 4, 4, id).unwrap()
    };
    let mut entries = Vec::new();
    for (i, (zero, label)) in [(false, 0), (true, 1), (false, 0), (false, 1)]
        .into_iter()
        .enumerate()
    {
        let id = format!("e{i}");
        write_feature_file(
            &stack(&id, zero, i as f32),
            &dir.path().join(format!("{id}.ufst")),
        )
        .unwrap();
        let mask = if label == 1 {
            format!(r#", "mask_path": "{id}.pgm""#)
        } else {
            String::new()
        };
        if label == 1 {
            fs::write(
                dir.path().join(format!("{id}.pgm")),
                b"P5\n4 4\n255\n\xff\xff\xff\xff\0\0\0\0\0\0\0\0\0\0\0\0",
            )
            .unwrap();
        }
        entries.push(format!(
            r#"{{"id": "{id}", "class_name": "c", "split": "train", "label": {label}, "feature_path": "{id}.ufst"{mask}}}"#
        ));
    }
    let manifest = dir.path().join("m.json");
    fs::write(
        &manifest,
        format!(r#"{{"root": ".", "entries": [{}]}}"#, entries.join(",")),
    )
    .unwrap();
    let o = run(&[
        "train",
        "--manifest",
        s(&manifest),
        "--epochs",
        "1",
        "--no-caa",
        "--out",
        s(&dir.path().join("w.uadw")),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn eval_reports_and_reproducibility() {
    let fx = Fixture::new();
    let (m, w) = (fx.manifest(), fx.weights());
    let zero = fx.root.join("zero");
    let csv = ok(&[
        "eval",
        "--manifest",
        &m,
        "--weights",
        &w,
        "--provider",
        "synthetic",
        "--repeat",
        "3",
        "--out",
        s(&zero),
    ]);
    assert_eq!(csv, fs::read_to_string(zero.join("report.csv")).unwrap());
    let r = report(&zero);
    let mean = &r["mean"];
    for (_, v) in mean["std"].as_object().unwrap() {
        assert!(v.is_null() || v.as_f64() == Some(0.0), "K=0 repeats differ: {v}");
    }
    let cfg = &r["config"];
    assert_eq!(cfg["tau"].as_f64().unwrap() as f32, 0.07);
    assert_eq!(cfg["aupro_fpr_limit"].as_f64(), Some(0.3));
    assert_eq!(cfg["training"]["epochs"].as_u64(), Some(3));
    assert_eq!(r["classes"].as_array().unwrap().len(), 2);

    let few = fx.root.join("few");
    ok(&[
        "eval",
        "--manifest",
        &m,
        "--weights",
        &w,
        "--provider",
        "synthetic",
        "--shots",
        "1",
        "--repeat",
        "3",
        "--seed",
        "4",
        "--out",
        s(&few),
    ]);
    let draws = report(&few)["config"]["reference_draws"]
        .as_array()
        .unwrap()
        .clone();
    assert_eq!(draws.len(), 6);
    let first_class: Vec<_> = draws
        .iter()
        .filter(|d| d["category"] == draws[0]["category"])
        .map(|d| d["ids"].clone())
        .collect();
    assert_eq!(first_class.len(), 3);
    assert!(
        first_class[0] != first_class[1] || first_class[1] != first_class[2],
        "three repeats drew the same reference"
    );

    let again = fx.root.join("few2");
    ok(&[
        "--threads",
        "1",
        "eval",
        "--manifest",
        &m,
        "--weights",
        &w,
        "--provider",
        "synthetic",
        "--shots",
        "1",
        "--repeat",
        "3",
        "--seed",
        "4",
        "--out",
        s(&again),
    ]);
    assert_eq!(
        fs::read(few.join("report.json")).unwrap(),
        fs::read(again.join("report.json")).unwrap()
    );
}

#[test]
fn zero_shot_eval_ignores_train_images() {
    let fx = Fixture::new();
    let manifest: Value = serde_json::from_str(&fs::read_to_string(fx.manifest()).unwrap()).unwrap();
    for e in manifest["entries"].as_array().unwrap() {
        if e["split"] == "train" {
            fs::remove_file(fx.root.join("data").join(e["image_path"].as_str().unwrap())).unwrap();
        }
    }
    ok(&[
        "eval",
        "--manifest",
        &fx.manifest(),
        "--weights",
        &fx.weights(),
        "--provider",
        "synthetic",
    ]);
    let o = run(&[
        "eval",
        "--manifest",
        &fx.manifest(),
        "--weights",
        &fx.weights(),
        "--provider",
        "synthetic",
        "--shots",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn predict_bank_and_fusion() {
    let fx = Fixture::new();
    let image = fx
        .root
        .join("data/images")
        .read_dir()
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let bank = fx.root.join("b.ufsb");
    let out = ok(&[
        "bank",
        "--manifest",
        &fx.manifest(),
        "--provider",
        "synthetic",
        "--class",
        "class00",
        "--shots",
        "2",
        "--out",
        s(&bank),
    ]);
    assert!(out.starts_with("2 references"));

    let plain = fx.root.join("plain.pgm");
    let fused_off = fx.root.join("off.pgm");
    let fused = fx.root.join("fused.pgm");
    let base = [
        "predict",
        "--image",
        s(&image),
        "--weights",
        &fx.weights(),
        "--provider",
        "synthetic",
    ];
    let a = ok(&[&base[..], &["--out", s(&plain)]].concat());
    let b = ok(&[
        &base[..],
        &["--bank", s(&bank), "--lambda-f", "0", "--out", s(&fused_off)],
    ]
    .concat());
    ok(&[&base[..], &["--bank", s(&bank), "--out", s(&fused)]].concat());
    assert_eq!(a, b);
    assert_eq!(fs::read(&plain).unwrap(), fs::read(&fused_off).unwrap());

    let map = read_mask(&plain).unwrap();
    assert_eq!((map.height, map.width), (32, 32));
    let json: Value =
        serde_json::from_str(&fs::read_to_string(plain.with_extension("json")).unwrap()).unwrap();
    assert_eq!(
        (json["height"].as_u64(), json["width"].as_u64()),
        (Some(32), Some(32))
    );
    let fj: Value = serde_json::from_str(&fs::read_to_string(fused.with_extension("json")).unwrap()).unwrap();
    assert_eq!(fj["few_shot"], Value::Bool(true));
}

#[test]
fn ablation_flags_and_layer_selection() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&[
        "synth",
        "--out",
        s(&root.join("d")),
        "--classes",
        "1",
        "--images-per-class",
        "12",
        "--size",
        "32",
    ]);
    let m = root.join("d/manifest.json");
    ok(&[
        "train",
        "--manifest",
        s(&m),
        "--provider",
        "synthetic",
        "--layers",
        "24",
        "--no-dcs",
        "--epochs",
        "2",
        "--out",
        s(&root.join("w.uadw")),
    ]);
    let w = uniadet::io::formats::read_weight_file(&root.join("w.uadw")).unwrap();
    assert_eq!(w.block_indices(), vec![24]);
    assert_eq!(w.layers[0].cls, w.layers[0].seg);
    assert!(root.join("w.train.csv").exists());
    let csv = ok(&[
        "eval",
        "--manifest",
        s(&m),
        "--weights",
        s(&root.join("w.uadw")),
        "--provider",
        "synthetic",
        "--layers",
        "24",
    ]);
    assert!(csv.starts_with("category,"));
    let o = run(&[
        "eval",
        "--manifest",
        s(&m),
        "--weights",
        s(&root.join("w.uadw")),
        "--provider",
        "synthetic",
        "--layers",
        "12",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_configuration() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    ok(&[
        "synth",
        "--out",
        s(&root.join("d")),
        "--classes",
        "1",
        "--images-per-class",
        "12",
        "--size",
        "32",
    ]);
    let out = root.join("ablation.csv");
    let stdout = ok(&[
        "ablate",
        "--manifest",
        s(&root.join("d/manifest.json")),
        "--provider",
        "synthetic",
        "--epochs",
        "1",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(&out).unwrap();
    assert_eq!(stdout, csv);
    let names: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "shared",
            "dcs",
            "dcs-dhf",
            "dcs-dhf-caa",
            "dcs-dhf-caa-1shot",
            "last1",
            "last2",
            "last3",
            "last4",
            "last5"
        ]
    );
    assert!(csv.starts_with("config,dcs,dhf,caa,blocks,shots,"));
}
