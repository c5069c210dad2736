use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const TINY: &str = r#"
[model]
depth = 2
base_channels = 4

[train]
total_iterations = 4
batch_size = 4
"#;

fn mtseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = mtseg(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree_digest(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    ok(&[
        "generate-data",
        "--out",
        s(&data),
        "--patients",
        "3",
        "--val-patients",
        "1",
        "--images-per-patient",
        "4",
        "--side",
        "32",
        "--seed",
        "5",
    ]);
    let config = root.join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    Fixture {
        _tmp: tmp,
        root,
        data,
        config,
    }
}

#[test]
fn generate_data_counts_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&[
            "generate-data",
            "--out",
            s(d),
            "--patients",
            "7",
            "--images-per-patient",
            "40",
            "--seed",
            "9",
        ]);
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["samples"].as_array().unwrap().len(), 280);
    assert_eq!(manifest["train_patients"].as_array().unwrap().len(), 5);
    assert_eq!(manifest["val_patients"].as_array().unwrap().len(), 2);
    assert_eq!(tree_digest(&a), tree_digest(&b));

    let o = mtseg(&["generate-data", "--out", s(&a), "--patients", "2"]);
    assert_eq!(o.status.code(), Some(1));
    ok(&[
        "generate-data",
        "--out",
        s(&a),
        "--patients",
        "2",
        "--force",
    ]);
}

#[test]
fn train_evaluate_predict_pipeline() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&run),
        "--mode",
        "semi",
        "--labels",
        "3",
    ]);
    for name in ["config.toml", "train.log", "checkpoint/manifest.json"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let log = fs::read_to_string(run.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let ck = run.join("checkpoint");
    let e1 = f.root.join("eval1");
    let e2 = f.root.join("eval2");
    for e in [&e1, &e2] {
        ok(&[
            "evaluate",
            "--checkpoint",
            s(&ck),
            "--data",
            s(&f.data),
            "--out",
            s(e),
        ]);
    }
    let csv = fs::read(e1.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read(e2.join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 + 1);
    assert!(text.starts_with("id,dice,"));

    let pred = f.root.join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        s(&ck),
        "--input",
        s(&f.data.join("images")),
        "--out",
        s(&pred),
        "--overlay",
    ]);
    let m = mtseg::data::io::read_rgb_png(&pred.join("p2_0000_overlay.png")).unwrap();
    assert_eq!((m.height, m.width), (32, 32));

    let raw = png_gray_values(&pred.join("p2_0000.png"));
    assert!(raw.iter().all(|&v| v == 0 || v == 255));

    // Scoring the written masks reproduces evaluate.
    let (_, samples) = mtseg::data::io::read_dataset(&f.data).unwrap();
    let gt: BTreeMap<_, _> = samples
        .into_iter()
        .map(|x| (x.id.clone(), x.mask.unwrap()))
        .collect();
    let triples: Vec<_> = (0..4)
        .map(|i| {
            let id = format!("p2_{i:04}");
            let pred = mtseg::data::io::read_mask_png(&pred.join(format!("{id}.png"))).unwrap();
            (id.clone(), pred, gt[&id].clone())
        })
        .collect();
    let report = mtseg::metrics::evaluate_masks(&triples).unwrap();
    assert_eq!(report.to_csv(), text);
}

fn png_gray_values(path: &Path) -> Vec<u8> {
    let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(path).unwrap()));
    let mut reader = decoder.read_info().unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    buf
}

#[test]
fn resolved_config_snapshot_reproduces_checkpoint() {
    let f = fixture();
    let a = f.root.join("a");
    let b = f.root.join("b");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&a),
        "--mode",
        "fully",
    ]);
    ok(&[
        "train",
        "--config",
        s(&a.join("config.toml")),
        "--out",
        s(&b),
    ]);
    assert_eq!(
        tree_digest(&a.join("checkpoint")),
        tree_digest(&b.join("checkpoint"))
    );
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 0.1\nmomentun = 0.9\n").unwrap();
    let o = mtseg(&[
        "train",
        "--config",
        s(&bad),
        "--data",
        s(&f.data),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("train.learning_rate") && err.contains("train.momentun"),
        "{err}"
    );
}

#[test]
fn missing_external_mask_dir_is_named() {
    let f = fixture();
    let missing = f.root.join("no-masks");
    let o = mtseg(&[
        "train",
        "--config",
        s(&f.config),
        "--images",
        s(&f.data.join("images")),
        "--masks",
        s(&missing),
        "--out",
        s(&f.root.join("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
}

#[test]
fn predict_rejects_indivisible_sizes() {
    let f = fixture();
    let run = f.root.join("run");
    ok(&[
        "train",
        "--config",
        s(&f.config),
        "--data",
        s(&f.data),
        "--out",
        s(&run),
        "--mode",
        "fully",
    ]);
    let odd = f.root.join("odd.png");
    let img = mtseg::tensor::FeatureMap::filled(3, 10, 12, 0.5f32);
    mtseg::data::io::write_rgb_png(&odd, &img).unwrap();
    let o = mtseg(&[
        "predict",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--input",
        s(&odd),
        "--out",
        s(&f.root.join("p")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("divisible"));
}

#[test]
fn rasterize_writes_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let ann = tmp.path().join("f1.json");
    fs::write(
        &ann,
        r#"{"image_id":"f1","height":4,"width":4,"shapes":[{"label":"blood","points":[[0,0],[3,0],[3,3],[0,3]]}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    ok(&["rasterize", "--annotation", s(&ann), "--out", s(&out)]);
    let m = mtseg::data::io::read_mask_png(&out.join("f1.png")).unwrap();
    assert!(m.foreground() > 0);

    fs::write(
        &ann,
        r#"{"image_id":"f1","height":4,"width":4,"shapes":[{"label":"blood","points":[[0,0]]}]}"#,
    )
    .unwrap();
    let o = mtseg(&["rasterize", "--annotation", s(&ann), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shapes[0]"));
}

#[test]
fn experiment_matrix_and_failures() {
    let f = fixture();
    let spec = f.root.join("spec.toml");
    fs::write(
        &spec,
        format!(
            "name = \"tiny\"\nbudgets = [3, \"all\"]\nmodes = [\"fully\", \"semi\"]\nseeds = [1]\n{TINY}\n[data.dataset]\ndir = \"{}\"\n",
            s(&f.data)
        ),
    )
    .unwrap();
    let out = f.root.join("exp");
    let o = ok(&["experiment", "--config", s(&spec), "--out", s(&out)]);
    let results = fs::read_to_string(out.join("results.csv")).unwrap();
    let lines: Vec<&str> = results.lines().collect();
    assert_eq!(
        lines[0],
        "budget,mode,seed,dice,miou,sensitivity,precision,hd"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("3,fully,1,") && lines[4].starts_with("all,semi,1,"));
    for name in [
        "summary.md",
        "loss_curves.svg",
        "dice_by_budget.svg",
        "provenance.json",
        "cells/3-semi-seed1/train.log",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let summary = String::from_utf8_lossy(&o.stdout);
    assert_eq!(
        summary
            .lines()
            .filter(|l| l.starts_with("| 3 ") || l.starts_with("| all "))
            .count(),
        4
    );

    // A budget larger than the pool fails its cells; the others still run.
    let bad = f.root.join("bad.toml");
    fs::write(
        &bad,
        fs::read_to_string(&spec)
            .unwrap()
            .replace("[3, \"all\"]", "[3, 500]"),
    )
    .unwrap();
    let out2 = f.root.join("exp2");
    let o = mtseg(&["experiment", "--config", s(&bad), "--out", s(&out2)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(
        fs::read_to_string(out2.join("results.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );
    assert_eq!(
        fs::read_to_string(out2.join("failures.txt"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}
