use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use abswift::dataset::read_sample;

fn abswift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abswift"))
        .args(args)
        .env("ABSWIFT_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = abswift(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            for (k, v) in tree(&p) {
                out.insert(format!("{}/{k}", p.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap());
        }
    }
    out
}

fn json_objects(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    ok(&["gen-data", "--out", s(&a), "--n-samples", "10", "--seed", "4", "--desk"]);
    ok(&["gen-data", "--out", s(&b), "--n-samples", "10", "--seed", "4", "--desk"]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 11);
    assert_eq!(ta, tb);
    let manifest = String::from_utf8(ta["manifest.txt"].clone()).unwrap();
    assert_eq!(manifest.lines().count(), 10);
}

#[test]
fn train_eval_predict_pipeline() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    ok(&["gen-data", "--out", s(&data), "--n-samples", "12", "--seed", "1", "--desk"]);
    let cfg = t.path().join("run.cfg");
    fs::write(&cfg, "preset = desk\nepochs = 2\nn_vol = 256\nmax_lr = 1e-3\n").unwrap();

    let (r1, r2) = (t.path().join("r1"), t.path().join("r2"));
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&r1)]);
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&r2)]);
    assert_eq!(fs::read(r1.join("weights.bin")).unwrap(), fs::read(r2.join("weights.bin")).unwrap());
    let csv = fs::read_to_string(r1.join("loss.csv")).unwrap();
    let n_train = fs::read_to_string(data.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("train/"))
        .count();
    assert_eq!(csv.lines().next(), Some("step,lr,loss"));
    assert_eq!(csv.lines().count(), 1 + 2 * n_train);

    let truth = t.path().join("truth");
    ok(&["eval", "--data", s(&data), "--weights", s(&r1.join("weights.bin")), "--out", s(&truth), "--baseline", "truth"]);
    for v in json_objects(&fs::read_to_string(truth.join("metrics.jsonl")).unwrap()) {
        assert_eq!(v["value"].as_f64(), Some(0.0), "{v}");
    }

    let ev = t.path().join("eval");
    ok(&["eval", "--data", s(&data), "--weights", s(&r1.join("weights.bin")), "--out", s(&ev)]);
    let lines = json_objects(&fs::read_to_string(ev.join("metrics.jsonl")).unwrap());
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(ev.join("aggregate.json")).unwrap()).unwrap();
    for row in agg["all"].as_array().unwrap() {
        let vals: Vec<f64> = lines
            .iter()
            .filter(|l| l["field"] == row["field"] && l["metric"] == row["metric"])
            .map(|l| l["value"].as_f64().unwrap())
            .collect();
        assert_eq!(vals.len() as u64, row["count"].as_u64().unwrap());
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((mean - row["mean"].as_f64().unwrap()).abs() <= 1e-12 * mean.abs().max(1.0));
    }

    let first_test = fs::read_to_string(data.join("manifest.txt"))
        .unwrap()
        .lines()
        .find(|l| l.starts_with("test/"))
        .unwrap()
        .to_string();
    let sample_path = data.join(first_test);
    let pred = t.path().join("slice.csv");
    ok(&[
        "predict", "--weights", s(&r1.join("weights.bin")), "--sample", s(&sample_path),
        "--slice", "z=5", "--spacing", "4", "--out", s(&pred),
    ]);
    let sample = read_sample(&sample_path).unwrap();
    let text = fs::read_to_string(&pred).unwrap();
    let mut rows = text.lines();
    assert_eq!(rows.next(), Some("x,y,z,vx,vy,vz,p,theta,k,eps"));
    let mut count = 0;
    for row in rows {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 10);
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(!sample.geometry.contains(&v[..3]));
        assert!(v[8] > 0.0 && v[9] > 0.0);
        count += 1;
    }
    assert!(count > 0);
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(abswift(&["--help"]).status.code(), Some(0));
    assert_eq!(abswift(&["train"]).status.code(), Some(1));
    let missing = abswift(&["train", "--data", s(&t.path().join("nope")), "--out", s(&t.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("manifest.txt"));
    let cfg = t.path().join("bad.cfg");
    fs::write(&cfg, "variant = 0\n").unwrap();
    let data = t.path().join("data");
    assert_eq!(abswift(&["gen-data", "--out", s(&data), "--n-samples", "6", "--desk"]).status.code(), Some(2));
    ok(&["gen-data", "--out", s(&data), "--n-samples", "10", "--desk"]);
    let bad = abswift(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&t.path().join("o"))]);
    assert_eq!(bad.status.code(), Some(1));
}
