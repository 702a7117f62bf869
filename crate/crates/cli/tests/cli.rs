use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use compose_probe_core::crops::CropRect;
use compose_probe_core::embedding::{crop_key, text_key, EmbeddingKind, EmbeddingMatrix, EmbeddingRecord, EmbeddingStore};
use compose_probe_core::eval::{synthetic_instances, write_dataset, RetrievalInstance};
use serde_json::Value;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_compose-probe")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).expect("file exists")).expect("valid json")
}

fn core_data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn global_record(key: String, kind: EmbeddingKind, row: Vec<f32>) -> EmbeddingRecord {
    EmbeddingRecord::new(key, kind, EmbeddingMatrix::from_rows(&[row]).expect("one row")).expect("valid record")
}

/// Global image and caption embeddings for every instance, picked by `vec`.
fn write_store(path: &Path, data: &[RetrievalInstance], vec: impl Fn(usize, bool) -> Vec<f32>) {
    let full = CropRect::full(224, 224);
    let mut store = EmbeddingStore::new();
    for (i, inst) in data.iter().enumerate() {
        let neg_image = inst.negative_image.as_deref().expect("two-sided instance");
        store.insert(global_record(crop_key(&inst.image, full), EmbeddingKind::GlobalImage, vec(i, true))).unwrap();
        store.insert(global_record(crop_key(neg_image, full), EmbeddingKind::GlobalImage, vec(i, false))).unwrap();
        store.insert(global_record(text_key(&inst.caption), EmbeddingKind::GlobalText, vec(i, true))).unwrap();
        store.insert(global_record(text_key(&inst.negative_caption), EmbeddingKind::GlobalText, vec(i, false))).unwrap();
    }
    store.write(path).unwrap();
}

fn oracle_vec(_: usize, positive: bool) -> Vec<f32> {
    if positive {
        vec![1.0, 0.0, 0.0]
    } else {
        vec![0.0, 1.0, 0.0]
    }
}

fn oracle_fixture(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let data = synthetic_instances(n, "color");
    let dataset = dir.join("data.jsonl");
    write_dataset(&dataset, &data).unwrap();
    let store = dir.join("emb.emb1");
    write_store(&store, &data, oracle_vec);
    (dataset, store)
}

#[test]
fn plan_crops_counts_and_output() {
    let o = run(&["plan-crops", "--width", "224", "--height", "224", "--placement", "overlap"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("total: 270"), "{}", stdout(&o));
    let o = run(&["plan-crops", "--width", "224", "--height", "224"]);
    assert!(stdout(&o).contains("total: 86"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("crops.json");
    let o = run(&["plan-crops", "--width", "300", "--height", "250", "--include-full-image", "--out", p(&out)]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("full: 1"), "{text}");
    let total: usize = text.lines().find_map(|l| l.strip_prefix("total: ")).unwrap().parse().unwrap();
    let rects = read_json(&out);
    assert_eq!(rects.as_array().unwrap().len(), total);
    assert!(rects.as_array().unwrap().iter().any(|r| r["w"] == 300 && r["h"] == 250));
    let manifest = read_json(&dir.path().join("crops.json.manifest.json"));
    assert_eq!(manifest["subcommand"], "plan-crops");
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&run(&["plan-crops", "--height", "224"])), 2);
    assert_eq!(code(&run(&["segment", "--caption", ""])), 2);
    assert_eq!(code(&run(&["eval", "--synthetic", "4", "--scorer", "global"])), 2);
    assert_eq!(code(&run(&["build-biscor", "--synthetic-scenes", "10", "--n", "0", "--out", "/tmp/unused"])), 2);
    assert_eq!(code(&run(&["train", "--layers", "0"])), 2);
    assert_eq!(code(&run(&["--jobs", "0", "plan-crops", "--width", "1", "--height", "1"])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
}

#[test]
fn segment_example_and_corpus() {
    let o = run(&["segment", "--caption", "a black cat and a white dog"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let lines: Vec<&str> = ["black cat", "white dog", "a black cat and a white dog"]
        .iter()
        .map(|s| out.find(s).map(|_| *s).unwrap_or_else(|| panic!("{s:?} missing from {out}")))
        .collect();
    assert_eq!(lines.len(), 3);

    let o = run(&["segment", "--corpus", p(&core_data("segment_golden.json"))]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("corpus:")).expect("summary line");
    let (got, total) = line["corpus: ".len()..].split(' ').next().unwrap().split_once('/').unwrap();
    assert_eq!(got, total);
}

#[test]
fn perfect_oracle_scores_every_metric_at_100() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, store) = oracle_fixture(dir.path(), 20);
    let out = dir.path().join("run");
    let o = run(&["eval", "--dataset", p(&dataset), "--scorer", "global", "--encoder", p(&store), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    for metric in ["i2t", "t2i", "group"] {
        assert_eq!(report["average"][metric].as_f64(), Some(100.0), "{metric}");
    }
    assert!(out.join("report.csv").exists());
    let manifest = read_json(&out.join("manifest.json"));
    let inputs = manifest["inputs"].as_object().unwrap();
    assert_eq!(inputs.len(), 2, "dataset and store are hashed: {inputs:?}");
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));
}

#[test]
fn missing_embedding_is_a_scorer_error() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, store) = oracle_fixture(dir.path(), 3);
    // SGI needs crop keys the store does not hold
    let o = run(&["eval", "--dataset", p(&dataset), "--scorer", "sgi", "--encoder", p(&store)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("crop:"), "{}", stderr(&o));
}

#[test]
fn malformed_dataset_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": \"x\", \"caption\": 3}\n").unwrap();
    let o = run(&["eval", "--dataset", p(&bad), "--scorer", "random"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    let store = dir.path().join("bad.emb1");
    std::fs::write(&store, b"not a store").unwrap();
    let (dataset, _) = oracle_fixture(dir.path(), 2);
    let o = run(&["eval", "--dataset", p(&dataset), "--scorer", "global", "--encoder", p(&store)]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn random_scorer_sits_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["eval", "--synthetic", "100000", "--scorer", "random", "--seed", "9", "--out", p(dir.path())]);
    assert_eq!(code(&o), 0);
    let report = read_json(&dir.path().join("report.json"));
    let group = report["average"]["group"].as_f64().unwrap();
    assert!((group - 100.0 / 6.0).abs() <= 0.5, "group {group}");
    assert_eq!(read_json(&dir.path().join("manifest.json"))["seeds"]["random_scorer"], 9);
}

#[test]
fn report_combines_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (dataset, store) = oracle_fixture(dir.path(), 5);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run(&["eval", "--dataset", p(&dataset), "--scorer", "global", "--encoder", p(&store), "--out", p(&a)]);
    run(&["eval", "--dataset", p(&dataset), "--scorer", "random", "--out", p(&b)]);
    let csv = dir.path().join("table.csv");
    let o = run(&["report", p(&a.join("report.json")), p(&b.join("report.json")), "--csv", p(&csv)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(table.lines().next(), Some("scorer,category,instances,i2t,t2i,group"));
    assert!(table.lines().any(|l| l.ends_with("100.00,100.00,100.00")), "{table}");
    assert!(table.lines().last().unwrap().starts_with("random,"));
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "manifest.json" {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn build_biscor_is_reproducible_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["build-biscor", "--synthetic-scenes", "400", "--n", "20", "--seed", "4", "--check", "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("check: 80 records, 0 violations"), "{}", stdout(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() > 8);
    assert_eq!(ta, tb);
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["seeds"]["biscor"], 4);

    let out = dir.path().join("fixture");
    let scenes = core_data("clevr_val_fixture.json");
    let o = run(&[
        "build-biscor", "--clevr-scenes", p(&scenes), "--category", "size,color,size", "--n", "10", "--seed", "7", "--check",
        "--no-render-jobs", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = std::fs::read_to_string(out.join("color_test.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 10);
    assert!(!out.join("material_test.jsonl").exists());
    assert!(!out.join("color_test").exists());
    assert!(read_json(&out.join("manifest.json"))["inputs"].as_object().unwrap().contains_key(p(&scenes)));
}

#[test]
fn train_reports_parameter_count() {
    let o = run(&["train", "--variant", "local", "--layers", "4"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("parameters: 13334018"), "{}", stdout(&o));
}

#[test]
fn train_overfits_synthetic_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train", "--variant", "local", "--synthetic", "8", "--visual-dim", "16", "--text-dim", "16", "--max-patches", "4",
        "--max-tokens", "4", "--layers", "4", "--model-dim", "32", "--heads", "4", "--ff-dim", "64", "--batch-size", "8",
        "--epochs", "500", "--seed", "3", "--target-accuracy", "1.0", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("best validation accuracy: 1.000"));
    for f in ["best.ckp", "last.ckp", "history.csv", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 501);
}

#[test]
fn train_on_store_then_evaluate_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthetic_instances(12, "size");
    let dataset = dir.path().join("data.jsonl");
    write_dataset(&dataset, &data).unwrap();
    let store = dir.path().join("emb.emb1");
    write_store(&store, &data, |i, positive| {
        (0..6).map(|k| ((i * 7 + k * 3 + usize::from(positive) * 11) as f32).sin()).collect()
    });
    let run_dir = dir.path().join("model");
    let o = run(&[
        "train", "--variant", "global", "--data", p(&dataset), "--encoder", p(&store), "--layers", "1", "--model-dim", "8",
        "--heads", "2", "--ff-dim", "16", "--batch-size", "4", "--epochs", "3", "--hard-negatives", "--out", p(&run_dir),
    ]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let ckpt = run_dir.join("best.ckp");
    let out = dir.path().join("eval");
    let o = run(&[
        "eval", "--dataset", p(&dataset), "--scorer", "transformer", "--checkpoint", p(&ckpt), "--encoder", p(&store),
        "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["instances"], 12);
    assert!(report["scorer"].as_str().unwrap().starts_with("transformer[global"));

    let o = run(&["eval", "--dataset", p(&dataset), "--scorer", "transformer", "--encoder", p(&store)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn sweep_layers_writes_one_run_per_depth() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "sweep-layers", "--synthetic", "6", "--from", "1", "--to", "2", "--visual-dim", "4", "--text-dim", "4",
        "--max-patches", "2", "--max-tokens", "2", "--model-dim", "8", "--heads", "2", "--ff-dim", "16", "--batch-size", "6",
        "--epochs", "2", "--out", p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(dir.path().join("layers1/best.ckp").exists());
    assert!(dir.path().join("layers2/history.csv").exists());
    assert_eq!(code(&run(&["sweep-layers", "--synthetic", "6", "--from", "3", "--to", "1"])), 2);
}
