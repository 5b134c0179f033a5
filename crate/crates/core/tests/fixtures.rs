use std::path::{Path, PathBuf};

use imgtrace::detector::{self, fuse, load_jsonl, write_jsonl, EmbeddingPair};
use imgtrace::Error;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn loader_keeps_every_decimal() {
    let path = fixture("pairs_d8.jsonl");
    let pairs = load_jsonl(&path).unwrap();
    let raw: Vec<Value> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(pairs.len(), raw.len());
    for (p, r) in pairs.iter().zip(&raw) {
        assert_eq!(p.dim, 8);
        assert_eq!(p.id, r["id"].as_str().unwrap());
        for (field, values) in [("e_img", &p.e_img), ("e_txt", &p.e_txt)] {
            let expected: Vec<f64> = r[field].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            assert_eq!(values, &expected);
        }
    }
    assert!(pairs.iter().any(|p| p.text.is_some()));
    assert_eq!(pairs.iter().filter(|p| p.label == Some(1)).count(), 24);
}

#[test]
fn rewritten_fixture_loads_identically() {
    let pairs = load_jsonl(fixture("pairs_d8.jsonl")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("copy.jsonl");
    write_jsonl(&out, &pairs).unwrap();
    assert_eq!(load_jsonl(&out).unwrap(), pairs);
}

#[test]
fn unlabeled_queries_fuse() {
    let queries = load_jsonl(fixture("queries_d8.jsonl")).unwrap();
    assert!(queries.iter().all(|q| q.label.is_none()));
    for q in &queries {
        assert_eq!(fuse(q).unwrap().0.len(), 33);
    }
}

#[test]
fn malformed_records_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = serde_json::to_string(&EmbeddingPair::new("a", vec![1.0, 2.0], vec![3.0, 4.0], Some(0))).unwrap();
    let cases = [
        format!("{good}\n{{\"id\": \"b\"}}\n"),
        format!("{good}\n{{\"id\":\"c\",\"label\":1,\"dim\":2,\"e_img\":[1.0],\"e_txt\":[1.0,2.0]}}\n"),
        format!("{good}\n{{\"id\":\"d\",\"label\":7,\"dim\":2,\"e_img\":[1.0,1.0],\"e_txt\":[1.0,2.0]}}\n"),
        format!("{good}\nnot json\n"),
    ];
    for text in cases {
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Format { line: 2, .. })));
    }
}

#[test]
fn detector_trains_on_fixture() {
    let pairs = load_jsonl(fixture("pairs_d8.jsonl")).unwrap();
    let cfg = detector::TrainConfig { hidden1: 32, hidden2: 16, batch_size: 8, ..Default::default() };
    let outcome = detector::train(&pairs, &cfg).unwrap();
    let m = detector::evaluate(&outcome.model, &pairs).unwrap();
    assert!(m.accuracy >= 0.95 && m.auc_roc >= 0.95, "{m:?}");
}
