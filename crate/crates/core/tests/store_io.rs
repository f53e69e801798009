use std::fs;

use forgetgate::datagen::{LabeledPair, TrainingDataset};
use forgetgate::embed::{Embedder, StubEmbedder};
use forgetgate::error::Error;
use forgetgate::io::*;
use forgetgate::linalg::Matrix;
use forgetgate::{Embedding, ForgetStore, Head, StoreMode, StoreSnapshot};
use proptest::prelude::*;

fn same_store(a: &StoreSnapshot, b: &StoreSnapshot) {
    assert_eq!(a.len(), b.len());
    assert_eq!(a.dim(), b.dim());
    assert_eq!(a.mode(), b.mode());
    assert_eq!(a.records().collect::<Vec<_>>(), b.records().collect::<Vec<_>>());
    for i in 0..a.len() {
        let (x, y) = (a.embedding(i), b.embedding(i));
        assert_eq!(x.map(|v| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>()), y.map(|v| v.iter().map(|f| f.to_bits()).collect()));
    }
    // re-encoding is byte-identical, which also covers the compressed payloads
    assert_eq!(encode_store(a), encode_store(b));
}

fn filled(texts: &[String], dim: usize) -> ForgetStore {
    let e = StubEmbedder::new(dim);
    let s = ForgetStore::new();
    for t in texts {
        s.add(t, &e.embed(t).unwrap()).unwrap();
    }
    s
}

#[test]
fn three_record_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.cur8");
    let texts: Vec<String> = ["alpha fact", "beta fact", "gamma ünïcode fact"].map(String::from).to_vec();
    let store = filled(&texts, 32);
    save_store(&path, &store.snapshot()).unwrap();
    let loaded = load_store(&path).unwrap();
    same_store(&store.snapshot(), &loaded);

    // a store rebuilt from disk keeps issuing fresh ids
    let reopened = ForgetStore::from_snapshot(loaded, None);
    let r = reopened.add("delta fact", &StubEmbedder::new(32).embed("delta fact").unwrap()).unwrap();
    assert!(!texts.is_empty() && reopened.snapshot().records().filter(|m| m.id == r.id).count() == 1);
}

#[test]
fn empty_store_round_trip() {
    let snap = ForgetStore::new().snapshot();
    same_store(&snap, &decode_store(&encode_store(&snap)).unwrap());
}

#[test]
fn compressed_and_clustered_round_trip() {
    let texts: Vec<String> = (0..120).map(|i| format!("item {i} about subject {}", i % 9)).collect();
    for mode in [StoreMode::compressed(16), StoreMode::clustered(8, 0.25)] {
        let store = filled(&texts, 64);
        store.compress(mode, 4).unwrap();
        store.add("late addition", &StubEmbedder::new(64).embed("late addition").unwrap()).unwrap();
        let snap = store.snapshot();
        let back = decode_store(&encode_store(&snap)).unwrap();
        same_store(&snap, &back);
        let q = StubEmbedder::new(64).embed("item 7 about subject 7").unwrap();
        assert_eq!(snap.max_similarity(&q).unwrap(), back.max_similarity(&q).unwrap());
    }
}

#[test]
fn truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.cur8");
    let store = filled(&["one".into(), "two".into(), "three".into()], 16);
    save_store(&path, &store.snapshot()).unwrap();
    let bytes = fs::read(&path).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 11] {
        fs::write(&path, &bytes[..cut]).unwrap();
        assert!(matches!(load_store(&path), Err(Error::Checksum { .. })), "cut {cut}");
    }
}

#[test]
fn unknown_sections_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("store.cur8");
    let store = filled(&["one".into(), "two".into()], 16);
    let sections = vec![
        Section::new("FUTURE", vec![0xAB; 33]),
        Section::new(TAG_STORE, encode_store(&store.snapshot())),
        Section::new(TAG_META, b"{\"note\":1}".to_vec()),
    ];
    save_container(&path, &sections).unwrap();
    same_store(&store.snapshot(), &load_store(&path).unwrap());
    assert_eq!(load_container(&path).unwrap(), sections);
}

#[test]
fn head_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.cur8");
    let head = Head::new(Matrix::from_vec(2, 3, vec![0.1, -2.5, 3.0, 1e-300, 7.0, -0.0]).unwrap(), vec![0.5, -1.0]).unwrap();
    save_head(&path, &head).unwrap();
    assert_eq!(load_head(&path).unwrap(), head);
    assert!(load_store(&path).is_err(), "head file has no STORE section");
}

fn pair(i: usize) -> LabeledPair {
    let mut p = LabeledPair::new(format!("question {i}"), format!("variant \"{i}\"\n"), (i % 2) as u8, (i % 3 + 1) as u8, format!("s{}", i / 3)).unwrap();
    if i % 5 == 0 {
        p.partner_seed_id = Some(format!("s{}", i + 1));
    }
    p
}

#[test]
fn dataset_round_trip_18000() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pairs.jsonl");
    let ds = TrainingDataset::new((0..18_000).map(pair).collect());
    save_dataset(&path, &ds).unwrap();
    let loaded = load_dataset(&path, ParseMode::Strict).unwrap();
    assert_eq!(loaded.dataset, ds);
    assert!(loaded.skipped.is_empty());
}

#[test]
fn dataset_parse_errors_name_the_line() {
    let good = r#"{"a":"x","b":"y","label":1,"type":1,"seed_id":"s0"}"#;
    let bad = r#"{"a":"x","b":"y","label":2,"type":1,"seed_id":"s0"}"#;
    let text = format!("{good}\n\n{bad}\n{good}\nnot json\n");
    let err = read_dataset(text.as_bytes(), ParseMode::Strict).unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let lenient = read_dataset(text.as_bytes(), ParseMode::Lenient).unwrap();
    assert_eq!(lenient.dataset.len(), 2);
    let lines: Vec<usize> = lenient.skipped.iter().map(|e| match e { Error::Parse { line, .. } => *line, _ => 0 }).collect();
    assert_eq!(lines, [3, 5]);
    assert!(read_dataset(&b""[..], ParseMode::Strict).unwrap().dataset.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn random_exact_stores_round_trip(
        dim in 1usize..24,
        rows in proptest::collection::vec((".{0,12}", proptest::collection::vec(-100.0f32..100.0, 24)), 0..30),
    ) {
        let store = ForgetStore::new();
        for (text, v) in &rows {
            let v = v[..dim].to_vec();
            if v.iter().all(|x| *x == 0.0) { continue; }
            store.add(text, &Embedding::new(v).unwrap()).unwrap();
        }
        let snap = store.snapshot();
        let back = decode_store(&encode_store(&snap)).unwrap();
        same_store(&snap, &back);
    }

    #[test]
    fn random_containers_round_trip(sections in proptest::collection::vec(("[A-Z]{1,8}", proptest::collection::vec(any::<u8>(), 0..64)), 0..6)) {
        let sections: Vec<Section> = sections.into_iter().map(|(t, p)| Section::new(t, p)).collect();
        let bytes = encode_container(&sections);
        prop_assert_eq!(decode_container(&bytes).unwrap(), sections);
    }

    #[test]
    fn random_datasets_round_trip(items in proptest::collection::vec(("\\PC{1,20}", "\\PC{1,20}", 0u8..2, 1u8..4, "[a-z0-9]{1,6}"), 0..40)) {
        let pairs: Vec<LabeledPair> = items.into_iter().map(|(a, b, l, t, s)| LabeledPair::new(a, b, l, t, s).unwrap()).collect();
        let ds = TrainingDataset::new(pairs);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        prop_assert_eq!(read_dataset(&buf[..], ParseMode::Strict).unwrap().dataset, ds);
    }
}
