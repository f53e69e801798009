use forgetgate::embed::{Embedder, StubEmbedder};
use forgetgate::linalg::Matrix;
use forgetgate::store::ann::AnnIndex;
use forgetgate::store::kmeans::{coreset_size, lloyd};
use forgetgate::store::pca::fit_pca_rows;
use forgetgate::store::quant::{dequantize, quantize_8bit};
use forgetgate::store::{compressed_payload_bytes, exact_payload_bytes};
use forgetgate::{Embedding, ForgetStore, StoreMode, StoreVariant};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    // anisotropic so the spectrum is well separated
    (0..n).map(|_| (0..d).map(|j| rng.gen_range(-1.0..1.0) * (d - j) as f64).collect()).collect()
}

/// Descending eigenvalues of the sample covariance via nalgebra.
fn oracle_spectrum(rows: &[Vec<f64>]) -> Vec<f64> {
    let (n, d) = (rows.len(), rows[0].len());
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let mut ev: Vec<f64> = cov.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn pca_matches_dense_eigendecomposition() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (n, d, k) in [(50, 8, 3), (120, 16, 5), (40, 12, 12), (30, 16, 1)] {
        let rows = random_rows(&mut rng, n, d);
        let data = Matrix::from_rows(&rows).unwrap();
        let pca = fit_pca_rows(&data, k).unwrap();
        let oracle = oracle_spectrum(&rows);

        let c = pca.components();
        for a in 0..k {
            for b in 0..k {
                let dot: f64 = c.row(a).iter().zip(c.row(b)).map(|(x, y)| x * y).sum();
                assert!((dot - f64::from(a == b)).abs() < 1e-6);
            }
            let lead = c.row(a).iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*lead > 0.0, "sign convention");
        }
        for (got, want) in pca.explained_variance().iter().zip(&oracle) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{got} vs {want}");
        }
        let err: f64 = rows
            .iter()
            .map(|r| {
                let back = pca.reconstruct(&pca.project(r));
                r.iter().zip(&back).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            })
            .sum();
        let trailing: f64 = oracle[k..].iter().sum::<f64>() * (n as f64 - 1.0);
        let scale = trailing.max(1e-9 * oracle.iter().sum::<f64>());
        assert!((err - trailing).abs() <= 1e-6 * scale, "n{n} d{d} k{k}: {err} vs {trailing}");
    }
}

#[test]
fn quantization_error_within_half_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(1..40), rng.gen_range(1..20));
        let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-3.0f32..3.0)).collect()).collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let q = quantize_8bit(&m).unwrap();
        let back = dequantize(&q);
        for i in 0..n {
            for j in 0..d {
                let e = (m[(i, j)] as f64 - back[(i, j)] as f64).abs();
                assert!(e <= q.scale()[j] as f64 / 2.0 + 1e-6, "{e} > {}", q.scale()[j]);
            }
        }
    }
}

#[test]
fn lloyd_objective_never_increases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let n = rng.gen_range(5..200);
        let k = rng.gen_range(1..=n.min(12));
        let rows = random_rows(&mut rng, n, 6);
        let r = lloyd(&Matrix::from_rows(&rows).unwrap(), k, 100, &mut rng).unwrap();
        for w in r.objective_history.windows(2) {
            assert!(w[1] <= w[0], "{:?}", r.objective_history);
        }
    }
    assert_eq!(coreset_size(4000, 0.9), 3600);
    assert_eq!(coreset_size(10, 0.05), 1);
}

#[test]
fn byte_accounting() {
    assert_eq!(exact_payload_bytes(4000, 768), 12_288_000);
    let compressed = compressed_payload_bytes(4000, 768, 32);
    assert_eq!(compressed, 4000 * 32 + (32 * 768 + 768 + 64) * 4);
    assert!(exact_payload_bytes(4000, 768) as f64 / compressed as f64 >= 15.0);
}

fn stub_store(n: usize, dim: usize) -> (StubEmbedder, ForgetStore, Vec<String>) {
    let e = StubEmbedder::new(dim);
    let s = ForgetStore::new();
    let texts: Vec<String> = (0..n).map(|i| format!("record {i} topic {} detail {}", i % 17, i * 31)).collect();
    for t in &texts {
        s.add(t, &e.embed(t).unwrap()).unwrap();
    }
    (e, s, texts)
}

#[test]
fn compressed_store_keeps_retrieval_and_accepts_new_records() {
    let (e, store, texts) = stub_store(400, 128);
    let report = store.compress(StoreMode::compressed(32), 1).unwrap();
    assert_eq!(report.count, 400);
    assert!(report.ratio > 3.0, "{report:?}");
    assert_eq!(store.mode().variant, StoreVariant::Compressed);
    let mut hits = 0;
    for (i, t) in texts.iter().enumerate() {
        let r = store.max_similarity(&e.embed(t).unwrap()).unwrap();
        if r.record == Some(i) {
            hits += 1;
        }
        // the stored projection of an identical text scores ~1
        assert!(r.score.unwrap() > 0.99);
    }
    assert!(hits as f64 / texts.len() as f64 > 0.9, "{hits}");

    let added = store.add("a brand new forget request", &e.embed("a brand new forget request").unwrap()).unwrap();
    let r = store.max_similarity(&e.embed("a brand new forget request").unwrap()).unwrap();
    assert_eq!(r.id.as_deref(), Some(added.id.as_str()));
    assert!(store.compress(StoreMode::compressed(8), 1).is_err());
}

#[test]
fn clustered_store_shrinks_vector_count() {
    let (e, store, texts) = stub_store(200, 64);
    let report = store.compress(StoreMode::clustered(16, 0.1), 3).unwrap();
    assert_eq!(report.stored_vectors, 20);
    let r = store.max_similarity(&e.embed(&texts[0]).unwrap()).unwrap();
    assert!(r.record.unwrap() < 200);
}

#[test]
fn compression_needs_enough_records() {
    let s = ForgetStore::new();
    s.add("only", &Embedding::new(vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(s.compress(StoreMode::compressed(1), 0).is_err());
}

#[test]
fn ann_recall_at_10() {
    let (e, store, _) = stub_store(2000, 64);
    let snap = store.snapshot();
    let ann = AnnIndex::build(&snap, 32, 9).unwrap();
    assert_eq!(ann.list_sizes().iter().sum::<usize>(), 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut found = 0;
    let trials = 100;
    for _ in 0..trials {
        let q = e.embed(&format!("record {} topic {}", rng.gen_range(0..2000), rng.gen_range(0..17))).unwrap();
        let exact = snap.max_similarity(&q).unwrap().record.unwrap();
        let top = ann.search_top_k(&q, 8, 10).unwrap();
        if top.iter().any(|(i, _)| *i == exact) {
            found += 1;
        }
    }
    assert!(found as f64 / trials as f64 >= 0.9, "recall@10 {found}/{trials}");
    // probing every list is exact
    let q = e.embed("record 5 topic 5").unwrap();
    assert_eq!(ann.search(&q, 32).unwrap().score, snap.max_similarity(&q).unwrap().score);
}
