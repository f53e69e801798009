use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use forgetgate::embed::StubEmbedder;
use forgetgate::eval::*;
use forgetgate::gate::RefusalSet;
use forgetgate::pipeline::{MockUpstream, Pipeline, PipelineOptions};
use forgetgate::ForgetStore;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Memoized recursive LCS.
fn lcs_oracle(a: &[u32], b: &[u32], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if i == a.len() || j == b.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(i, j)) {
        return v;
    }
    let v = if a[i] == b[j] {
        1 + lcs_oracle(a, b, i + 1, j + 1, memo)
    } else {
        lcs_oracle(a, b, i + 1, j, memo).max(lcs_oracle(a, b, i, j + 1, memo))
    };
    memo.insert((i, j), v);
    v
}

#[test]
fn rouge_matches_lcs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let words = ["alpha", "beta", "gamma", "delta", "eps"];
    for _ in 0..1000 {
        let a: Vec<u32> = (0..rng.gen_range(0..=30)).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<u32> = (0..rng.gen_range(0..=30)).map(|_| rng.gen_range(0..5)).collect();
        let lcs = lcs_oracle(&a, &b, 0, 0, &mut HashMap::new()) as f64;
        let text = |v: &[u32]| v.iter().map(|&i| words[i as usize]).collect::<Vec<_>>().join(" ");
        let got = rouge_l(&text(&a), &text(&b));
        let p = if a.is_empty() { 0.0 } else { lcs / a.len() as f64 };
        let r = if b.is_empty() { 0.0 } else { lcs / b.len() as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert_eq!((got.precision, got.recall, got.f), (p, r, f));
    }
}

fn pipeline(upstream: Arc<MockUpstream>, threshold: f64) -> Pipeline {
    Pipeline::new(
        Arc::new(StubEmbedder::new(512)),
        Arc::new(ForgetStore::new()),
        upstream,
        RefusalSet::builtin(),
        PipelineOptions { threshold, ..Default::default() },
    )
    .unwrap()
}

fn one_stage(forget: &[&str], sets: &[(&str, Vec<EvalItem>)]) -> StagePlan {
    StagePlan {
        stages: vec![Stage {
            forget: forget.iter().map(|s| s.to_string()).collect(),
            eval_sets: sets.iter().cloned().map(|(n, v)| (n.to_string(), v)).collect(),
        }],
    }
}

#[test]
fn verbatim_forget_texts_are_all_refused() {
    let forget = ["where was ada born", "what is bob's phone number", "list carol's medical history"];
    let items = forget.iter().map(|q| EvalItem::new(*q, "", Gold::Forget)).collect();
    let retain = vec![EvalItem::new("how do volcanoes form", "magma", Gold::Retain), EvalItem::new("define photosynthesis", "light", Gold::Retain)];
    let up = Arc::new(MockUpstream::canned("magma rises"));
    let p = pipeline(up.clone(), 0.9);
    let report = run_stages(&one_stage(&forget, &[("forget", items), ("retain", retain)]), &p).unwrap();
    let st = &report.stages[0];
    assert_eq!(st.store_count, 3);
    let by: BTreeMap<&str, &SetMetrics> = st.sets.iter().map(|m| (m.set.as_str(), m)).collect();
    assert_eq!(by["forget"].classification.recall, 1.0);
    assert_eq!(by["forget"].refusal_score_mean, 1.0);
    assert_eq!(by["retain"].classification.precision, 1.0);
    assert_eq!(by["retain"].answer_rate, 1.0);
    assert!(by["retain"].rouge_l_mean > 0.0);
    assert_eq!(up.calls(), 2, "only the retain questions reach the upstream");
    let f1 = st.overall.classification;
    assert!((f1.f1 - 2.0 * f1.precision * f1.recall / (f1.precision + f1.recall)).abs() < 1e-15);
    assert!(report.to_csv().lines().count() > 10);
}

#[test]
fn empty_forget_plan_is_the_base_condition() {
    let items = vec![EvalItem::new("anything at all", "x", Gold::Retain), EvalItem::new("more questions", "y", Gold::Forget)];
    let up = Arc::new(MockUpstream::echo());
    let p = pipeline(up.clone(), 0.0);
    let report = run_stages(&one_stage(&[], &[("all", items)]), &p).unwrap();
    let m = &report.stages[0].overall;
    assert_eq!(m.answer_rate, 1.0);
    assert_eq!(m.classification.confusion.tp + m.classification.confusion.fp, 0);
    assert_eq!(up.calls(), 2);
}

#[test]
fn exact_match_accuracy_is_reported_when_options_exist() {
    let mut item = EvalItem::new("pick one: (A) red (B) blue", "", Gold::Retain);
    item.option = Some("B".into());
    let p = pipeline(Arc::new(MockUpstream::canned("(B) blue")), 0.8);
    let report = run_stages(&one_stage(&[], &[("mc", vec![item])]), &p).unwrap();
    assert_eq!(report.stages[0].sets[0].exact_match_accuracy, Some(1.0));
}

#[test]
fn sweep_is_nested_and_scores_grow_with_stages() {
    let cfg = PlantedClusterConfig { forget_per_stage: 40, retain_count: 60, ..Default::default() };
    let plan = planted_cluster_plan(&cfg).unwrap();
    let scored = score_plan(&plan, &pipeline(Arc::new(MockUpstream::echo()), 0.8)).unwrap();
    let grid = parse_grid("0.01:0.99:0.01").unwrap();
    let last = &scored.last().unwrap().items;
    let mut prev: Option<Vec<usize>> = None;
    for &d in &grid {
        let refused = refused_at(last, d);
        if let Some(p) = &prev {
            assert!(refused.iter().all(|i| p.contains(i)), "not nested at {d}");
        }
        prev = Some(refused);
    }
    let rows = sweep_items(last, &grid);
    assert_eq!(rows.len(), 99);
    assert!(rows.windows(2).all(|w| w[1].recall <= w[0].recall));

    // retain/near questions are scored at every stage; their s_max can only grow
    for pair in scored.windows(2) {
        let before: HashMap<(String, usize), Option<f64>> = keyed(&pair[0].items);
        for (k, s) in keyed(&pair[1].items) {
            if let Some(b) = before.get(&k) {
                assert!(s >= *b, "{k:?}");
            }
        }
    }
}

fn keyed(items: &[ScoredItem]) -> HashMap<(String, usize), Option<f64>> {
    let mut counters: HashMap<String, usize> = HashMap::new();
    items
        .iter()
        .map(|it| {
            let c = counters.entry(it.set.clone()).or_default();
            *c += 1;
            ((it.set.clone(), *c - 1), it.s_max)
        })
        .collect()
}

#[test]
fn planted_benchmark_stays_flat_across_stages() {
    let plan = planted_cluster_plan(&PlantedClusterConfig::default()).unwrap();
    let grid = parse_grid("0.01:0.99:0.01").unwrap();
    let scored = score_plan(&plan, &pipeline(Arc::new(MockUpstream::echo()), 0.8)).unwrap();
    let (delta, _) = tune_threshold(&scored[0].items, &grid).unwrap();

    let p = pipeline(Arc::new(MockUpstream::echo()), delta);
    let report = run_stages(&plan, &p).unwrap();
    let f1: Vec<f64> = report.stages.iter().map(|s| s.overall.classification.f1).collect();
    for s in &report.stages {
        assert!(s.overall.classification.f1 >= 0.95, "{f1:?}");
        let retain = s.sets.iter().find(|m| m.set == "retain").unwrap();
        assert!(retain.answer_rate >= 0.99);
    }
    assert!((f1[2] - f1[0]).abs() <= 0.02);
}

#[test]
fn plan_json_schema() {
    let text = r#"{"stages":[{"forget":["a b"],"eval_sets":{"f":[{"q":"a b","ref":"x","gold":"forget"}]}}]}"#;
    let plan: StagePlan = serde_json::from_str(text).unwrap();
    assert_eq!(plan.query_count(), 1);
    assert_eq!(serde_json::from_str::<StagePlan>(&serde_json::to_string(&plan).unwrap()).unwrap(), plan);
    let bad: StagePlan = serde_json::from_str(r#"{"stages":[{"forget":[" "]}]}"#).unwrap();
    assert!(bad.validate().is_err());
}
