//! Offline evaluation: response metrics, continual stage runs and threshold
//! sweeps.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{verdict, Action, RefusalSet};
use crate::pipeline::Pipeline;

/// Lowercase, map every non-alphanumeric character to a space, split on
/// whitespace.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .to_lowercase()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Length of the longest common subsequence, two-row dynamic program.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn rouge_l_tokens<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let lcs = lcs_len(candidate, reference) as f64;
    let precision = if candidate.is_empty() { 0.0 } else { lcs / candidate.len() as f64 };
    let recall = if reference.is_empty() { 0.0 } else { lcs / reference.len() as f64 };
    RougeScore { precision, recall, f: harmonic_mean(precision, recall) }
}

/// Sentence-level ROUGE-L over [`rouge_tokens`].
pub fn rouge_l(candidate: &str, reference: &str) -> RougeScore {
    rouge_l_tokens(&rouge_tokens(candidate), &rouge_tokens(reference))
}

/// Highest ROUGE-L F between `response` and any refusal phrase.
pub fn refusal_score(response: &str, refusals: &RefusalSet) -> f64 {
    let cand = rouge_tokens(response);
    refusals
        .phrases()
        .iter()
        .map(|p| rouge_l_tokens(&cand, &rouge_tokens(p)).f)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gold {
    /// Should be refused.
    Forget,
    /// Should be answered.
    Retain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, action: Action, gold: Gold) {
        match (action, gold) {
            (Action::Refuse, Gold::Forget) => self.tp += 1,
            (Action::Refuse, Gold::Retain) => self.fp += 1,
            (Action::Answer, Gold::Retain) => self.tn += 1,
            (Action::Answer, Gold::Forget) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Precision is 1 when nothing was refused and recall is 1 when nothing
    /// should have been: no mistakes of that kind were possible.
    pub fn metrics(&self) -> ClassificationMetrics {
        let precision = if self.tp + self.fp == 0 { 1.0 } else { self.tp as f64 / (self.tp + self.fp) as f64 };
        let recall = if self.tp + self.fn_ == 0 { 1.0 } else { self.tp as f64 / (self.tp + self.fn_) as f64 };
        ClassificationMetrics { precision, recall, f1: harmonic_mean(precision, recall), confusion: *self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(flatten)]
    pub confusion: Confusion,
}

/// Refusal is the positive class.
pub fn classification_metrics(actions: &[Action], gold: &[Gold]) -> Result<ClassificationMetrics> {
    if actions.len() != gold.len() {
        return Err(Error::LengthMismatch { left: actions.len(), right: gold.len() });
    }
    let mut c = Confusion::default();
    for (&a, &g) in actions.iter().zip(gold) {
        c.record(a, g);
    }
    Ok(c.metrics())
}

fn option_patterns() -> &'static [Regex; 4] {
    static PATTERNS: OnceLock<[Regex; 4]> = OnceLock::new();
    PATTERNS.get_or_init(|| {
        [
            // "(B)" anywhere
            Regex::new(r"\(\s*([A-Za-z])\s*\)").unwrap(),
            // leading "B." / "B)" / "B:" / "B"
            Regex::new(r"^\s*([A-Za-z])(?:[.):\]]|\s|$)").unwrap(),
            // "answer is b" / "answer: b" / "option b"
            Regex::new(r"(?i)\b(?:answer(?:\s+is)?|option)\s*:?\s*([A-Za-z])\b").unwrap(),
            // first standalone capital letter
            Regex::new(r"\b([A-Z])\b").unwrap(),
        ]
    })
}

/// Option letter a response commits to, tried in order: a parenthesized
/// letter, a leading letter, an "answer is X" phrase, then the first
/// standalone capital letter.
pub fn extract_option(response: &str) -> Option<char> {
    option_patterns()
        .iter()
        .find_map(|re| re.captures(response))
        .and_then(|c| c[1].chars().next())
        .map(|c| c.to_ascii_uppercase())
}

/// 1 when the response selects `gold`. Single-letter golds go through
/// [`extract_option`]; longer golds must match the leading response tokens.
pub fn exact_match(response: &str, gold: &str) -> u8 {
    let g = gold.trim();
    let mut chars = g.chars();
    if let (Some(letter), None) = (chars.next(), chars.next()) {
        if letter.is_ascii_alphabetic() {
            return u8::from(extract_option(response) == Some(letter.to_ascii_uppercase()));
        }
    }
    let want = rouge_tokens(g);
    let got = rouge_tokens(response);
    u8::from(!want.is_empty() && got.starts_with(&want))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub q: String,
    #[serde(rename = "ref", default)]
    pub reference: String,
    pub gold: Gold,
    /// Expected option for multiple-choice items.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<String>,
}

impl EvalItem {
    pub fn new(q: impl Into<String>, reference: impl Into<String>, gold: Gold) -> Self {
        Self { q: q.into(), reference: reference.into(), gold, option: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    #[serde(default)]
    pub forget: Vec<String>,
    #[serde(default)]
    pub eval_sets: BTreeMap<String, Vec<EvalItem>>,
}

/// Ordered stages; each only adds forget items, so the cumulative forget
/// sets are nested.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (i, stage) in self.stages.iter().enumerate() {
            if stage.forget.iter().any(|t| t.trim().is_empty()) {
                problems.push(format!("stage {}: empty forget text", i + 1));
            }
            for (name, items) in &stage.eval_sets {
                if let Some(j) = items.iter().position(|it| it.q.trim().is_empty()) {
                    problems.push(format!("stage {}: set {name:?} item {j} has an empty question", i + 1));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidPlan(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let plan: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn query_count(&self) -> usize {
        self.stages.iter().flat_map(|s| s.eval_sets.values()).map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetMetrics {
    pub set: String,
    pub count: usize,
    #[serde(flatten)]
    pub classification: ClassificationMetrics,
    pub answer_rate: f64,
    pub rouge_l_mean: f64,
    pub refusal_score_mean: f64,
    pub exact_match_accuracy: Option<f64>,
}

#[derive(Debug, Default)]
struct SetAccumulator {
    confusion: Confusion,
    answers: usize,
    rouge: f64,
    refusal: f64,
    em_hits: usize,
    em_count: usize,
}

impl SetAccumulator {
    fn finish(&self, set: &str) -> SetMetrics {
        let n = self.confusion.total();
        let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
        SetMetrics {
            set: set.to_string(),
            count: n,
            classification: self.confusion.metrics(),
            answer_rate: if n == 0 { 1.0 } else { self.answers as f64 / n as f64 },
            rouge_l_mean: mean(self.rouge),
            refusal_score_mean: mean(self.refusal),
            exact_match_accuracy: (self.em_count > 0).then(|| self.em_hits as f64 / self.em_count as f64),
        }
    }

    fn absorb(&mut self, other: &SetAccumulator) {
        self.confusion.tp += other.confusion.tp;
        self.confusion.fp += other.confusion.fp;
        self.confusion.tn += other.confusion.tn;
        self.confusion.fn_ += other.confusion.fn_;
        self.answers += other.answers;
        self.rouge += other.rouge;
        self.refusal += other.refusal;
        self.em_hits += other.em_hits;
        self.em_count += other.em_count;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    /// 1-based.
    pub stage: usize,
    pub store_count: usize,
    pub sets: Vec<SetMetrics>,
    /// All sets pooled.
    pub overall: SetMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub stages: Vec<StageReport>,
}

impl MetricsReport {
    /// Flat `stage,set,metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,set,metric,value\n");
        for st in &self.stages {
            for m in st.sets.iter().chain(std::iter::once(&st.overall)) {
                let c = &m.classification;
                let mut row = |metric: &str, value: f64| {
                    let _ = writeln!(out, "{},{},{},{}", st.stage, m.set, metric, value);
                };
                row("count", m.count as f64);
                row("precision", c.precision);
                row("recall", c.recall);
                row("f1", c.f1);
                row("answer_rate", m.answer_rate);
                row("rouge_l_mean", m.rouge_l_mean);
                row("refusal_score_mean", m.refusal_score_mean);
                if let Some(em) = m.exact_match_accuracy {
                    row("exact_match_accuracy", em);
                }
            }
        }
        out
    }
}

/// Name of the pooled pseudo-set in reports.
pub const OVERALL: &str = "overall";

/// Replay `plan` through `pipeline`: per stage, forget that stage's items via
/// the forget path, then send every eval question down the full query path.
pub fn run_stages(plan: &StagePlan, pipeline: &Pipeline) -> Result<MetricsReport> {
    run_stages_with(plan, pipeline, |_| Ok(()))
}

/// [`run_stages`] with `after_forget` called once per stage between the
/// forgets and the queries, e.g. to re-compress the store.
pub fn run_stages_with(
    plan: &StagePlan,
    pipeline: &Pipeline,
    mut after_forget: impl FnMut(&Pipeline) -> Result<()>,
) -> Result<MetricsReport> {
    plan.validate()?;
    let mut stages = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        for text in &stage.forget {
            pipeline.forget(text)?;
        }
        after_forget(pipeline)?;
        let mut overall = SetAccumulator::default();
        let mut sets = Vec::new();
        for (name, items) in &stage.eval_sets {
            let mut acc = SetAccumulator::default();
            for item in items {
                let out = pipeline.query(&item.q)?;
                acc.confusion.record(out.action, item.gold);
                if out.action == Action::Answer {
                    acc.answers += 1;
                }
                acc.rouge += rouge_l(&out.response, &item.reference).f;
                acc.refusal += refusal_score(&out.response, pipeline.refusals());
                if let Some(opt) = &item.option {
                    acc.em_count += 1;
                    acc.em_hits += exact_match(&out.response, opt) as usize;
                }
            }
            overall.absorb(&acc);
            sets.push(acc.finish(name));
        }
        stages.push(StageReport {
            stage: i + 1,
            store_count: pipeline.store().len(),
            sets,
            overall: overall.finish(OVERALL),
        });
    }
    Ok(MetricsReport { threshold: pipeline.threshold(), stages })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredItem {
    pub set: String,
    pub gold: Gold,
    pub s_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredStage {
    pub stage: usize,
    pub items: Vec<ScoredItem>,
}

/// Apply each stage's forgets and record every eval question's retrieval
/// score once. Thresholds can then be varied without re-embedding.
pub fn score_plan(plan: &StagePlan, pipeline: &Pipeline) -> Result<Vec<ScoredStage>> {
    score_plan_with(plan, pipeline, |_| Ok(()))
}

pub fn score_plan_with(
    plan: &StagePlan,
    pipeline: &Pipeline,
    mut after_forget: impl FnMut(&Pipeline) -> Result<()>,
) -> Result<Vec<ScoredStage>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(plan.stages.len());
    for (i, stage) in plan.stages.iter().enumerate() {
        for text in &stage.forget {
            pipeline.forget(text)?;
        }
        after_forget(pipeline)?;
        let mut items = Vec::new();
        for (name, set) in &stage.eval_sets {
            for item in set {
                let r = pipeline.score(&item.q)?;
                items.push(ScoredItem { set: name.clone(), gold: item.gold, s_max: r.score });
            }
        }
        out.push(ScoredStage { stage: i + 1, items });
    }
    Ok(out)
}

/// Indices of items refused at `delta`.
pub fn refused_at(items: &[ScoredItem], delta: f64) -> Vec<usize> {
    items
        .iter()
        .enumerate()
        .filter(|(_, it)| verdict(it.s_max, delta) == Action::Refuse)
        .map(|(i, _)| i)
        .collect()
}

pub fn metrics_at(items: &[ScoredItem], delta: f64) -> ClassificationMetrics {
    let mut c = Confusion::default();
    for it in items {
        c.record(verdict(it.s_max, delta), it.gold);
    }
    c.metrics()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub delta: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub refusals: usize,
}

pub fn sweep_items(items: &[ScoredItem], grid: &[f64]) -> Vec<SweepRow> {
    grid.iter()
        .map(|&delta| {
            let m = metrics_at(items, delta);
            SweepRow {
                delta,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                refusals: m.confusion.tp + m.confusion.fp,
            }
        })
        .collect()
}

/// Score the plan once, then evaluate the final stage at every grid point.
pub fn threshold_sweep(plan: &StagePlan, pipeline: &Pipeline, grid: &[f64]) -> Result<Vec<SweepRow>> {
    check_grid(grid)?;
    let scored = score_plan(plan, pipeline)?;
    Ok(scored.last().map(|s| sweep_items(&s.items, grid)).unwrap_or_default())
}

/// Grid point with the best F1. Among ties the median tied point is chosen,
/// which sits mid-plateau rather than at an edge.
pub fn tune_threshold(items: &[ScoredItem], grid: &[f64]) -> Option<(f64, f64)> {
    let rows = sweep_items(items, grid);
    let best = rows.iter().map(|r| r.f1).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<&SweepRow> = rows.iter().filter(|r| r.f1 == best).collect();
    tied.get(tied.len() / 2).map(|r| (r.delta, r.f1))
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|d| !(0.0..=1.0).contains(d)) {
        return Err(Error::Format("grid values must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Format("grid must be sorted ascending".into()));
    }
    Ok(())
}

/// Parse `start:end:step` (inclusive) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |m: &str| Error::Format(format!("bad grid {spec:?}: {m}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(&e.to_string()));
    let grid = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, end, step] = parts[..] else {
            return Err(bad("expected start:end:step"));
        };
        let (start, end, step) = (num(start)?, num(end)?, num(step)?);
        if !(step > 0.0) || start > end {
            return Err(bad("need step > 0 and start <= end"));
        }
        let n = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    check_grid(&grid)?;
    Ok(grid)
}

pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("# delta\tprecision\trecall\tf1\trefusals\n");
    for r in rows {
        let _ = writeln!(out, "{:.4}\t{:.6}\t{:.6}\t{:.6}\t{}", r.delta, r.precision, r.recall, r.f1, r.refusals);
    }
    out
}

/// Share of distinct tokens two texts have in common, relative to the larger
/// token set.
pub fn token_overlap(a: &str, b: &str) -> f64 {
    let ta: HashSet<String> = rouge_tokens(a).into_iter().collect();
    let tb: HashSet<String> = rouge_tokens(b).into_iter().collect();
    let larger = ta.len().max(tb.len());
    if larger == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / larger as f64
}

/// Synthetic continual benchmark with known separability.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedClusterConfig {
    pub stages: usize,
    pub forget_per_stage: usize,
    /// Tokens per item.
    pub item_len: usize,
    /// Tokens a paraphrase keeps from its forget item.
    pub paraphrase_keep: usize,
    /// Tokens a near-utility distractor borrows from a forget item.
    pub near_shared: usize,
    /// Tokens a retain item borrows from a forget item.
    pub retain_shared: usize,
    pub retain_count: usize,
    pub seed: u64,
}

impl Default for PlantedClusterConfig {
    fn default() -> Self {
        Self {
            stages: 3,
            forget_per_stage: 100,
            item_len: 10,
            paraphrase_keep: 7,
            near_shared: 3,
            retain_shared: 1,
            retain_count: 200,
            seed: 7,
        }
    }
}

struct WordSource {
    next: usize,
}

impl WordSource {
    const ONSETS: [&'static str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "ch"];
    const VOWELS: [&'static str; 5] = ["a", "e", "i", "o", "u"];

    /// A pronounceable token never returned before.
    fn fresh(&mut self) -> String {
        let mut n = self.next;
        self.next += 1;
        let mut word = String::new();
        for _ in 0..3 {
            let syl = n % 80;
            n /= 80;
            word.push_str(Self::ONSETS[syl % 16]);
            word.push_str(Self::VOWELS[syl / 16]);
        }
        let _ = write!(word, "{n}");
        word
    }

    fn sentence(&mut self, len: usize) -> Vec<String> {
        (0..len).map(|_| self.fresh()).collect()
    }
}

/// Replace all but `keep` positions of `base` with fresh tokens. Kept
/// positions form one contiguous run at a random offset.
fn mutate<R: Rng>(base: &[String], keep: usize, words: &mut WordSource, rng: &mut R) -> Vec<String> {
    let start = rng.gen_range(0..=base.len() - keep);
    base.iter()
        .enumerate()
        .map(|(i, t)| if (start..start + keep).contains(&i) { t.clone() } else { words.fresh() })
        .collect()
}

/// Build a plan whose forget items are mutually token-disjoint. Every stage
/// evaluates `forget` (paraphrases of all items forgotten so far),
/// `near_utility` (one distractor per forget item of the whole plan) and
/// `retain`.
pub fn planted_cluster_plan(cfg: &PlantedClusterConfig) -> Result<StagePlan> {
    if cfg.paraphrase_keep > cfg.item_len || cfg.near_shared > cfg.item_len || cfg.retain_shared > cfg.item_len {
        return Err(Error::InvalidPlan("shared token counts exceed item length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut words = WordSource { next: 0 };
    let total = cfg.stages * cfg.forget_per_stage;
    let forget: Vec<Vec<String>> = (0..total).map(|_| words.sentence(cfg.item_len)).collect();
    let join = |t: &[String]| t.join(" ");

    let paraphrases: Vec<String> =
        forget.iter().map(|f| join(&mutate(f, cfg.paraphrase_keep, &mut words, &mut rng))).collect();
    let near: Vec<EvalItem> = forget
        .iter()
        .map(|f| {
            let t = join(&mutate(f, cfg.near_shared, &mut words, &mut rng));
            EvalItem::new(t, join(&words.sentence(4)), Gold::Retain)
        })
        .collect();
    let retain: Vec<EvalItem> = (0..cfg.retain_count)
        .map(|_| {
            let src = forget.choose(&mut rng).expect("non-empty forget set");
            let t = join(&mutate(src, cfg.retain_shared, &mut words, &mut rng));
            EvalItem::new(t, join(&words.sentence(4)), Gold::Retain)
        })
        .collect();

    let mut stages = Vec::with_capacity(cfg.stages);
    for s in 0..cfg.stages {
        let range = s * cfg.forget_per_stage..(s + 1) * cfg.forget_per_stage;
        let seen = (s + 1) * cfg.forget_per_stage;
        let forget_eval = paraphrases[..seen]
            .iter()
            .map(|p| EvalItem::new(p.clone(), join(&words.sentence(4)), Gold::Forget))
            .collect();
        let mut eval_sets = BTreeMap::new();
        eval_sets.insert("forget".to_string(), forget_eval);
        eval_sets.insert("near_utility".to_string(), near.clone());
        eval_sets.insert("retain".to_string(), retain.clone());
        stages.push(Stage { forget: forget[range].iter().map(|f| join(f)).collect(), eval_sets });
    }
    Ok(StagePlan { stages })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rouge_examples() {
        let s = rouge_l("the cat sat", "the cat ran");
        for v in [s.precision, s.recall, s.f] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(rouge_l("Hello, World!", "hello world").f, 1.0);
        assert_eq!(rouge_l("alpha beta", "gamma delta").f, 0.0);
        assert_eq!(rouge_l("", "").f, 0.0);
        assert_eq!(rouge_l("", "x").f, 0.0);
    }

    #[test]
    fn refusal_score_examples() {
        let set = RefusalSet::new(vec!["I cannot help with that.".into(), "That is off limits.".into()]).unwrap();
        assert_eq!(refusal_score("That is off limits.", &set), 1.0);
        assert_eq!(refusal_score("purple giraffes", &set), 0.0);
        let single = RefusalSet::new(vec!["no comment here".into()]).unwrap();
        assert_eq!(refusal_score("no comment", &single), rouge_l("no comment", "no comment here").f);
    }

    #[test]
    fn classification_examples() {
        use Action::*;
        use Gold::*;
        let m = classification_metrics(&[Refuse, Answer], &[Forget, Retain]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let m = classification_metrics(&[Refuse; 4], &[Forget, Retain, Forget, Retain]).unwrap();
        assert_eq!((m.precision, m.recall), (0.5, 1.0));

        let actions = [Refuse, Refuse, Refuse, Refuse, Answer, Answer];
        let gold = [Forget, Forget, Forget, Retain, Forget, Forget];
        let m = classification_metrics(&actions, &gold).unwrap();
        assert_eq!((m.precision, m.recall), (0.75, 0.6));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);

        assert!(matches!(
            classification_metrics(&[Refuse], &[]),
            Err(Error::LengthMismatch { left: 1, right: 0 })
        ));
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match("(B) because it floats", "B"), 1);
        assert_eq!(exact_match("The answer is b.", "B"), 1);
        assert_eq!(exact_match("C. definitely", "c"), 1);
        assert_eq!(exact_match("I think the answer is (D)", "B"), 0);
        assert_eq!(exact_match("no idea at all", "A"), 0);
        assert_eq!(exact_match("Paris, of course", "paris"), 1);
        assert_eq!(exact_match("London", "paris"), 0);
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid("0.01:0.99:0.01").unwrap();
        assert_eq!(g.len(), 99);
        assert_eq!(g[0], 0.01);
        assert_eq!(g[98], 0.99);
        assert_eq!(g[49], 0.5);
        assert_eq!(parse_grid("0.2,0.5").unwrap(), [0.2, 0.5]);
        assert!(parse_grid("0:2:1").is_err());
        assert!(parse_grid("0.5,0.2").is_err());
        assert!(parse_grid("0:1").is_err());
    }

    #[test]
    fn sweep_extremes() {
        let items = vec![
            ScoredItem { set: "f".into(), gold: Gold::Forget, s_max: Some(0.7) },
            ScoredItem { set: "f".into(), gold: Gold::Forget, s_max: Some(0.0) },
            ScoredItem { set: "r".into(), gold: Gold::Retain, s_max: Some(0.2) },
        ];
        assert_eq!(metrics_at(&items, 0.0).recall, 1.0);
        let above = metrics_at(&items, 0.71);
        assert_eq!((above.recall, above.confusion.tp + above.confusion.fp), (0.0, 0));
        assert_eq!(refused_at(&items, 0.2), [0, 2]);
    }

    #[test]
    fn planted_plan_respects_overlap_bounds() {
        let cfg = PlantedClusterConfig { forget_per_stage: 20, retain_count: 30, ..Default::default() };
        let plan = planted_cluster_plan(&cfg).unwrap();
        assert_eq!(plan.stages.len(), 3);
        let all_forget: Vec<&String> = plan.stages.iter().flat_map(|s| &s.forget).collect();
        assert_eq!(all_forget.len(), 60);
        let last = &plan.stages[2].eval_sets;
        for (i, p) in last["forget"].iter().enumerate() {
            assert!(token_overlap(&p.q, all_forget[i]) >= 0.6);
        }
        for (set, bound) in [("near_utility", 0.3), ("retain", 0.1)] {
            for item in &last[set] {
                let worst = all_forget.iter().map(|f| token_overlap(&item.q, f)).fold(0.0, f64::max);
                assert!(worst <= bound + 1e-12, "{set}: {worst}");
            }
        }
        assert_eq!(plan.stages[0].eval_sets["forget"].len(), 20);
        assert_eq!(plan.stages[2].eval_sets["forget"].len(), 60);
    }
}
