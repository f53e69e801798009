//! Three-type contrastive dataset construction through a surrogate LLM.
//!
//! For every seed question `q_s` the surrogate is asked (template `tau1`) for
//! a paraphrase `q_p` and a lexically close but semantically different
//! question `q_c`, then (template `tau2`) for a contrastive variant `q_pc` of
//! the paraphrase. The dataset holds `(q_s, q_p, 1)`, `(q_s, q_c, 0)` and
//! `(q_p, q_pc, 0)` per seed.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "{question}";

/// Appended to a prompt when the declarative variant is drawn.
pub const DECLARATIVE_SUFFIX: &str =
    "\nWrite the generated variants as declarative statements instead of questions.";

pub const DEFAULT_DECLARATIVE_PROBABILITY: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedQuestion {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

impl SeedQuestion {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self { id: id.into(), text: text.into(), answer: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedTriple {
    pub seed_id: String,
    pub q_s: String,
    pub q_p: String,
    pub q_c: String,
    pub q_pc: String,
}

impl AugmentedTriple {
    pub fn new(
        seed_id: impl Into<String>,
        q_s: impl Into<String>,
        q_p: impl Into<String>,
        q_c: impl Into<String>,
        q_pc: impl Into<String>,
    ) -> Result<Self> {
        let t = Self {
            seed_id: seed_id.into(),
            q_s: q_s.into(),
            q_p: q_p.into(),
            q_c: q_c.into(),
            q_pc: q_pc.into(),
        };
        let texts = [&t.q_s, &t.q_p, &t.q_c, &t.q_pc];
        if texts.iter().any(|s| s.trim().is_empty()) {
            return Err(Error::InvalidPlan(format!("triple {} has an empty text", t.seed_id)));
        }
        for i in 0..texts.len() {
            for j in (i + 1)..texts.len() {
                if texts[i] == texts[j] {
                    return Err(Error::InvalidPlan(format!("triple {} repeats a text", t.seed_id)));
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub text_a: String,
    pub text_b: String,
    pub label: u8,
    /// 1 = paraphrase, 2 = contrast of the seed, 3 = contrast of the paraphrase.
    pub pair_type: u8,
    pub seed_id: String,
    /// Second seed for randomly sampled negatives.
    pub partner_seed_id: Option<String>,
}

impl LabeledPair {
    pub fn new(
        text_a: impl Into<String>,
        text_b: impl Into<String>,
        label: u8,
        pair_type: u8,
        seed_id: impl Into<String>,
    ) -> Result<Self> {
        let p = Self {
            text_a: text_a.into(),
            text_b: text_b.into(),
            label,
            pair_type,
            seed_id: seed_id.into(),
            partner_seed_id: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label > 1 {
            return Err(Error::Format(format!("label {} not in {{0, 1}}", self.label)));
        }
        if !(1..=3).contains(&self.pair_type) {
            return Err(Error::Format(format!("type {} not in {{1, 2, 3}}", self.pair_type)));
        }
        if self.text_a.is_empty() || self.text_b.is_empty() {
            return Err(Error::Format("empty pair text".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainingDataset {
    pairs: Vec<LabeledPair>,
}

impl TrainingDataset {
    pub fn new(pairs: Vec<LabeledPair>) -> Self {
        Self { pairs }
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn into_pairs(self) -> Vec<LabeledPair> {
        self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == 1).count()
    }

    pub fn extend(&mut self, other: TrainingDataset) {
        self.pairs.extend(other.pairs);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Tau1,
    Tau2,
    NearUtility,
}

impl TemplateKind {
    pub fn file_name(self) -> &'static str {
        match self {
            TemplateKind::Tau1 => "tau1.txt",
            TemplateKind::Tau2 => "tau2.txt",
            TemplateKind::NearUtility => "near_utility.txt",
        }
    }
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    kind: TemplateKind,
    text: String,
    declarative_probability: f64,
}

impl PromptTemplate {
    pub fn new(kind: TemplateKind, text: impl Into<String>, declarative_probability: f64) -> Result<Self> {
        let text = text.into();
        let count = text.matches(PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::MalformedTemplate(format!(
                "{kind} template must contain exactly one {PLACEHOLDER}, found {count}"
            )));
        }
        if !(0.0..=1.0).contains(&declarative_probability) {
            return Err(Error::MalformedTemplate(format!(
                "declarative probability {declarative_probability} outside [0, 1]"
            )));
        }
        Ok(Self { kind, text, declarative_probability })
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn declarative_probability(&self) -> f64 {
        self.declarative_probability
    }
}

/// Substitute the question; with probability `declarative_probability`
/// append [`DECLARATIVE_SUFFIX`]. Always consumes exactly one draw from `rng`.
pub fn render_prompt<R: Rng + ?Sized>(template: &PromptTemplate, question: &str, rng: &mut R) -> Result<String> {
    if question.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let draw: f64 = rng.gen();
    let mut out = template.text.replacen(PLACEHOLDER, question, 1);
    if draw < template.declarative_probability {
        out.push_str(DECLARATIVE_SUFFIX);
    }
    Ok(out)
}

const TAU1_DEFAULT: &str = "You generate training data for a semantic similarity model.\n\
Given the question below, write:\n\
1. a paraphrase that asks for exactly the same information using different wording;\n\
2. a contrastive question that keeps most of the words and structure but asks for something different, \
so that the two questions would have different answers.\n\
Answer with exactly two lines and nothing else:\n\
PARAPHRASE: <paraphrase>\n\
CONTRAST: <contrastive question>\n\n\
Question: {question}";

const TAU2_DEFAULT: &str = "You generate training data for a semantic similarity model.\n\
Given the question below, write a contrastive question that keeps most of the words and structure \
but asks for something different, so that the two questions would have different answers.\n\
Answer with exactly one line and nothing else:\n\
CONTRAST: <contrastive question>\n\n\
Question: {question}";

const NEAR_UTILITY_DEFAULT: &str = "Write a new question that looks similar to the question below, \
sharing its topic words and phrasing, but that asks about different information so that its answer \
differs. Do not mention any real person who appears in the original question; if the original is \
about a person, ask about a different, fictional person instead. If the original is a multiple-choice \
question, keep the multiple-choice format with the same number of options.\n\
Answer with exactly one line and nothing else:\n\
NEAR: <new question>\n\n\
Question: {question}";

/// The three prompt templates used by generation.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    pub tau1: PromptTemplate,
    pub tau2: PromptTemplate,
    pub near_utility: PromptTemplate,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin(DEFAULT_DECLARATIVE_PROBABILITY)
    }
}

impl TemplateSet {
    pub fn builtin(declarative_probability: f64) -> Self {
        Self {
            tau1: PromptTemplate::new(TemplateKind::Tau1, TAU1_DEFAULT, declarative_probability)
                .expect("builtin template"),
            tau2: PromptTemplate::new(TemplateKind::Tau2, TAU2_DEFAULT, declarative_probability)
                .expect("builtin template"),
            near_utility: PromptTemplate::new(TemplateKind::NearUtility, NEAR_UTILITY_DEFAULT, 0.0)
                .expect("builtin template"),
        }
    }

    /// Load `tau1.txt`, `tau2.txt` and `near_utility.txt` from `dir`; missing
    /// files fall back to the built-in text.
    pub fn load_dir(dir: &Path, declarative_probability: f64) -> Result<Self> {
        let mut set = Self::builtin(declarative_probability);
        for kind in [TemplateKind::Tau1, TemplateKind::Tau2, TemplateKind::NearUtility] {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&path)?;
            let p = if kind == TemplateKind::NearUtility { 0.0 } else { declarative_probability };
            let t = PromptTemplate::new(kind, text.trim_end(), p)?;
            match kind {
                TemplateKind::Tau1 => set.tau1 = t,
                TemplateKind::Tau2 => set.tau2 = t,
                TemplateKind::NearUtility => set.near_utility = t,
            }
        }
        Ok(set)
    }
}

/// Text-completion client for the surrogate LLM.
pub trait SurrogateClient: Send + Sync {
    fn complete(&self, prompt: &str, max_tokens: u32) -> Result<String>;
}

/// In-process surrogate driven by a closure; counts calls.
pub struct MockSurrogate {
    respond: Box<dyn Fn(&str, usize) -> Result<String> + Send + Sync>,
    calls: AtomicUsize,
}

impl MockSurrogate {
    /// `respond(prompt, call_index)`
    pub fn new(respond: impl Fn(&str, usize) -> Result<String> + Send + Sync + 'static) -> Self {
        Self { respond: Box::new(respond), calls: AtomicUsize::new(0) }
    }

    /// Replays `responses` in order, repeating the last one.
    pub fn scripted(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty());
        Self::new(move |_, i| Ok(responses[i.min(responses.len() - 1)].clone()))
    }

    /// Deterministic rule-based rewriter that answers every template in the
    /// tagged-line format.
    pub fn rule_based() -> Self {
        Self::new(|prompt, _| Ok(rule_based_response(prompt)))
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl SurrogateClient for MockSurrogate {
    fn complete(&self, prompt: &str, _max_tokens: u32) -> Result<String> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.respond)(prompt, i)
    }
}

fn extract_question(prompt: &str) -> &str {
    prompt
        .rsplit_once("Question: ")
        .map(|(_, q)| q.split('\n').next().unwrap_or(q))
        .unwrap_or(prompt)
        .trim()
}

fn rule_based_response(prompt: &str) -> String {
    let q = extract_question(prompt).trim_end_matches('?');
    let words: Vec<&str> = q.split_whitespace().collect();
    let contrast = |prefix: &str| -> String {
        let mut w: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        if let Some(last) = w.last_mut() {
            *last = format!("{prefix} {last}");
        } else {
            w.push(prefix.to_string());
        }
        format!("{}?", w.join(" "))
    };
    if prompt.contains("PARAPHRASE:") {
        format!(
            "PARAPHRASE: Could you tell me {}?\nCONTRAST: {}",
            q.to_lowercase(),
            contrast("not")
        )
    } else if prompt.contains("NEAR:") {
        format!("NEAR: {}", contrast("other"))
    } else {
        format!("CONTRAST: {}", contrast("never"))
    }
}

fn tagged_line<'a>(text: &'a str, tag: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let l = l.trim();
        let rest = l.strip_prefix(tag)?;
        let rest = rest.trim();
        (!rest.is_empty()).then_some(rest)
    })
}

/// Parse a tau1 response: `(paraphrase, contrast)`.
pub fn parse_tau1(text: &str) -> Option<(String, String)> {
    Some((tagged_line(text, "PARAPHRASE:")?.to_string(), tagged_line(text, "CONTRAST:")?.to_string()))
}

pub fn parse_tau2(text: &str) -> Option<String> {
    tagged_line(text, "CONTRAST:").map(str::to_string)
}

pub fn parse_near_utility(text: &str) -> Option<String> {
    tagged_line(text, "NEAR:").map(str::to_string)
}

#[derive(Debug, Clone)]
pub struct GenerationOptions {
    /// Retries after the first attempt for each surrogate call.
    pub retry_limit: usize,
    pub max_tokens: u32,
    pub concurrency: usize,
    pub rng_seed: u64,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        Self { retry_limit: 3, max_tokens: 256, concurrency: 4, rng_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedTriple {
    pub triple: AugmentedTriple,
    /// Parse-failure retries spent across both surrogate calls.
    pub retries: usize,
}

fn call_with_retries<T, R: Rng + ?Sized>(
    seed: &SeedQuestion,
    surrogate: &dyn SurrogateClient,
    template: &PromptTemplate,
    question: &str,
    opts: &GenerationOptions,
    rng: &mut R,
    parse: impl Fn(&str) -> Option<T>,
) -> Result<(T, usize)> {
    let attempts = opts.retry_limit + 1;
    for attempt in 0..attempts {
        let prompt = render_prompt(template, question, rng)?;
        let text = surrogate.complete(&prompt, opts.max_tokens)?;
        if let Some(parsed) = parse(&text) {
            return Ok((parsed, attempt));
        }
        tracing::warn!(seed = %seed.id, template = %template.kind(), attempt, "unparseable surrogate response");
    }
    Err(Error::UnparseableResponse { seed_id: seed.id.clone(), attempts })
}

/// Generate one augmented triple for `seed`.
pub fn generate_triple<R: Rng + ?Sized>(
    seed: &SeedQuestion,
    surrogate: &dyn SurrogateClient,
    templates: &TemplateSet,
    opts: &GenerationOptions,
    rng: &mut R,
) -> Result<GeneratedTriple> {
    if seed.text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    let q_s = seed.text.trim();
    let valid_tau1 = |t: &str| parse_tau1(t).filter(|(p, c)| p != q_s && c != q_s && p != c);
    let ((q_p, q_c), r1) = call_with_retries(seed, surrogate, &templates.tau1, q_s, opts, rng, valid_tau1)?;
    let valid_tau2 = |t: &str| parse_tau2(t).filter(|c| c != q_s && *c != q_p && *c != q_c);
    let (q_pc, r2) = call_with_retries(seed, surrogate, &templates.tau2, &q_p, opts, rng, valid_tau2)?;
    let retries = r1 + r2;
    if retries > 0 {
        tracing::info!(seed = %seed.id, retries, "triple produced after retries");
    }
    Ok(GeneratedTriple { triple: AugmentedTriple::new(&seed.id, q_s, q_p, q_c, q_pc)?, retries })
}

#[derive(Debug, Default)]
pub struct GenerationSummary {
    pub triples: Vec<GeneratedTriple>,
    /// Seeds whose triple was dropped, with the reason.
    pub skipped: Vec<(String, String)>,
}

fn seed_rng(base: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index as u64);
    rng
}

/// Generate triples for all seeds with at most `opts.concurrency` surrogate
/// calls in flight. Output order follows `seeds`; unparseable seeds are
/// dropped and listed in `skipped`. Transport failures abort the run.
pub fn generate_all(
    seeds: &[SeedQuestion],
    surrogate: &dyn SurrogateClient,
    templates: &TemplateSet,
    opts: &GenerationOptions,
) -> Result<GenerationSummary> {
    let workers = opts.concurrency.max(1).min(seeds.len().max(1));
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<GeneratedTriple>>>> =
        Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() {
                    break;
                }
                let mut rng = seed_rng(opts.rng_seed, i);
                let r = generate_triple(&seeds[i], surrogate, templates, opts, &mut rng);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let mut summary = GenerationSummary::default();
    for (seed, r) in seeds.iter().zip(results.into_inner().expect("results lock")) {
        match r.expect("every seed processed") {
            Ok(t) => summary.triples.push(t),
            Err(e @ (Error::UnparseableResponse { .. } | Error::InvalidPlan(_) | Error::EmptyText)) => {
                tracing::warn!(seed = %seed.id, error = %e, "triple skipped");
                summary.skipped.push((seed.id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

/// Ask the surrogate for a near-utility variant of `question`.
pub fn generate_near_utility<R: Rng + ?Sized>(
    question: &SeedQuestion,
    surrogate: &dyn SurrogateClient,
    templates: &TemplateSet,
    opts: &GenerationOptions,
    rng: &mut R,
) -> Result<String> {
    let q = question.text.trim();
    let parse = |t: &str| parse_near_utility(t).filter(|n| n != q);
    call_with_retries(question, surrogate, &templates.near_utility, q, opts, rng, parse).map(|(n, _)| n)
}

#[derive(Debug, Clone, Copy)]
pub struct AssembleOptions {
    pub include_type2: bool,
    pub include_type3: bool,
}

impl Default for AssembleOptions {
    fn default() -> Self {
        Self { include_type2: true, include_type3: true }
    }
}

/// Expand triples into labeled pairs: `(q_s, q_p, 1)`, `(q_s, q_c, 0)`,
/// `(q_p, q_pc, 0)` per triple, in triple order.
pub fn assemble_dataset(triples: &[AugmentedTriple], opts: AssembleOptions) -> Result<TrainingDataset> {
    if triples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut pairs = Vec::with_capacity(triples.len() * 3);
    for t in triples {
        pairs.push(LabeledPair::new(&t.q_s, &t.q_p, 1, 1, &t.seed_id)?);
        if opts.include_type2 {
            pairs.push(LabeledPair::new(&t.q_s, &t.q_c, 0, 2, &t.seed_id)?);
        }
        if opts.include_type3 {
            pairs.push(LabeledPair::new(&t.q_p, &t.q_pc, 0, 3, &t.seed_id)?);
        }
    }
    Ok(TrainingDataset::new(pairs))
}

/// `count` negatives pairing questions of two distinct seeds chosen uniformly.
pub fn generate_random_negatives<R: Rng + ?Sized>(
    seeds: &[SeedQuestion],
    count: usize,
    rng: &mut R,
) -> Result<TrainingDataset> {
    if seeds.len() < 2 {
        return Err(Error::InsufficientSeeds(seeds.len()));
    }
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let i = rng.gen_range(0..seeds.len());
        let mut j = rng.gen_range(0..seeds.len() - 1);
        if j >= i {
            j += 1;
        }
        let mut p = LabeledPair::new(&seeds[i].text, &seeds[j].text, 0, 2, &seeds[i].id)?;
        p.partner_seed_id = Some(seeds[j].id.clone());
        pairs.push(p);
    }
    Ok(TrainingDataset::new(pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed() -> SeedQuestion {
        SeedQuestion::new("nq-1", "who wrote the declaration of independence")
    }

    const TAU1_OK: &str = "PARAPHRASE: which person authored the declaration of independence\n\
                           CONTRAST: who signed the declaration of independence";
    const TAU2_OK: &str = "CONTRAST: which person read the declaration of independence aloud";

    #[test]
    fn render_respects_probability_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let never = PromptTemplate::new(TemplateKind::Tau1, "Q: {question}", 0.0).unwrap();
        let always = PromptTemplate::new(TemplateKind::Tau1, "Q: {question}", 1.0).unwrap();
        for _ in 0..50 {
            let out = render_prompt(&never, "why", &mut rng).unwrap();
            assert_eq!(out, "Q: why");
            assert!(render_prompt(&always, "why", &mut rng).unwrap().ends_with(DECLARATIVE_SUFFIX));
        }
    }

    #[test]
    fn render_is_deterministic() {
        let t = PromptTemplate::new(TemplateKind::Tau2, "{question}?", 0.5).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..20).map(|_| render_prompt(&t, "q", &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn malformed_templates() {
        assert!(matches!(PromptTemplate::new(TemplateKind::Tau1, "no slot", 0.1), Err(Error::MalformedTemplate(_))));
        assert!(PromptTemplate::new(TemplateKind::Tau1, "{question} {question}", 0.1).is_err());
        assert!(PromptTemplate::new(TemplateKind::Tau1, "{question}", 1.5).is_err());
        let t = PromptTemplate::new(TemplateKind::Tau1, "{question}", 0.0).unwrap();
        assert!(matches!(render_prompt(&t, "  ", &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::EmptyText)));
    }

    #[test]
    fn mock_round_trip() {
        let mock = MockSurrogate::new(|p, _| Ok(if p.contains("PARAPHRASE:") { TAU1_OK } else { TAU2_OK }.into()));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = generate_triple(&seed(), &mock, &TemplateSet::default(), &GenerationOptions::default(), &mut rng)
            .unwrap();
        assert_eq!(g.retries, 0);
        assert_eq!(
            g.triple,
            AugmentedTriple {
                seed_id: "nq-1".into(),
                q_s: "who wrote the declaration of independence".into(),
                q_p: "which person authored the declaration of independence".into(),
                q_c: "who signed the declaration of independence".into(),
                q_pc: "which person read the declaration of independence aloud".into(),
            }
        );
        assert_eq!(mock.calls(), 2);
    }

    #[test]
    fn retries_then_success() {
        let mock = MockSurrogate::scripted(vec!["garbage".into(), "PARAPHRASE: only one tag".into(), TAU1_OK.into(), TAU2_OK.into()]);
        let opts = GenerationOptions { retry_limit: 3, ..Default::default() };
        let g = generate_triple(&seed(), &mock, &TemplateSet::default(), &opts, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(g.retries, 2);
        assert_eq!(mock.calls(), 4);
    }

    #[test]
    fn always_malformed_fails_after_limit() {
        let mock = MockSurrogate::scripted(vec!["nope".into()]);
        let opts = GenerationOptions { retry_limit: 3, ..Default::default() };
        let err = generate_triple(&seed(), &mock, &TemplateSet::default(), &opts, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::UnparseableResponse { attempts: 4, .. }));
        assert_eq!(mock.calls(), 4);
    }

    #[test]
    fn transport_errors_are_not_retried() {
        let mock = MockSurrogate::new(|_, _| Err(Error::SurrogateUnavailable("down".into())));
        let err = generate_triple(&seed(), &mock, &TemplateSet::default(), &GenerationOptions::default(), &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap_err();
        assert!(matches!(err, Error::SurrogateUnavailable(_)));
        assert_eq!(mock.calls(), 1);
    }

    #[test]
    fn generate_all_keeps_order_and_skips() {
        let seeds: Vec<_> = (0..10).map(|i| SeedQuestion::new(format!("s{i}"), format!("what is item number {i}"))).collect();
        let mock = MockSurrogate::new(|p, _| {
            if p.contains("number 3") { Ok("bad".into()) } else { Ok(rule_based_response(p)) }
        });
        let opts = GenerationOptions { concurrency: 3, retry_limit: 1, ..Default::default() };
        let s = generate_all(&seeds, &mock, &TemplateSet::default(), &opts).unwrap();
        let ids: Vec<_> = s.triples.iter().map(|t| t.triple.seed_id.as_str()).collect();
        assert_eq!(ids, ["s0", "s1", "s2", "s4", "s5", "s6", "s7", "s8", "s9"]);
        assert_eq!(s.skipped.len(), 1);
        assert_eq!(s.skipped[0].0, "s3");
    }

    #[test]
    fn rule_based_mock_produces_valid_triples() {
        let mock = MockSurrogate::rule_based();
        let g = generate_triple(&seed(), &mock, &TemplateSet::default(), &GenerationOptions::default(), &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(g.retries, 0);
        let n = generate_near_utility(&seed(), &mock, &TemplateSet::default(), &GenerationOptions::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_ne!(n, seed().text);
    }

    #[test]
    fn assemble_shapes() {
        let t = AugmentedTriple::new("s", "a", "b", "c", "d").unwrap();
        let ds = assemble_dataset(std::slice::from_ref(&t), AssembleOptions::default()).unwrap();
        let labels: Vec<u8> = ds.pairs().iter().map(|p| p.label).collect();
        assert_eq!(labels, [1, 0, 0]);
        let types: Vec<u8> = ds.pairs().iter().map(|p| p.pair_type).collect();
        assert_eq!(types, [1, 2, 3]);
        assert_eq!((ds.pairs()[2].text_a.as_str(), ds.pairs()[2].text_b.as_str()), ("b", "d"));

        let triples: Vec<_> = (0..6000)
            .map(|i| AugmentedTriple::new(format!("s{i}"), format!("q{i}"), format!("p{i}"), format!("c{i}"), format!("pc{i}")).unwrap())
            .collect();
        let full = assemble_dataset(&triples, AssembleOptions::default()).unwrap();
        assert_eq!((full.len(), full.positives()), (18_000, 6_000));
        let no3 = assemble_dataset(&triples, AssembleOptions { include_type3: false, ..Default::default() }).unwrap();
        assert_eq!(no3.len(), 12_000);
        assert!(assemble_dataset(&[], AssembleOptions::default()).is_err());
    }

    #[test]
    fn triple_requires_distinct_texts() {
        assert!(AugmentedTriple::new("s", "a", "a", "c", "d").is_err());
        assert!(AugmentedTriple::new("s", "a", "b", "", "d").is_err());
    }

    #[test]
    fn random_negatives_never_self_pair() {
        let seeds: Vec<_> = (0..5).map(|i| SeedQuestion::new(format!("s{i}"), format!("question {i}"))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ds = generate_random_negatives(&seeds, 200, &mut rng).unwrap();
        assert_eq!(ds.len(), 200);
        for p in ds.pairs() {
            assert_eq!(p.label, 0);
            assert_ne!(Some(&p.seed_id), p.partner_seed_id.as_ref());
        }
        let again = generate_random_negatives(&seeds, 200, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(ds, again);

        let two = &seeds[..2];
        let ds = generate_random_negatives(two, 20, &mut rng).unwrap();
        for p in ds.pairs() {
            let mut ids = [p.seed_id.clone(), p.partner_seed_id.clone().unwrap()];
            ids.sort();
            assert_eq!(ids, ["s0", "s1"]);
        }
        assert!(matches!(generate_random_negatives(&seeds[..1], 3, &mut rng), Err(Error::InsufficientSeeds(1))));
    }
}
