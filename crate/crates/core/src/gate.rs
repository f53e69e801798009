//! Answer-or-refuse decision: refuse iff the best forget-store similarity is
//! at least the threshold.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::store::StoreSnapshot;
use crate::vecmath::EmbeddingVector;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

/// Bundled refusal phrases, one per line.
pub const DEFAULT_REFUSALS: &str = include_str!("../assets/refusals.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RefusalSet {
    phrases: Vec<String>,
}

impl RefusalSet {
    pub fn new(phrases: Vec<String>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::InvalidRefusalSet("no phrases".into()));
        }
        for (i, p) in phrases.iter().enumerate() {
            if p.trim().is_empty() {
                return Err(Error::InvalidRefusalSet(format!("phrase {i} is empty")));
            }
            if phrases[..i].contains(p) {
                return Err(Error::InvalidRefusalSet(format!("duplicate phrase {p:?}")));
            }
        }
        Ok(Self { phrases })
    }

    /// One phrase per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let phrases = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_string)
            .collect();
        Self::new(phrases)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REFUSALS).expect("bundled refusal set is valid")
    }

    pub fn phrases(&self) -> &[String] {
        &self.phrases
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }
}

/// Uniform draw from the refusal set.
pub fn sample_refusal<'a, R: Rng + ?Sized>(set: &'a RefusalSet, rng: &mut R) -> &'a str {
    &set.phrases[rng.gen_range(0..set.phrases.len())]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub threshold: f64,
    pub rng_seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self { threshold: DEFAULT_THRESHOLD, rng_seed: 0 }
    }
}

impl GateConfig {
    pub fn new(threshold: f64, rng_seed: u64) -> Result<Self> {
        validate_threshold(threshold)?;
        Ok(Self { threshold, rng_seed })
    }
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if (0.0..=1.0).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::InvalidThreshold(threshold))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Answer,
    Refuse,
}

/// `Refuse` iff a score exists and `score >= threshold`.
#[inline]
pub fn verdict(s_max: Option<f64>, threshold: f64) -> Action {
    match s_max {
        Some(s) if s >= threshold => Action::Refuse,
        _ => Action::Answer,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateDecision {
    pub action: Action,
    pub s_max: Option<f64>,
    pub matched_id: Option<String>,
    pub refusal_text: Option<String>,
}

/// Score `query` against the store and decide. The refusal phrase comes from
/// `rng`; the action itself depends only on the score and the threshold.
pub fn decide<T: Scalar, R: Rng + ?Sized>(
    query: &EmbeddingVector<T>,
    store: &StoreSnapshot,
    threshold: f64,
    refusals: &RefusalSet,
    rng: &mut R,
) -> Result<GateDecision> {
    validate_threshold(threshold)?;
    let r = store.max_similarity(query)?;
    Ok(match verdict(r.score, threshold) {
        Action::Refuse => GateDecision {
            action: Action::Refuse,
            s_max: r.score,
            matched_id: r.id,
            refusal_text: Some(sample_refusal(refusals, rng).to_string()),
        },
        Action::Answer => GateDecision { action: Action::Answer, s_max: r.score, matched_id: None, refusal_text: None },
    })
}
