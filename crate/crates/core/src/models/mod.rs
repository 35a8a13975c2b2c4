//! Interfaces for every learned component an attack consults, plus the
//! desk-scale reference implementations and a remote JSON-over-HTTP client.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{Dataset, Token, TokenizedText};

mod grammar;
mod naive_bayes;
mod ngram;
mod pos;
mod remote;
mod similarity;

pub use grammar::RuleGrammarChecker;
pub use naive_bayes::{train_reference_victim, NaiveBayes, DEFAULT_ALPHA};
pub use ngram::{train_reference_mlm, NgramInfiller, UnigramModel, BOS, DEFAULT_DELTA, EOS};
pub use pos::{load_lexicon, write_lexicon, LexiconTagger, PosTag};
pub use remote::{ModelEndpoint, RemoteClient, Role};
pub use similarity::{
    load_word_vectors, write_word_vectors, EmbeddingSimilarity, JaccardSimilarity, WordVectors,
};

/// Tolerance for a distribution to count as normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model not trained")]
    NotTrained,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("training data needs at least two labels, found {0}")]
    TooFewLabels(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("perplexity of an empty text is undefined")]
    EmptyText,
    #[error("token {0:?} is outside the model vocabulary")]
    OutOfVocabulary(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("transport error calling {url} after {attempts} attempt(s): {message}")]
    Transport {
        url: String,
        attempts: u32,
        message: String,
    },
    #[error("malformed response from {url}: field {field:?}: {message}")]
    MalformedResponse {
        url: String,
        field: String,
        message: String,
    },
    #[error("{0}")]
    Io(String),
}

/// The three perturbation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionKind {
    Replace,
    Insert,
    Merge,
}

impl ActionKind {
    pub const ALL: [ActionKind; 3] = [ActionKind::Replace, ActionKind::Insert, ActionKind::Merge];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionKind::Replace => "replace",
            ActionKind::Insert => "insert",
            ActionKind::Merge => "merge",
        }
    }

    /// Number of source tokens the mask covers.
    pub fn span(self) -> usize {
        match self {
            ActionKind::Replace => 1,
            ActionKind::Insert => 0,
            ActionKind::Merge => 2,
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "replace" => Ok(Self::Replace),
            "insert" => Ok(Self::Insert),
            "merge" => Ok(Self::Merge),
            other => Err(format!("unknown action kind {other:?}")),
        }
    }
}

/// A text with a single mask: what the masked language model sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedContext {
    pub left: Vec<String>,
    pub right: Vec<String>,
    pub kind: ActionKind,
    pub origin_position: usize,
    pub replaced: Vec<String>,
}

impl MaskedContext {
    pub fn new(
        left: Vec<String>,
        right: Vec<String>,
        kind: ActionKind,
        origin_position: usize,
        replaced: Vec<String>,
    ) -> Result<Self, ModelError> {
        if replaced.len() != kind.span() {
            return Err(ModelError::InvalidParameter(format!(
                "{kind} mask must cover {} token(s), got {}",
                kind.span(),
                replaced.len()
            )));
        }
        Ok(Self {
            left,
            right,
            kind,
            origin_position,
            replaced,
        })
    }
}

fn check_probability(label: &str, p: f64) -> Result<(), ModelError> {
    if !(0.0..=1.0 + NORMALIZATION_TOLERANCE).contains(&p) || p.is_nan() {
        return Err(ModelError::InvalidDistribution(format!(
            "probability of {label:?} is {p}"
        )));
    }
    Ok(())
}

/// Victim output: probability per label, in label-set order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<(String, f64)>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<(String, f64)>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::InvalidDistribution("no labels".into()));
        }
        for (label, p) in &probs {
            check_probability(label, *p)?;
        }
        let sum: f64 = probs.iter().map(|(_, p)| p).sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!(
                "label probabilities sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.probs
    }

    /// Probability of `label`; zero for labels the distribution does not cover.
    pub fn prob(&self, label: &str) -> f64 {
        self.probs
            .iter()
            .find(|(l, _)| l == label)
            .map_or(0.0, |(_, p)| *p)
    }

    /// Most probable label; ties go to the earlier label.
    pub fn argmax(&self) -> &str {
        let mut best = &self.probs[0];
        for entry in &self.probs[1..] {
            if entry.1 > best.1 {
                best = entry;
            }
        }
        &best.0
    }
}

/// Masked language model output over its vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabDistribution {
    probs: Vec<(Arc<str>, f64)>,
}

impl VocabDistribution {
    pub fn new(probs: Vec<(Arc<str>, f64)>) -> Result<Self, ModelError> {
        for (token, p) in &probs {
            check_probability(token, *p)?;
        }
        let sum: f64 = probs.iter().map(|(_, p)| p).sum();
        if sum > 1.0 + NORMALIZATION_TOLERANCE {
            return Err(ModelError::InvalidDistribution(format!(
                "vocabulary probabilities sum to {sum}"
            )));
        }
        Ok(Self { probs })
    }

    pub fn entries(&self) -> &[(Arc<str>, f64)] {
        &self.probs
    }

    pub fn prob(&self, token: &str) -> f64 {
        self.probs
            .iter()
            .find(|(t, _)| &**t == token)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().map(|(_, p)| p).sum()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A token window of `size` centered on `center`, clipped at text bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub size: usize,
    pub center: usize,
}

impl Window {
    pub fn new(size: usize, center: usize) -> Self {
        Self { size, center }
    }

    /// Index range of the window within a text of `len` tokens.
    pub fn range(&self, len: usize) -> std::ops::Range<usize> {
        let before = self.size.saturating_sub(1) / 2;
        let start = self.center.saturating_sub(before);
        let end = (self.center + (self.size - before)).min(len);
        start.min(end)..end
    }

    pub fn crop<'a>(&self, tokens: &'a [Token]) -> &'a [Token] {
        &tokens[self.range(tokens.len())]
    }
}

pub trait MaskedLanguageModel: Send + Sync {
    fn predict(&self, ctx: &MaskedContext) -> Result<VocabDistribution, ModelError>;
}

pub trait VictimClassifier: Send + Sync {
    /// Label distribution for `text` (and its partner, for pair tasks).
    fn predict(
        &self,
        text: &TokenizedText,
        paired: Option<&TokenizedText>,
    ) -> Result<LabelDistribution, ModelError>;
}

pub trait SimilarityScorer: Send + Sync {
    /// Score in [-1, 1]. With a window, both texts are cropped first.
    fn similarity(
        &self,
        a: &TokenizedText,
        b: &TokenizedText,
        window: Option<Window>,
    ) -> Result<f64, ModelError>;
}

pub trait PerplexityScorer: Send + Sync {
    fn perplexity(&self, text: &TokenizedText) -> Result<f64, ModelError>;
}

pub trait GrammarChecker: Send + Sync {
    fn count_errors(&self, text: &TokenizedText) -> Result<usize, ModelError>;
}

pub trait PosTagger: Send + Sync {
    fn tag(&self, text: &TokenizedText) -> Result<Vec<PosTag>, ModelError>;
}

/// Every model role an attack and its evaluation consult.
#[derive(Clone)]
pub struct ModelStack {
    pub mlm: Arc<dyn MaskedLanguageModel>,
    pub victim: Arc<dyn VictimClassifier>,
    pub similarity: Arc<dyn SimilarityScorer>,
    pub perplexity: Arc<dyn PerplexityScorer>,
    pub grammar: Arc<dyn GrammarChecker>,
    pub tagger: Arc<dyn PosTagger>,
}

impl ModelStack {
    pub fn with_victim(&self, victim: Arc<dyn VictimClassifier>) -> Self {
        Self {
            victim,
            ..self.clone()
        }
    }
}

/// Reference stack trained on `train`: trigram infiller (also the perplexity
/// scorer), naive Bayes victim, rule grammar checker and `tagger`. Similarity
/// uses `vectors` when given, Jaccard overlap otherwise.
pub fn reference_stack(
    train: &Dataset,
    vectors: Option<WordVectors>,
    tagger: LexiconTagger,
    delta: f64,
    alpha: f64,
) -> Result<ModelStack, ModelError> {
    let texts = train
        .examples
        .iter()
        .flat_map(|e| std::iter::once(&e.text_a).chain(e.text_b.as_ref()));
    let mlm = Arc::new(train_reference_mlm(texts, delta)?);
    let similarity: Arc<dyn SimilarityScorer> = match vectors {
        Some(v) => Arc::new(EmbeddingSimilarity::new(v)),
        None => Arc::new(JaccardSimilarity),
    };
    Ok(ModelStack {
        mlm: mlm.clone(),
        victim: Arc::new(train_reference_victim(train, alpha)?),
        similarity,
        perplexity: mlm,
        grammar: Arc::new(RuleGrammarChecker),
        tagger: Arc::new(tagger),
    })
}

impl fmt::Debug for ModelStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelStack").finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_centered_and_clipped() {
        assert_eq!(Window::new(15, 20).range(100), 13..28);
        assert_eq!(Window::new(15, 2).range(100), 0..10);
        assert_eq!(Window::new(15, 98).range(100), 91..100);
        assert_eq!(Window::new(1, 4).range(10), 4..5);
        assert_eq!(Window::new(4, 4).range(10), 3..7);
        // center past the end of a shorter text
        assert_eq!(Window::new(3, 9).range(5), 5..5);
    }

    #[test]
    fn label_argmax_ties_follow_order() {
        let d = LabelDistribution::new(vec![("b".into(), 0.5), ("a".into(), 0.5)]).unwrap();
        assert_eq!(d.argmax(), "b");
        assert_eq!(d.prob("a"), 0.5);
        assert_eq!(d.prob("zzz"), 0.0);
    }

    #[test]
    fn label_distribution_must_sum_to_one() {
        assert!(LabelDistribution::new(vec![("a".into(), 0.4), ("b".into(), 0.4)]).is_err());
        assert!(LabelDistribution::new(vec![("a".into(), -0.1), ("b".into(), 1.1)]).is_err());
    }

    #[test]
    fn masked_context_span_checked() {
        assert!(
            MaskedContext::new(vec![], vec![], ActionKind::Merge, 0, vec!["a".into()]).is_err()
        );
        assert!(MaskedContext::new(vec![], vec![], ActionKind::Insert, 0, vec![]).is_ok());
    }
}
