use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LabelDistribution, ModelError, VictimClassifier};
use crate::text::{Dataset, TokenizedText};

/// Default Laplace smoothing.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Multinomial naive Bayes over lowercased token counts.
///
/// Pair examples are featurized as the concatenation of both texts. Tokens
/// never seen in training are ignored at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaiveBayes {
    alpha: f64,
    labels: Vec<String>,
    doc_counts: Vec<u64>,
    class_totals: Vec<u64>,
    token_counts: BTreeMap<String, Vec<u64>>,
}

impl NaiveBayes {
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            labels: Vec::new(),
            doc_counts: Vec::new(),
            class_totals: Vec::new(),
            token_counts: BTreeMap::new(),
        }
    }

    pub fn train(&mut self, data: &Dataset) -> Result<(), ModelError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "smoothing alpha must be finite and > 0, got {}",
                self.alpha
            )));
        }
        if data.label_set.len() < 2 {
            return Err(ModelError::TooFewLabels(data.label_set.len()));
        }
        if data.is_empty() {
            return Err(ModelError::EmptyCorpus);
        }
        let k = data.label_set.len();
        let mut model = Self::new(self.alpha);
        model.labels = data.label_set.clone();
        model.doc_counts = vec![0; k];
        model.class_totals = vec![0; k];
        for example in &data.examples {
            let class = model
                .labels
                .iter()
                .position(|l| *l == example.gold_label)
                .ok_or_else(|| {
                    ModelError::InvalidParameter(format!("unknown label {:?}", example.gold_label))
                })?;
            model.doc_counts[class] += 1;
            for feature in features(&example.text_a, example.text_b.as_ref()) {
                model
                    .token_counts
                    .entry(feature)
                    .or_insert_with(|| vec![0; k])[class] += 1;
                model.class_totals[class] += 1;
            }
        }
        *self = model;
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vocab_size(&self) -> usize {
        self.token_counts.len()
    }

    /// Unnormalized log joint per class.
    fn log_scores(&self, text: &TokenizedText, paired: Option<&TokenizedText>) -> Vec<f64> {
        let docs: u64 = self.doc_counts.iter().sum();
        let v = self.token_counts.len() as f64;
        let mut scores: Vec<f64> = self
            .doc_counts
            .iter()
            .map(|&d| (d as f64 / docs as f64).ln())
            .collect();
        for feature in features(text, paired) {
            if let Some(counts) = self.token_counts.get(&feature) {
                for (class, score) in scores.iter_mut().enumerate() {
                    let p = (counts[class] as f64 + self.alpha)
                        / (self.class_totals[class] as f64 + self.alpha * v);
                    *score += p.ln();
                }
            }
        }
        scores
    }
}

fn features(text: &TokenizedText, paired: Option<&TokenizedText>) -> Vec<String> {
    text.tokens()
        .iter()
        .chain(paired.into_iter().flat_map(|p| p.tokens()))
        .map(|t| t.surface().to_lowercase())
        .collect()
}

impl VictimClassifier for NaiveBayes {
    fn predict(
        &self,
        text: &TokenizedText,
        paired: Option<&TokenizedText>,
    ) -> Result<LabelDistribution, ModelError> {
        if self.labels.is_empty() {
            return Err(ModelError::NotTrained);
        }
        let scores = self.log_scores(text, paired);
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exp.iter().sum();
        LabelDistribution::new(
            self.labels
                .iter()
                .cloned()
                .zip(exp.into_iter().map(|e| e / total))
                .collect(),
        )
    }
}

pub fn train_reference_victim(train: &Dataset, alpha: f64) -> Result<NaiveBayes, ModelError> {
    let mut model = NaiveBayes::new(alpha);
    model.train(train)?;
    Ok(model)
}
