//! Bidirectional trigram infiller used as the reference masked language model.
//!
//! The fill distribution multiplies a left-to-right trigram factor
//! `p_fwd(z | l2, l1)` with a right-to-left factor `p_bwd(z | r1, r2)`, both
//! additive-smoothed with `delta`, and renormalizes over the vocabulary.
//! Sentences are padded with [`BOS`] / [`EOS`], so a side holding a single
//! token conditions on that token and the boundary.
//!
//! Fallbacks:
//! - a side with no tokens at all contributes no factor; when both sides are
//!   empty the smoothed unigram distribution is returned;
//! - with `delta == 0` an unseen context contributes the unigram factor, and a
//!   product that vanishes everywhere falls back to the unigram distribution.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{MaskedContext, MaskedLanguageModel, ModelError, PerplexityScorer, VocabDistribution};
use crate::text::TokenizedText;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
/// Default additive smoothing.
pub const DEFAULT_DELTA: f64 = 0.1;

const BOS_ID: u32 = 0;
const EOS_ID: u32 = 1;
const UNKNOWN_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Default, PartialEq)]
struct ContextCounts {
    total: u64,
    next: HashMap<u32, u64>,
}

type Table = HashMap<(u32, u32), ContextCounts>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NgramFile", try_from = "NgramFile")]
pub struct NgramInfiller {
    delta: f64,
    vocab: Vec<Arc<str>>,
    index: HashMap<Arc<str>, u32>,
    unigram: Vec<u64>,
    unigram_total: u64,
    forward: Table,
    backward: Table,
}

impl NgramInfiller {
    /// An untrained model; every query fails until [`NgramInfiller::train`] runs.
    pub fn new(delta: f64) -> Self {
        Self {
            delta,
            vocab: Vec::new(),
            index: HashMap::new(),
            unigram: Vec::new(),
            unigram_total: 0,
            forward: Table::new(),
            backward: Table::new(),
        }
    }

    pub fn train<'a, I>(&mut self, corpus: I) -> Result<(), ModelError>
    where
        I: IntoIterator<Item = &'a TokenizedText>,
    {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(ModelError::InvalidParameter(format!(
                "smoothing delta must be finite and >= 0, got {}",
                self.delta
            )));
        }
        let mut model = Self::new(self.delta);
        model.intern(BOS);
        model.intern(EOS);
        let mut sentences = 0usize;
        for text in corpus {
            if text.is_empty() {
                continue;
            }
            sentences += 1;
            let ids: Vec<u32> = text
                .tokens()
                .iter()
                .map(|t| model.intern(t.surface()))
                .collect();
            for &id in &ids {
                model.unigram[id as usize] += 1;
                model.unigram_total += 1;
            }
            let mut padded = vec![BOS_ID, BOS_ID];
            padded.extend_from_slice(&ids);
            padded.push(EOS_ID);
            for w in padded.windows(3) {
                bump(&mut model.forward, (w[0], w[1]), w[2]);
            }
            let mut padded = vec![BOS_ID];
            padded.extend_from_slice(&ids);
            padded.extend([EOS_ID, EOS_ID]);
            for w in padded.windows(3) {
                bump(&mut model.backward, (w[1], w[2]), w[0]);
            }
        }
        if sentences == 0 {
            return Err(ModelError::EmptyCorpus);
        }
        *self = model;
        Ok(())
    }

    fn intern(&mut self, surface: &str) -> u32 {
        if let Some(&id) = self.index.get(surface) {
            return id;
        }
        let id = self.vocab.len() as u32;
        let key: Arc<str> = Arc::from(surface);
        self.vocab.push(key.clone());
        self.index.insert(key, id);
        self.unigram.push(0);
        id
    }

    pub fn is_trained(&self) -> bool {
        !self.vocab.is_empty()
    }

    /// Vocabulary size, boundary symbols included.
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocabulary(&self) -> impl Iterator<Item = &str> {
        self.vocab.iter().map(|s| &**s)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    fn id(&self, surface: &str) -> u32 {
        self.index.get(surface).copied().unwrap_or(UNKNOWN_ID)
    }

    fn unigram_probs(&self) -> Vec<f64> {
        let v = self.vocab.len() as f64;
        let denom = self.unigram_total as f64 + self.delta * v;
        self.unigram
            .iter()
            .map(|&c| (c as f64 + self.delta) / denom)
            .collect()
    }

    /// One directional factor over the whole vocabulary.
    fn factor(&self, table: &Table, key: (u32, u32), unigram: &[f64]) -> Vec<f64> {
        let v = self.vocab.len();
        match table.get(&key) {
            Some(counts) if counts.total > 0 => {
                let denom = counts.total as f64 + self.delta * v as f64;
                let mut out = vec![self.delta / denom; v];
                for (&z, &c) in &counts.next {
                    out[z as usize] = (c as f64 + self.delta) / denom;
                }
                out
            }
            _ if self.delta > 0.0 => vec![1.0 / v as f64; v],
            _ => unigram.to_vec(),
        }
    }

    fn fill_probs(&self, ctx: &MaskedContext) -> Result<Vec<f64>, ModelError> {
        if !self.is_trained() {
            return Err(ModelError::NotTrained);
        }
        let unigram = self.unigram_probs();
        let forward_key = match ctx.left.as_slice() {
            [] => None,
            [only] => Some((BOS_ID, self.id(only))),
            [.., l2, l1] => Some((self.id(l2), self.id(l1))),
        };
        let backward_key = match ctx.right.as_slice() {
            [] => None,
            [only] => Some((self.id(only), EOS_ID)),
            [r1, r2, ..] => Some((self.id(r1), self.id(r2))),
        };
        let mut probs = match (forward_key, backward_key) {
            (None, None) => return Ok(unigram),
            (Some(f), None) => self.factor(&self.forward, f, &unigram),
            (None, Some(b)) => self.factor(&self.backward, b, &unigram),
            (Some(f), Some(b)) => {
                let mut p = self.factor(&self.forward, f, &unigram);
                let q = self.factor(&self.backward, b, &unigram);
                p.iter_mut().zip(&q).for_each(|(x, y)| *x *= y);
                p
            }
        };
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Ok(unigram);
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Ok(probs)
    }

    /// Left-to-right probability of `z` after `(l2, l1)`, floored so unseen
    /// tokens never yield zero.
    fn forward_prob(&self, l2: u32, l1: u32, z: u32) -> f64 {
        let v = self.vocab.len() as f64;
        let floor = 1.0 / (self.unigram_total as f64 + v);
        let p = match self.forward.get(&(l2, l1)) {
            Some(counts) if counts.total > 0 => {
                let c = counts.next.get(&z).copied().unwrap_or(0) as f64;
                (c + self.delta) / (counts.total as f64 + self.delta * v)
            }
            _ if self.delta > 0.0 => 1.0 / v,
            _ => 0.0,
        };
        if p > 0.0 {
            return p;
        }
        let unigram = self
            .unigram
            .get(z as usize)
            .map_or(0.0, |&c| c as f64 / self.unigram_total as f64);
        if unigram > 0.0 {
            unigram
        } else {
            floor
        }
    }
}

fn bump(table: &mut Table, key: (u32, u32), z: u32) {
    let entry = table.entry(key).or_default();
    entry.total += 1;
    *entry.next.entry(z).or_default() += 1;
}

impl MaskedLanguageModel for NgramInfiller {
    fn predict(&self, ctx: &MaskedContext) -> Result<VocabDistribution, ModelError> {
        let probs = self.fill_probs(ctx)?;
        VocabDistribution::new(self.vocab.iter().cloned().zip(probs).collect())
    }
}

impl PerplexityScorer for NgramInfiller {
    /// Left-to-right trigram perplexity over the text's tokens.
    fn perplexity(&self, text: &TokenizedText) -> Result<f64, ModelError> {
        if !self.is_trained() {
            return Err(ModelError::NotTrained);
        }
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let (mut l2, mut l1) = (BOS_ID, BOS_ID);
        let mut nll = 0.0;
        for token in text.tokens() {
            let z = self.id(token.surface());
            nll -= self.forward_prob(l2, l1, z).ln();
            (l2, l1) = (l1, z);
        }
        Ok((nll / text.len() as f64).exp())
    }
}

pub fn train_reference_mlm<'a, I>(corpus: I, delta: f64) -> Result<NgramInfiller, ModelError>
where
    I: IntoIterator<Item = &'a TokenizedText>,
{
    let mut model = NgramInfiller::new(delta);
    model.train(corpus)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct NgramFile {
    delta: f64,
    vocab: Vec<String>,
    unigram: Vec<u64>,
    /// `[l2, l1, z, count]`, sorted.
    forward: Vec<[u64; 4]>,
    /// `[r1, r2, z, count]`, sorted.
    backward: Vec<[u64; 4]>,
}

fn flatten(table: &Table) -> Vec<[u64; 4]> {
    let mut rows: Vec<[u64; 4]> = table
        .iter()
        .flat_map(|(&(a, b), counts)| {
            counts
                .next
                .iter()
                .map(move |(&z, &c)| [a as u64, b as u64, z as u64, c])
        })
        .collect();
    rows.sort_unstable();
    rows
}

impl From<NgramInfiller> for NgramFile {
    fn from(model: NgramInfiller) -> Self {
        Self {
            delta: model.delta,
            forward: flatten(&model.forward),
            backward: flatten(&model.backward),
            vocab: model.vocab.iter().map(|s| s.to_string()).collect(),
            unigram: model.unigram,
        }
    }
}

impl TryFrom<NgramFile> for NgramInfiller {
    type Error = String;

    fn try_from(file: NgramFile) -> Result<Self, Self::Error> {
        if file.vocab.len() != file.unigram.len() {
            return Err("vocab and unigram lengths differ".into());
        }
        let v = file.vocab.len() as u64;
        let mut model = Self::new(file.delta);
        for surface in &file.vocab {
            model.intern(surface);
        }
        if model.vocab.len() != file.vocab.len() {
            return Err("duplicate vocabulary entry".into());
        }
        model.unigram = file.unigram;
        model.unigram_total = model.unigram.iter().sum();
        for (rows, table) in [
            (file.forward, &mut model.forward),
            (file.backward, &mut model.backward),
        ] {
            for [a, b, z, c] in rows {
                if a >= v || b >= v || z >= v {
                    return Err(format!("n-gram id out of range in [{a}, {b}, {z}]"));
                }
                let entry = table.entry((a as u32, b as u32)).or_default();
                entry.total += c;
                *entry.next.entry(z as u32).or_default() += c;
            }
        }
        Ok(model)
    }
}

/// Context-free unigram model, mostly useful as a perplexity baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnigramModel {
    probs: HashMap<String, f64>,
}

impl UnigramModel {
    pub fn uniform<S: AsRef<str>>(vocab: &[S]) -> Self {
        let p = 1.0 / vocab.len() as f64;
        Self {
            probs: vocab.iter().map(|w| (w.as_ref().to_string(), p)).collect(),
        }
    }

    pub fn from_probs(probs: HashMap<String, f64>) -> Result<Self, ModelError> {
        if probs.values().any(|&p| !(0.0..=1.0).contains(&p)) {
            return Err(ModelError::InvalidDistribution(
                "unigram probability outside [0, 1]".into(),
            ));
        }
        Ok(Self { probs })
    }
}

impl PerplexityScorer for UnigramModel {
    fn perplexity(&self, text: &TokenizedText) -> Result<f64, ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let mut nll = 0.0;
        for token in text.tokens() {
            match self.probs.get(token.surface()) {
                Some(&p) if p > 0.0 => nll -= p.ln(),
                _ => return Err(ModelError::OutOfVocabulary(token.surface().to_string())),
            }
        }
        Ok((nll / text.len() as f64).exp())
    }
}
