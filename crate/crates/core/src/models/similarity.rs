use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{ModelError, SimilarityScorer, Window};
use crate::text::{Token, TokenizedText};

/// Word vectors keyed by surface, all of one dimension.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: impl Into<String>, vector: Vec<f64>) -> Result<(), ModelError> {
        if vector.len() != self.dim {
            return Err(ModelError::InvalidParameter(format!(
                "vector of dimension {} in a {}-dimensional table",
                vector.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.into(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Exact surface first, then lowercased.
    pub fn get(&self, surface: &str) -> Option<&[f64]> {
        self.vectors
            .get(surface)
            .or_else(|| self.vectors.get(&surface.to_lowercase()))
            .map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.vectors.iter().map(|(w, v)| (w.as_str(), v.as_slice()))
    }
}

/// Reads "word v1 v2 ... vd" lines; every line must share one dimension.
pub fn load_word_vectors(path: &Path) -> Result<WordVectors, ModelError> {
    let file = File::open(path)
        .map_err(|e| ModelError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut table: Option<WordVectors> = None;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        let mut fields = line.split(' ').filter(|f| !f.is_empty());
        let Some(word) = fields.next() else { continue };
        let vector = fields
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| ModelError::Io(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        let table = table.get_or_insert_with(|| WordVectors::new(vector.len()));
        table
            .insert(word, vector)
            .map_err(|e| ModelError::Io(format!("{}:{}: {e}", path.display(), idx + 1)))?;
    }
    Ok(table.unwrap_or_default())
}

/// Writes the format [`load_word_vectors`] reads, with round-trip float
/// formatting. Words are sorted.
pub fn write_word_vectors(vectors: &WordVectors, path: &Path) -> Result<(), ModelError> {
    let err = |e: std::io::Error| ModelError::Io(format!("cannot write {}: {e}", path.display()));
    let mut rows: Vec<(&str, &[f64])> = vectors.iter().collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = std::io::BufWriter::new(File::create(path).map_err(err)?);
    for (word, v) in rows {
        let mut line = word.to_string();
        for x in v {
            line.push(' ');
            line.push_str(&x.to_string());
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(err)?;
    }
    out.flush().map_err(err)
}

fn crop(text: &TokenizedText, window: Option<Window>) -> &[Token] {
    match window {
        Some(w) => w.crop(text.tokens()),
        None => text.tokens(),
    }
}

/// Jaccard index of lowercased token sets. Two empty texts score 1.
fn jaccard(a: &[Token], b: &[Token]) -> f64 {
    let set = |tokens: &[Token]| -> HashSet<String> {
        tokens.iter().map(|t| t.surface().to_lowercase()).collect()
    };
    let (a, b) = (set(a), set(b));
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    inter as f64 / union as f64
}

#[derive(Debug, Clone, Copy, Default)]
pub struct JaccardSimilarity;

impl SimilarityScorer for JaccardSimilarity {
    fn similarity(
        &self,
        a: &TokenizedText,
        b: &TokenizedText,
        window: Option<Window>,
    ) -> Result<f64, ModelError> {
        Ok(jaccard(crop(a, window), crop(b, window)))
    }
}

/// Cosine between mean word vectors. Falls back to [`JaccardSimilarity`]
/// when either side has no known word (or a zero mean vector).
#[derive(Debug, Clone, Default)]
pub struct EmbeddingSimilarity {
    vectors: WordVectors,
}

impl EmbeddingSimilarity {
    pub fn new(vectors: WordVectors) -> Self {
        Self { vectors }
    }

    pub fn vectors(&self) -> &WordVectors {
        &self.vectors
    }

    fn mean(&self, tokens: &[Token]) -> Option<Vec<f64>> {
        let mut sum = vec![0.0; self.vectors.dim()];
        let mut known = 0usize;
        for token in tokens {
            if let Some(v) = self.vectors.get(token.surface()) {
                sum.iter_mut().zip(v).for_each(|(s, x)| *s += x);
                known += 1;
            }
        }
        if known == 0 {
            return None;
        }
        sum.iter_mut().for_each(|s| *s /= known as f64);
        Some(sum)
    }
}

impl SimilarityScorer for EmbeddingSimilarity {
    fn similarity(
        &self,
        a: &TokenizedText,
        b: &TokenizedText,
        window: Option<Window>,
    ) -> Result<f64, ModelError> {
        let (a, b) = (crop(a, window), crop(b, window));
        if let (Some(u), Some(v)) = (self.mean(a), self.mean(b)) {
            let dot: f64 = u.iter().zip(&v).map(|(x, y)| x * y).sum();
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu > 0.0 && nv > 0.0 {
                return Ok((dot / (nu * nv)).clamp(-1.0, 1.0));
            }
        }
        Ok(jaccard(a, b))
    }
}
