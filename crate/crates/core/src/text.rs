//! Word-level tokenization, labeled datasets and evaluation-subset sampling.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("invalid token surface {0:?}: must be non-empty and contain no whitespace")]
    InvalidToken(String),
    #[error("frozen position {position} out of range for text of {len} tokens")]
    FrozenOutOfRange { position: usize, len: usize },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: unknown label {label:?}")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        label: String,
    },
    #[error("duplicate label {0:?} in label set")]
    DuplicateLabel(String),
    #[error("example is not a text pair")]
    NotAPair,
}

pub(crate) fn is_punct_char(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

/// A single word or punctuation mark.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Token {
    surface: String,
    is_punct: bool,
}

impl Token {
    pub fn new(surface: impl Into<String>) -> Result<Self, TextError> {
        let surface = surface.into();
        if !Self::is_valid_surface(&surface) {
            return Err(TextError::InvalidToken(surface));
        }
        let is_punct = surface.chars().all(is_punct_char);
        Ok(Self { surface, is_punct })
    }

    pub fn is_valid_surface(surface: &str) -> bool {
        !surface.is_empty() && !surface.chars().any(char::is_whitespace)
    }

    pub fn surface(&self) -> &str {
        &self.surface
    }

    pub fn is_punct(&self) -> bool {
        self.is_punct
    }
}

impl TryFrom<String> for Token {
    type Error = TextError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Token::new(value)
    }
}

impl From<Token> for String {
    fn from(token: Token) -> Self {
        token.surface
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// A token sequence plus the set of positions an attack may not touch.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedText {
    tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    frozen: BTreeSet<usize>,
}

impl TokenizedText {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self {
            tokens,
            frozen: BTreeSet::new(),
        }
    }

    /// Builds a text from pre-split surfaces without any punctuation splitting.
    pub fn from_surfaces<S: AsRef<str>>(surfaces: &[S]) -> Result<Self, TextError> {
        let tokens = surfaces
            .iter()
            .map(|s| Token::new(s.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(tokens))
    }

    pub fn with_frozen(mut self, frozen: BTreeSet<usize>) -> Result<Self, TextError> {
        if let Some(&position) = frozen.iter().find(|&&p| p >= self.tokens.len()) {
            return Err(TextError::FrozenOutOfRange {
                position,
                len: self.tokens.len(),
            });
        }
        self.frozen = frozen;
        Ok(self)
    }

    pub(crate) fn from_parts(tokens: Vec<Token>, frozen: BTreeSet<usize>) -> Self {
        debug_assert!(frozen.iter().all(|&p| p < tokens.len()));
        Self { tokens, frozen }
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> Option<&Token> {
        self.tokens.get(i)
    }

    pub fn surfaces(&self) -> Vec<&str> {
        self.tokens.iter().map(Token::surface).collect()
    }

    pub fn surface_strings(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.surface.clone()).collect()
    }

    pub fn frozen(&self) -> &BTreeSet<usize> {
        &self.frozen
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for TokenizedText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(self))
    }
}

/// Splits on whitespace and detaches leading and trailing punctuation
/// characters into their own tokens. Internal punctuation ("don't") stays.
pub fn tokenize(raw: &str) -> TokenizedText {
    let mut tokens = Vec::new();
    for word in raw.split_whitespace() {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let lead = chars.iter().take_while(|(_, c)| is_punct_char(*c)).count();
        if lead == chars.len() {
            tokens.extend(chars.iter().map(|(_, c)| punct_token(*c)));
            continue;
        }
        let trail = chars
            .iter()
            .rev()
            .take_while(|(_, c)| is_punct_char(*c))
            .count();
        tokens.extend(chars[..lead].iter().map(|(_, c)| punct_token(*c)));
        let start = chars[lead].0;
        let end = chars
            .get(chars.len() - trail)
            .map_or(word.len(), |(offset, _)| *offset);
        tokens.push(Token {
            surface: word[start..end].to_string(),
            is_punct: false,
        });
        tokens.extend(
            chars[chars.len() - trail..]
                .iter()
                .map(|(_, c)| punct_token(*c)),
        );
    }
    TokenizedText::new(tokens)
}

fn punct_token(c: char) -> Token {
    Token {
        surface: c.to_string(),
        is_punct: true,
    }
}

/// Joins surfaces with single spaces, omitting the space before punctuation.
pub fn detokenize(text: &TokenizedText) -> String {
    let mut out = String::new();
    for (i, token) in text.tokens.iter().enumerate() {
        if i > 0 && !token.is_punct {
            out.push(' ');
        }
        out.push_str(&token.surface);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    SingleText,
    TextPair,
}

/// Which half of a text pair an attack targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text_a: TokenizedText,
    pub text_b: Option<TokenizedText>,
    pub gold_label: String,
}

impl LabeledExample {
    pub fn single(text: TokenizedText, label: impl Into<String>) -> Self {
        Self {
            text_a: text,
            text_b: None,
            gold_label: label.into(),
        }
    }

    pub fn pair(a: TokenizedText, b: TokenizedText, label: impl Into<String>) -> Self {
        Self {
            text_a: a,
            text_b: Some(b),
            gold_label: label.into(),
        }
    }

    pub fn text(&self, side: Side) -> Option<&TokenizedText> {
        match side {
            Side::A => Some(&self.text_a),
            Side::B => self.text_b.as_ref(),
        }
    }

    /// Token count of the text an attack would modify.
    pub fn attacked_len(&self) -> usize {
        match &self.text_b {
            Some(b) => self.text_a.len().max(b.len()),
            None => self.text_a.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub label_set: Vec<String>,
    pub task_kind: TaskKind,
}

impl Dataset {
    pub fn new(
        examples: Vec<LabeledExample>,
        label_set: Vec<String>,
        task_kind: TaskKind,
    ) -> Result<Self, TextError> {
        let mut seen = HashSet::new();
        for label in &label_set {
            if !seen.insert(label.as_str()) {
                return Err(TextError::DuplicateLabel(label.clone()));
            }
        }
        for example in &examples {
            if !seen.contains(example.gold_label.as_str()) {
                return Err(TextError::Malformed {
                    path: PathBuf::new(),
                    line: 0,
                    message: format!("label {:?} not in label set", example.gold_label),
                });
            }
        }
        Ok(Self {
            examples,
            label_set,
            task_kind,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Same label set and task kind, different examples.
    pub fn with_examples(&self, examples: Vec<LabeledExample>) -> Self {
        Self {
            examples,
            label_set: self.label_set.clone(),
            task_kind: self.task_kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl DatasetFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(Self::Jsonl),
            "tsv" => Some(Self::Tsv),
            _ => None,
        }
    }
}

/// Maps dataset fields onto example slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub text_field: String,
    pub text_b_field: Option<String>,
    pub label_field: String,
    /// Fixed label set; inferred in first-seen order when absent.
    pub labels: Option<Vec<String>>,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        Self {
            text_field: "text".into(),
            text_b_field: None,
            label_field: "label".into(),
            labels: None,
        }
    }
}

impl DatasetSchema {
    pub fn pair(a: &str, b: &str, label: &str) -> Self {
        Self {
            text_field: a.into(),
            text_b_field: Some(b.into()),
            label_field: label.into(),
            labels: None,
        }
    }
}

struct RawRecord {
    line: usize,
    text_a: String,
    text_b: Option<String>,
    label: String,
}

pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    schema: &DatasetSchema,
) -> Result<Dataset, TextError> {
    let io_err = |source| TextError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let lines = reader
        .lines()
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err)?;
    let records = match format {
        DatasetFormat::Jsonl => parse_jsonl(path, &lines, schema)?,
        DatasetFormat::Tsv => parse_tsv(path, &lines, schema)?,
    };

    let mut label_set = schema.labels.clone().unwrap_or_default();
    let fixed = schema.labels.is_some();
    let mut examples = Vec::with_capacity(records.len());
    for record in records {
        if !label_set.contains(&record.label) {
            if fixed {
                return Err(TextError::UnknownLabel {
                    path: path.to_path_buf(),
                    line: record.line,
                    label: record.label,
                });
            }
            label_set.push(record.label.clone());
        }
        examples.push(LabeledExample {
            text_a: tokenize(&record.text_a),
            text_b: record.text_b.as_deref().map(tokenize),
            gold_label: record.label,
        });
    }
    let task_kind = if schema.text_b_field.is_some() {
        TaskKind::TextPair
    } else {
        TaskKind::SingleText
    };
    Dataset::new(examples, label_set, task_kind)
}

fn parse_jsonl(
    path: &Path,
    lines: &[String],
    schema: &DatasetSchema,
) -> Result<Vec<RawRecord>, TextError> {
    let mut records = Vec::new();
    for (idx, line) in lines.iter().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| TextError::Malformed {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let object = value
            .as_object()
            .ok_or_else(|| malformed("record is not a JSON object".into()))?;
        let field = |name: &str| -> Result<String, TextError> {
            match object.get(name) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(serde_json::Value::Number(n)) => Ok(n.to_string()),
                Some(serde_json::Value::Bool(b)) => Ok(b.to_string()),
                Some(_) => Err(malformed(format!("field {name:?} is not a string"))),
                None => Err(malformed(format!("missing field {name:?}"))),
            }
        };
        records.push(RawRecord {
            line: line_no,
            text_a: field(&schema.text_field)?,
            text_b: schema.text_b_field.as_deref().map(field).transpose()?,
            label: field(&schema.label_field)?,
        });
    }
    Ok(records)
}

fn parse_tsv(
    path: &Path,
    lines: &[String],
    schema: &DatasetSchema,
) -> Result<Vec<RawRecord>, TextError> {
    let malformed = |line: usize, message: String| TextError::Malformed {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header: Vec<&str> = lines
        .first()
        .ok_or_else(|| malformed(1, "missing header row".into()))?
        .split('\t')
        .collect();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| malformed(1, format!("header has no column {name:?}")))
    };
    let text_col = column(&schema.text_field)?;
    let text_b_col = schema.text_b_field.as_deref().map(column).transpose()?;
    let label_col = column(&schema.label_field)?;

    let mut records = Vec::new();
    for (idx, line) in lines.iter().enumerate().skip(1) {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != header.len() {
            return Err(malformed(
                line_no,
                format!("expected {} columns, found {}", header.len(), cells.len()),
            ));
        }
        records.push(RawRecord {
            line: line_no,
            text_a: cells[text_col].to_string(),
            text_b: text_b_col.map(|c| cells[c].to_string()),
            label: cells[label_col].to_string(),
        });
    }
    Ok(records)
}

/// Writes a dataset as jsonl using the schema's field names. When `adversarial`
/// is given, each record gains a boolean `adversarial` field.
pub fn write_jsonl(
    dataset: &Dataset,
    schema: &DatasetSchema,
    adversarial: Option<&[bool]>,
    path: &Path,
) -> Result<(), TextError> {
    let io_err = |source| TextError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for (i, example) in dataset.examples.iter().enumerate() {
        let mut record = serde_json::Map::new();
        record.insert(
            schema.text_field.clone(),
            detokenize(&example.text_a).into(),
        );
        if let (Some(field), Some(b)) = (&schema.text_b_field, &example.text_b) {
            record.insert(field.clone(), detokenize(b).into());
        }
        record.insert(
            schema.label_field.clone(),
            example.gold_label.clone().into(),
        );
        if let Some(flags) = adversarial {
            record.insert(
                "adversarial".into(),
                flags.get(i).copied().unwrap_or(false).into(),
            );
        }
        serde_json::to_writer(&mut out, &record).map_err(|e| io_err(std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Picks the longer text of a pair (ties go to `text_a`) and freezes every
/// position whose lowercased surface also occurs in the other text.
pub fn select_attack_target(
    example: &LabeledExample,
) -> Result<(Side, BTreeSet<usize>), TextError> {
    let b = example.text_b.as_ref().ok_or(TextError::NotAPair)?;
    let (side, target, other) = if b.len() > example.text_a.len() {
        (Side::B, b, &example.text_a)
    } else {
        (Side::A, &example.text_a, b)
    };
    let other_surfaces: HashSet<String> = other
        .tokens()
        .iter()
        .map(|t| t.surface().to_lowercase())
        .collect();
    let frozen = target
        .tokens()
        .iter()
        .enumerate()
        .filter(|(_, t)| other_surfaces.contains(&t.surface().to_lowercase()))
        .map(|(i, _)| i)
        .collect();
    Ok((side, frozen))
}

pub const DEFAULT_EVAL_SIZE: usize = 1000;
pub const DEFAULT_MAX_LEN: usize = 100;

/// Drops examples whose attacked text is longer than `max_len`, then samples
/// `min(n, remaining)` of the rest without replacement. Dataset order is kept.
pub fn sample_eval_subset(dataset: &Dataset, n: usize, max_len: usize, seed: u64) -> Dataset {
    let eligible: Vec<&LabeledExample> = dataset
        .examples
        .iter()
        .filter(|e| e.attacked_len() <= max_len)
        .collect();
    let take = n.min(eligible.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, eligible.len(), take).into_vec();
    picked.sort_unstable();
    dataset.with_examples(picked.into_iter().map(|i| eligible[i].clone()).collect())
}
