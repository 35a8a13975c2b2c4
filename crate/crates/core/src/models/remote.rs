//! JSON-over-HTTP client for externally hosted models.
//!
//! Every role is a POST to `<base_url>/<role>`:
//!
//! | role        | request                                   | response              |
//! |-------------|-------------------------------------------|-----------------------|
//! | mlm         | `{left, right, kind}`                     | `{probs: {tok: p}}`   |
//! | victim      | `{tokens, pair?}`                         | `{probs: {label: p}}` |
//! | similarity  | `{a, b, window?}`                         | `{score}`             |
//! | perplexity  | `{tokens}`                                | `{ppl}`               |
//! | grammar     | `{tokens}`                                | `{count}`             |
//! | pos         | `{tokens}`                                | `{tags}`              |
//!
//! Transport failures and 5xx responses are retried with exponential backoff.
//! Distributions that do not sum to one are renormalized with a warning.

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::{json, Map, Value};
use url::Url;

use super::{
    GrammarChecker, LabelDistribution, MaskedContext, MaskedLanguageModel, ModelError,
    PerplexityScorer, PosTag, PosTagger, SimilarityScorer, VictimClassifier, VocabDistribution,
    Window, NORMALIZATION_TOLERANCE,
};
use crate::text::TokenizedText;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Mlm,
    Victim,
    Similarity,
    Perplexity,
    Grammar,
    Pos,
}

impl Role {
    pub fn path(self) -> &'static str {
        match self {
            Role::Mlm => "mlm",
            Role::Victim => "victim",
            Role::Similarity => "similarity",
            Role::Perplexity => "perplexity",
            Role::Grammar => "grammar",
            Role::Pos => "pos",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.path())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelEndpoint {
    pub base_url: Url,
    pub timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubled after every failed attempt.
    pub backoff: Duration,
}

impl ModelEndpoint {
    pub fn new(base_url: Url) -> Self {
        Self {
            base_url,
            timeout: Duration::from_secs(30),
            retries: 2,
            backoff: Duration::from_millis(100),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }
}

/// A client for one endpoint; implements every model trait.
#[derive(Clone)]
pub struct RemoteClient {
    endpoint: ModelEndpoint,
    http: reqwest::blocking::Client,
    labels: Option<Arc<[String]>>,
}

impl fmt::Debug for RemoteClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RemoteClient")
            .field("endpoint", &self.endpoint)
            .finish_non_exhaustive()
    }
}

impl RemoteClient {
    pub fn new(endpoint: ModelEndpoint) -> Result<Self, ModelError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| ModelError::InvalidParameter(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            http,
            labels: None,
        })
    }

    /// Orders victim distributions by `labels` (used for argmax ties).
    pub fn with_labels(mut self, labels: Vec<String>) -> Self {
        self.labels = Some(labels.into());
        self
    }

    pub fn endpoint(&self) -> &ModelEndpoint {
        &self.endpoint
    }

    fn url(&self, role: Role) -> String {
        let base = self.endpoint.base_url.as_str().trim_end_matches('/');
        format!("{base}/{}", role.path())
    }

    fn call(&self, role: Role, body: &Value) -> Result<Value, ModelError> {
        let url = self.url(role);
        let attempts = self.endpoint.retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self
                    .endpoint
                    .backoff
                    .saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(delay);
            }
            let response = match self.http.post(&url).json(body).send() {
                Ok(r) => r,
                Err(e) => {
                    log::debug!("{url}: attempt {} failed: {e}", attempt + 1);
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status.is_server_error() {
                last_error = format!("HTTP {status}");
                continue;
            }
            let text = response.text().map_err(|e| ModelError::Transport {
                url: url.clone(),
                attempts: attempt + 1,
                message: e.to_string(),
            });
            let text = match text {
                Ok(t) => t,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            if !status.is_success() {
                return Err(ModelError::Transport {
                    url,
                    attempts: attempt + 1,
                    message: format!("HTTP {status}: {text}"),
                });
            }
            return serde_json::from_str(&text).map_err(|e| ModelError::MalformedResponse {
                url,
                field: "<body>".into(),
                message: e.to_string(),
            });
        }
        Err(ModelError::Transport {
            url,
            attempts,
            message: last_error,
        })
    }

    fn malformed(&self, role: Role, field: &str, message: impl Into<String>) -> ModelError {
        ModelError::MalformedResponse {
            url: self.url(role),
            field: field.into(),
            message: message.into(),
        }
    }

    fn field<'v>(&self, role: Role, value: &'v Value, name: &str) -> Result<&'v Value, ModelError> {
        value
            .get(name)
            .ok_or_else(|| self.malformed(role, name, "missing"))
    }

    /// Parses `{probs: {...}}`, renormalizing when the mass is off.
    fn probs(&self, role: Role, value: &Value) -> Result<Vec<(String, f64)>, ModelError> {
        let object: &Map<String, Value> = self
            .field(role, value, "probs")?
            .as_object()
            .ok_or_else(|| self.malformed(role, "probs", "not an object"))?;
        let mut entries = Vec::with_capacity(object.len());
        for (key, p) in object {
            let field = format!("probs.{key}");
            let p = p
                .as_f64()
                .ok_or_else(|| self.malformed(role, &field, "not a number"))?;
            if !p.is_finite() || p < 0.0 {
                return Err(self.malformed(role, &field, format!("invalid probability {p}")));
            }
            entries.push((key.clone(), p));
        }
        let total: f64 = entries.iter().map(|(_, p)| p).sum();
        if total <= 0.0 {
            return Err(self.malformed(role, "probs", "probabilities sum to zero"));
        }
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            log::warn!(
                "{}: probabilities sum to {total}; renormalizing",
                self.url(role)
            );
            entries.iter_mut().for_each(|(_, p)| *p /= total);
        }
        Ok(entries)
    }
}

fn tokens_json(text: &TokenizedText) -> Value {
    Value::from(text.surface_strings())
}

impl MaskedLanguageModel for RemoteClient {
    fn predict(&self, ctx: &MaskedContext) -> Result<VocabDistribution, ModelError> {
        let body = json!({"left": ctx.left, "right": ctx.right, "kind": ctx.kind.as_str()});
        let response = self.call(Role::Mlm, &body)?;
        let entries = self.probs(Role::Mlm, &response)?;
        VocabDistribution::new(
            entries
                .into_iter()
                .map(|(t, p)| (Arc::<str>::from(t), p))
                .collect(),
        )
    }
}

impl VictimClassifier for RemoteClient {
    fn predict(
        &self,
        text: &TokenizedText,
        paired: Option<&TokenizedText>,
    ) -> Result<LabelDistribution, ModelError> {
        let mut body = json!({"tokens": tokens_json(text)});
        if let Some(p) = paired {
            body["pair"] = tokens_json(p);
        }
        let response = self.call(Role::Victim, &body)?;
        let mut entries = self.probs(Role::Victim, &response)?;
        if let Some(labels) = &self.labels {
            if let Some((unknown, _)) = entries.iter().find(|(l, _)| !labels.contains(l)) {
                return Err(self.malformed(
                    Role::Victim,
                    &format!("probs.{unknown}"),
                    "label outside the configured label set",
                ));
            }
            entries = labels
                .iter()
                .map(|l| {
                    let p = entries
                        .iter()
                        .find(|(e, _)| e == l)
                        .map_or(0.0, |(_, p)| *p);
                    (l.clone(), p)
                })
                .collect();
        }
        LabelDistribution::new(entries)
    }
}

impl SimilarityScorer for RemoteClient {
    fn similarity(
        &self,
        a: &TokenizedText,
        b: &TokenizedText,
        window: Option<Window>,
    ) -> Result<f64, ModelError> {
        // The wire format carries only the window size, so crop locally.
        let (a, b) = match window {
            Some(w) => (
                TokenizedText::new(w.crop(a.tokens()).to_vec()),
                TokenizedText::new(w.crop(b.tokens()).to_vec()),
            ),
            None => (a.clone(), b.clone()),
        };
        let mut body = json!({"a": tokens_json(&a), "b": tokens_json(&b)});
        if let Some(w) = window {
            body["window"] = w.size.into();
        }
        let response = self.call(Role::Similarity, &body)?;
        let score = self
            .field(Role::Similarity, &response, "score")?
            .as_f64()
            .ok_or_else(|| self.malformed(Role::Similarity, "score", "not a number"))?;
        if !(-1.0..=1.0).contains(&score) {
            return Err(self.malformed(
                Role::Similarity,
                "score",
                format!("{score} outside [-1, 1]"),
            ));
        }
        Ok(score)
    }
}

impl PerplexityScorer for RemoteClient {
    fn perplexity(&self, text: &TokenizedText) -> Result<f64, ModelError> {
        if text.is_empty() {
            return Err(ModelError::EmptyText);
        }
        let response = self.call(Role::Perplexity, &json!({"tokens": tokens_json(text)}))?;
        let ppl = self
            .field(Role::Perplexity, &response, "ppl")?
            .as_f64()
            .ok_or_else(|| self.malformed(Role::Perplexity, "ppl", "not a number"))?;
        if !(ppl > 0.0 && ppl.is_finite()) {
            return Err(self.malformed(Role::Perplexity, "ppl", format!("{ppl} is not positive")));
        }
        Ok(ppl)
    }
}

impl GrammarChecker for RemoteClient {
    fn count_errors(&self, text: &TokenizedText) -> Result<usize, ModelError> {
        let response = self.call(Role::Grammar, &json!({"tokens": tokens_json(text)}))?;
        let count = self
            .field(Role::Grammar, &response, "count")?
            .as_u64()
            .ok_or_else(|| self.malformed(Role::Grammar, "count", "not a non-negative integer"))?;
        Ok(count as usize)
    }
}

impl PosTagger for RemoteClient {
    fn tag(&self, text: &TokenizedText) -> Result<Vec<PosTag>, ModelError> {
        let response = self.call(Role::Pos, &json!({"tokens": tokens_json(text)}))?;
        let tags = self
            .field(Role::Pos, &response, "tags")?
            .as_array()
            .ok_or_else(|| self.malformed(Role::Pos, "tags", "not an array"))?;
        if tags.len() != text.len() {
            return Err(self.malformed(
                Role::Pos,
                "tags",
                format!("{} tags for {} tokens", tags.len(), text.len()),
            ));
        }
        tags.iter()
            .enumerate()
            .map(|(i, t)| {
                t.as_str()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| self.malformed(Role::Pos, &format!("tags[{i}]"), "unknown tag"))
            })
            .collect()
    }
}
