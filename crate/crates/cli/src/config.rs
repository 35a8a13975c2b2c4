//! Flat TOML run configuration.
//!
//! Every command reads the same file. Relative paths resolve against the
//! directory holding the config. Command-line flags override file values.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use maskfill::engine::AttackConfig;
use maskfill::models::{ActionKind, DEFAULT_ALPHA, DEFAULT_DELTA};
use maskfill::text::{DatasetSchema, DEFAULT_EVAL_SIZE, DEFAULT_MAX_LEN};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Training split (train-victim, train-mlm, augment).
    pub train: Option<PathBuf>,
    /// Split to attack (attack, sweep) or to report accuracy on.
    pub data: Option<PathBuf>,
    pub text_field: String,
    pub text_b_field: Option<String>,
    pub label_field: String,
    pub labels: Option<Vec<String>>,

    pub victim: Option<PathBuf>,
    pub mlm: Option<PathBuf>,
    pub vectors: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub victim_url: Option<String>,
    pub mlm_url: Option<String>,
    pub similarity_url: Option<String>,
    pub perplexity_url: Option<String>,
    pub grammar_url: Option<String>,
    pub pos_url: Option<String>,
    pub remote_timeout_ms: u64,
    pub remote_retries: u32,
    pub remote_backoff_ms: u64,

    pub alpha: f64,
    pub delta: f64,

    pub mlm_threshold: f64,
    pub sim_threshold: f64,
    pub max_steps: Option<usize>,
    pub window: usize,
    pub enabled_actions: Vec<String>,
    pub disable_sim_filter: bool,
    pub disable_mlm_filter: bool,
    pub mlm_sample_size: usize,
    pub np_gate: bool,
    pub attack_punct: bool,

    /// Evaluation subset: at most `eval_size` examples no longer than `max_len`.
    pub eval_size: usize,
    pub max_len: usize,
    pub grid_k: Vec<f64>,
    pub grid_l: Vec<f64>,

    pub seed: u64,
    pub workers: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let attack = AttackConfig::default();
        Self {
            train: None,
            data: None,
            text_field: "text".into(),
            text_b_field: None,
            label_field: "label".into(),
            labels: None,
            victim: None,
            mlm: None,
            vectors: None,
            lexicon: None,
            victim_url: None,
            mlm_url: None,
            similarity_url: None,
            perplexity_url: None,
            grammar_url: None,
            pos_url: None,
            remote_timeout_ms: 30_000,
            remote_retries: 2,
            remote_backoff_ms: 100,
            alpha: DEFAULT_ALPHA,
            delta: DEFAULT_DELTA,
            mlm_threshold: attack.mlm_threshold,
            sim_threshold: attack.sim_threshold,
            max_steps: attack.max_steps,
            window: attack.window,
            enabled_actions: ActionKind::ALL
                .iter()
                .map(|k| k.as_str().to_string())
                .collect(),
            disable_sim_filter: attack.disable_sim_filter,
            disable_mlm_filter: attack.disable_mlm_filter,
            mlm_sample_size: attack.mlm_sample_size,
            np_gate: attack.np_gate,
            attack_punct: attack.attack_punct,
            eval_size: DEFAULT_EVAL_SIZE,
            max_len: DEFAULT_MAX_LEN,
            grid_k: Vec::new(),
            grid_l: Vec::new(),
            seed: 0,
            workers: 1,
            out: None,
        }
    }
}

/// Every key the file may contain.
const KNOWN_KEYS: &[&str] = &[
    "train",
    "data",
    "text_field",
    "text_b_field",
    "label_field",
    "labels",
    "victim",
    "mlm",
    "vectors",
    "lexicon",
    "victim_url",
    "mlm_url",
    "similarity_url",
    "perplexity_url",
    "grammar_url",
    "pos_url",
    "remote_timeout_ms",
    "remote_retries",
    "remote_backoff_ms",
    "alpha",
    "delta",
    "mlm_threshold",
    "sim_threshold",
    "max_steps",
    "window",
    "enabled_actions",
    "disable_sim_filter",
    "disable_mlm_filter",
    "mlm_sample_size",
    "np_gate",
    "attack_punct",
    "eval_size",
    "max_len",
    "grid_k",
    "grid_l",
    "seed",
    "workers",
    "out",
];

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)
            .map_err(|e| CliError::input(format!("config {}: {}", path.display(), e.message)))?;
        config.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table =
            toml::from_str(text).map_err(|e| CliError::input(e.to_string()))?;
        let unknown: Vec<&str> = table
            .keys()
            .map(String::as_str)
            .filter(|k| !KNOWN_KEYS.contains(k))
            .collect();
        if !unknown.is_empty() {
            return Err(CliError::input(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let config: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::input(e.to_string()))?;
        config.attack_config()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for path in [
            &mut self.train,
            &mut self.data,
            &mut self.victim,
            &mut self.mlm,
            &mut self.vectors,
            &mut self.lexicon,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn schema(&self) -> DatasetSchema {
        DatasetSchema {
            text_field: self.text_field.clone(),
            text_b_field: self.text_b_field.clone(),
            label_field: self.label_field.clone(),
            labels: self.labels.clone(),
        }
    }

    /// The attack settings, validated; every problem is reported at once.
    pub fn attack_config(&self) -> Result<AttackConfig, CliError> {
        let mut problems = Vec::new();
        let mut enabled = BTreeSet::new();
        for name in &self.enabled_actions {
            match name.parse::<ActionKind>() {
                Ok(kind) => {
                    enabled.insert(kind);
                }
                Err(_) => problems.push(format!("enabled_actions: unknown action {name:?}")),
            }
        }
        let config = AttackConfig {
            mlm_threshold: self.mlm_threshold,
            sim_threshold: self.sim_threshold,
            max_steps: self.max_steps,
            window: self.window,
            enabled_actions: enabled,
            disable_sim_filter: self.disable_sim_filter,
            disable_mlm_filter: self.disable_mlm_filter,
            mlm_sample_size: self.mlm_sample_size,
            np_gate: self.np_gate,
            attack_punct: self.attack_punct,
            seed: self.seed,
        };
        if let Err(e) = config.validate() {
            problems.push(e.to_string());
        }
        if self.workers == 0 {
            problems.push("workers must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(CliError::input(problems.join("; ")))
        }
    }
}
