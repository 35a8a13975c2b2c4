use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use maskfill::engine::{attack_dataset, read_trace, write_trace, AttackResult};
use maskfill::eval::{
    aggregate, export_augmented, grid, parse_sweep_csv, pos_breakdown, summary_table, sweep_csv,
    write_augmented, MetricsReport, PosBreakdown, TagShare,
};
use maskfill::models::{
    load_lexicon, load_word_vectors, write_lexicon, write_word_vectors, EmbeddingSimilarity,
    GrammarChecker, JaccardSimilarity, LexiconTagger, MaskedLanguageModel, ModelEndpoint,
    ModelError, ModelStack, NaiveBayes, NgramInfiller, PerplexityScorer, PosTagger, RemoteClient,
    RuleGrammarChecker, SimilarityScorer, VictimClassifier,
};
use maskfill::synthetic::{self, SyntheticConfig};
use maskfill::text::{
    load_dataset, sample_eval_subset, tokenize, write_jsonl, Dataset, DatasetFormat, TextError,
    TokenizedText,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn text_error(e: TextError) -> CliError {
    match e {
        TextError::Io { .. } | TextError::Malformed { .. } => CliError::input(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}

fn model_error(e: ModelError) -> CliError {
    match e {
        ModelError::EmptyCorpus
        | ModelError::TooFewLabels(_)
        | ModelError::InvalidParameter(_)
        | ModelError::Io(_) => CliError::input(e.to_string()),
        other => CliError::runtime(other.to_string()),
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::runtime(e.to_string())
}

fn require<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    path.as_deref().ok_or_else(|| {
        CliError::input(format!(
            "missing `{key}`: set it in the config or pass --{key}"
        ))
    })
}

fn load(config: &RunConfig, path: &Path) -> Result<Dataset, CliError> {
    let format = DatasetFormat::from_path(path).ok_or_else(|| {
        CliError::input(format!(
            "{}: expected a .jsonl or .tsv dataset",
            path.display()
        ))
    })?;
    load_dataset(path, format, &config.schema()).map_err(text_error)
}

fn out_dir(config: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec(value).map_err(runtime)?;
    bytes.push(b'\n');
    fs::write(path, bytes)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn endpoint(config: &RunConfig, url: &str, labels: &[String]) -> Result<RemoteClient, CliError> {
    let base =
        url::Url::parse(url).map_err(|e| CliError::input(format!("bad url {url:?}: {e}")))?;
    let endpoint = ModelEndpoint::new(base)
        .with_timeout(Duration::from_millis(config.remote_timeout_ms))
        .with_retries(config.remote_retries)
        .with_backoff(Duration::from_millis(config.remote_backoff_ms));
    Ok(RemoteClient::new(endpoint)
        .map_err(model_error)?
        .with_labels(labels.to_vec()))
}

/// Assembles the models a command needs. Remote URLs take precedence over
/// local files for every role.
fn model_stack(config: &RunConfig, labels: &[String]) -> Result<ModelStack, CliError> {
    let remote = |url: &Option<String>| -> Result<Option<RemoteClient>, CliError> {
        url.as_deref()
            .map(|u| endpoint(config, u, labels))
            .transpose()
    };
    let ngram: Option<Arc<NgramInfiller>> = match &config.mlm {
        Some(path) => Some(Arc::new(read_json(path)?)),
        None => None,
    };
    let mlm: Arc<dyn MaskedLanguageModel> = match (remote(&config.mlm_url)?, &ngram) {
        (Some(r), _) => Arc::new(r),
        (None, Some(n)) => n.clone(),
        (None, None) => return Err(CliError::input("missing `mlm` or `mlm_url` in the config")),
    };
    let victim: Arc<dyn VictimClassifier> = match (remote(&config.victim_url)?, &config.victim) {
        (Some(r), _) => Arc::new(r),
        (None, Some(path)) => Arc::new(read_json::<NaiveBayes>(path)?),
        (None, None) => {
            return Err(CliError::input(
                "missing `victim` or `victim_url` in the config",
            ))
        }
    };
    let similarity: Arc<dyn SimilarityScorer> =
        match (remote(&config.similarity_url)?, &config.vectors) {
            (Some(r), _) => Arc::new(r),
            (None, Some(path)) => Arc::new(EmbeddingSimilarity::new(
                load_word_vectors(path).map_err(model_error)?,
            )),
            (None, None) => Arc::new(JaccardSimilarity),
        };
    let perplexity: Arc<dyn PerplexityScorer> = match (remote(&config.perplexity_url)?, &ngram) {
        (Some(r), _) => Arc::new(r),
        (None, Some(n)) => n.clone(),
        (None, None) => {
            return Err(CliError::input(
                "a remote `mlm_url` needs `perplexity_url` or a local `mlm` for perplexity",
            ))
        }
    };
    let grammar: Arc<dyn GrammarChecker> = match remote(&config.grammar_url)? {
        Some(r) => Arc::new(r),
        None => Arc::new(RuleGrammarChecker),
    };
    Ok(ModelStack {
        mlm,
        victim,
        similarity,
        perplexity,
        grammar,
        tagger: tagger(config)?,
    })
}

fn tagger(config: &RunConfig) -> Result<Arc<dyn PosTagger>, CliError> {
    if let Some(url) = &config.pos_url {
        return Ok(Arc::new(endpoint(config, url, &[])?));
    }
    let entries = match &config.lexicon {
        Some(path) => load_lexicon(path).map_err(model_error)?,
        None => Vec::new(),
    };
    Ok(Arc::new(LexiconTagger::with_entries(entries)))
}

pub fn train_victim(config: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let train = load(config, require(&config.train, "train")?)?;
    let mut model = NaiveBayes::new(config.alpha);
    model.train(&train).map_err(model_error)?;
    let out = out
        .or_else(|| config.victim.clone())
        .unwrap_or_else(|| PathBuf::from("victim.json"));
    write_json(&model, &out)?;
    let reloaded: NaiveBayes = read_json(&out)?;
    if reloaded != model {
        return Err(CliError::runtime(format!(
            "{} did not read back identically",
            out.display()
        )));
    }
    println!(
        "trained on {} examples: {} labels, {} features -> {}",
        train.len(),
        model.labels().len(),
        model.vocab_size(),
        out.display()
    );
    if let Some(eval) = &config.data {
        let eval = load(config, eval)?;
        let acc = accuracy_of(&model, &eval)?;
        println!("accuracy: {acc}");
    }
    Ok(())
}

fn accuracy_of(model: &NaiveBayes, data: &Dataset) -> Result<f64, CliError> {
    let mut correct = 0usize;
    for e in &data.examples {
        let dist = model
            .predict(&e.text_a, e.text_b.as_ref())
            .map_err(model_error)?;
        correct += usize::from(dist.argmax() == e.gold_label);
    }
    Ok(if data.is_empty() {
        0.0
    } else {
        correct as f64 / data.len() as f64
    })
}

/// Dataset texts, or one sentence per line for any other file.
fn corpus(config: &RunConfig, path: &Path) -> Result<Vec<TokenizedText>, CliError> {
    if DatasetFormat::from_path(path).is_some() {
        let data = load(config, path)?;
        return Ok(data
            .examples
            .into_iter()
            .flat_map(|e| std::iter::once(e.text_a).chain(e.text_b))
            .collect());
    }
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", path.display())))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(tokenize)
        .collect())
}

pub fn train_mlm(config: &RunConfig, out: Option<PathBuf>) -> Result<(), CliError> {
    let path = require(&config.train, "corpus")?;
    let texts = corpus(config, path)?;
    let mut model = NgramInfiller::new(config.delta);
    model.train(&texts).map_err(|e| match e {
        ModelError::EmptyCorpus => CliError::input(format!("{}: corpus is empty", path.display())),
        other => model_error(other),
    })?;
    let out = out
        .or_else(|| config.mlm.clone())
        .unwrap_or_else(|| PathBuf::from("mlm.json"));
    write_json(&model, &out)?;
    let reloaded: NgramInfiller = read_json(&out)?;
    if reloaded.vocab_size() != model.vocab_size() {
        return Err(CliError::runtime(format!(
            "{} did not read back identically",
            out.display()
        )));
    }
    println!(
        "vocabulary size: {} -> {}",
        model.vocab_size(),
        out.display()
    );
    Ok(())
}

fn attack_split(config: &RunConfig, path: &Path) -> Result<Dataset, CliError> {
    let data = load(config, path)?;
    Ok(sample_eval_subset(
        &data,
        config.eval_size,
        config.max_len,
        config.seed,
    ))
}

pub fn attack(config: &RunConfig) -> Result<(), CliError> {
    let attack_config = config.attack_config()?;
    let data = attack_split(config, require(&config.data, "data")?)?;
    let models = model_stack(config, &data.label_set)?;
    let results =
        attack_dataset(&data, &models, &attack_config, config.workers).map_err(runtime)?;
    let report = aggregate(&results, &models).map_err(runtime)?;

    let dir = out_dir(config)?;
    let trace_path = dir.join("trace.jsonl");
    let metrics_path = dir.join("metrics.json");
    write_trace(&results, &trace_path).map_err(runtime)?;
    write_json(&report, &metrics_path)?;
    let reread = read_trace(&trace_path).map_err(runtime)?;
    if reread.len() != results.len() {
        return Err(CliError::runtime(format!(
            "{} did not read back",
            trace_path.display()
        )));
    }
    let _: MetricsReport = read_json(&metrics_path)?;
    println!("{}", summary_table(&report));
    println!(
        "trace: {}\nmetrics: {}",
        trace_path.display(),
        metrics_path.display()
    );
    Ok(())
}

/// Parses `k=0.001,0.005;l=0.5,0.7`.
pub fn parse_grid(grid: &str) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let (mut ks, mut ls) = (Vec::new(), Vec::new());
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| CliError::input(format!("grid part {part:?}: expected name=values")))?;
        let values = values
            .split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| CliError::input(format!("grid value {v:?}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match name.trim() {
            "k" => ks = values,
            "l" => ls = values,
            other => {
                return Err(CliError::input(format!(
                    "grid: unknown threshold {other:?}"
                )))
            }
        }
    }
    Ok((ks, ls))
}

pub fn sweep(config: &RunConfig) -> Result<(), CliError> {
    let cells = grid(&config.grid_k, &config.grid_l);
    if cells.is_empty() {
        return Err(CliError::input(
            "sweep grid is empty: give both k and l values",
        ));
    }
    let base = config.attack_config()?;
    let data = attack_split(config, require(&config.data, "data")?)?;
    let models = model_stack(config, &data.label_set)?;
    let points =
        maskfill::eval::sweep(&data, &models, &base, &cells, config.workers).map_err(runtime)?;
    let csv = sweep_csv(&points);
    let path = out_dir(config)?.join("sweep.csv");
    fs::write(&path, &csv)
        .map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
    let reread = fs::read_to_string(&path).map_err(runtime)?;
    if parse_sweep_csv(&reread).map_err(runtime)? != points {
        return Err(CliError::runtime(format!(
            "{} did not read back identically",
            path.display()
        )));
    }
    print!("{csv}");
    println!("sweep: {}", path.display());
    Ok(())
}

pub fn augment(config: &RunConfig) -> Result<(), CliError> {
    let attack_config = config.attack_config()?;
    let train = load(config, require(&config.train, "train")?)?;
    let models = model_stack(config, &train.label_set)?;
    let results =
        attack_dataset(&train, &models, &attack_config, config.workers).map_err(runtime)?;
    let (augmented, flags) = export_augmented(&train, &results);
    let path = out_dir(config)?.join("augmented.jsonl");
    write_augmented(&augmented, &flags, &config.schema(), &path).map_err(runtime)?;
    let reread = load(config, &path)?;
    if reread.len() != augmented.len() {
        return Err(CliError::runtime(format!(
            "{} did not read back",
            path.display()
        )));
    }
    println!(
        "{} original + {} adversarial records -> {}",
        train.len(),
        augmented.len() - train.len(),
        path.display()
    );
    Ok(())
}

fn print_table(title: &str, shares: &[TagShare]) {
    println!("{title}");
    if shares.is_empty() {
        println!("  (none)");
    }
    for s in shares.iter().take(3) {
        println!("  {:<12} {:>6.1}%  ({})", s.key, s.percent, s.count);
    }
}

pub fn analyze_pos(config: &RunConfig, trace: &Path) -> Result<(), CliError> {
    let results: Vec<AttackResult> =
        read_trace(trace).map_err(|e| CliError::input(e.to_string()))?;
    let tagger = tagger(config)?;
    let breakdown = pos_breakdown(&results, tagger.as_ref()).map_err(runtime)?;
    print_table("replace", &breakdown.replace);
    print_table("insert", &breakdown.insert);
    print_table("merge", &breakdown.merge);
    if config.out.is_some() {
        let path = out_dir(config)?.join("pos.json");
        write_json(&breakdown, &path)?;
        let _: PosBreakdown = read_json(&path)?;
        println!("pos: {}", path.display());
    }
    Ok(())
}

const SYNTH_CONFIG: &str = "\
train = \"train.jsonl\"
data = \"test.jsonl\"
vectors = \"vectors.txt\"
lexicon = \"lexicon.tsv\"
victim = \"victim.json\"
mlm = \"mlm.json\"
out = \"run\"
";

pub fn synth(
    config: &RunConfig,
    n_train: Option<usize>,
    n_test: Option<usize>,
) -> Result<(), CliError> {
    let defaults = SyntheticConfig::default();
    let corpus = synthetic::generate(&SyntheticConfig {
        n_train: n_train.unwrap_or(defaults.n_train),
        n_test: n_test.unwrap_or(defaults.n_test),
        seed: config.seed,
        ..defaults
    });
    let dir = out_dir(config)?;
    let schema = config.schema();
    write_jsonl(&corpus.train, &schema, None, &dir.join("train.jsonl")).map_err(text_error)?;
    write_jsonl(&corpus.test, &schema, None, &dir.join("test.jsonl")).map_err(text_error)?;
    write_word_vectors(&corpus.vectors, &dir.join("vectors.txt")).map_err(model_error)?;
    write_lexicon(&corpus.lexicon, &dir.join("lexicon.tsv")).map_err(model_error)?;
    fs::write(dir.join("config.toml"), SYNTH_CONFIG).map_err(runtime)?;
    for name in ["train.jsonl", "test.jsonl"] {
        load(config, &dir.join(name))?;
    }
    load_word_vectors(&dir.join("vectors.txt")).map_err(model_error)?;
    load_lexicon(&dir.join("lexicon.tsv")).map_err(model_error)?;
    RunConfig::load(&dir.join("config.toml"))?;
    println!(
        "wrote {} train / {} test examples, vectors, lexicon and config.toml to {}",
        corpus.train.len(),
        corpus.test.len(),
        dir.display()
    );
    Ok(())
}
