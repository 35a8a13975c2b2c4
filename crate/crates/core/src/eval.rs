//! Attack metrics, threshold sweeps, POS breakdowns and adversarial training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{attack_dataset, AttackConfig, AttackError, AttackResult};
use crate::models::{
    train_reference_victim, ActionKind, ModelError, ModelStack, PosTag, PosTagger,
};
use crate::perturb::{apply_edit, PerturbError};
use crate::text::{
    write_jsonl, Dataset, DatasetSchema, LabeledExample, Side, TextError, TokenizedText,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("result {0} has an empty original text")]
    EmptyOriginal(usize),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("sweep csv line {line}: {message}")]
    Csv { line: usize, message: String },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Text(#[from] TextError),
}

/// Modified-token count. A merge counts once when its fill keeps one of the
/// merged tokens and twice otherwise.
pub fn modification_count(result: &AttackResult) -> usize {
    result
        .applied
        .iter()
        .map(|a| match a.kind {
            ActionKind::Replace | ActionKind::Insert => 1,
            ActionKind::Merge if a.replaced.contains(&a.fill) => 1,
            ActionKind::Merge => 2,
        })
        .sum()
}

/// [`modification_count`] over the original length.
pub fn modification_rate(result: &AttackResult) -> Result<f64, EvalError> {
    if result.original.is_empty() {
        return Err(EvalError::EmptyOriginal(result.index));
    }
    Ok(modification_count(result) as f64 / result.original.len() as f64)
}

/// Attack metrics. Quality fields average over successful attacks only and
/// are `None` when there are none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub a_rate: Option<f64>,
    pub mod_rate: Option<f64>,
    pub ppl: Option<f64>,
    pub gerr: Option<f64>,
    pub sim: Option<f64>,
    pub n_total: usize,
    pub n_skipped: usize,
    pub n_success: usize,
    /// Examples whose attack failed with an error; excluded like skipped ones.
    pub n_errors: usize,
}

impl MetricsReport {
    /// Examples counted in the success-rate denominator.
    pub fn n_attacked(&self) -> usize {
        self.n_total - self.n_skipped - self.n_errors
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// The adversarial text with the untouched partner in its original slot.
fn adversarial_pair(r: &AttackResult) -> (TokenizedText, Option<TokenizedText>) {
    let adv = TokenizedText::new(r.adversarial.tokens().to_vec());
    match (&r.other, r.target) {
        (None, _) => (adv, None),
        (Some(o), Side::A) => (adv, Some(o.clone())),
        (Some(o), Side::B) => (o.clone(), Some(adv)),
    }
}

pub fn aggregate(
    results: &[AttackResult],
    models: &ModelStack,
) -> Result<MetricsReport, EvalError> {
    let n_skipped = results.iter().filter(|r| r.skipped).count();
    let n_errors = results.iter().filter(|r| r.error.is_some()).count();
    let successes: Vec<&AttackResult> = results.iter().filter(|r| r.success).collect();
    let attacked = results.len() - n_skipped - n_errors;

    let mut mods = Vec::new();
    let mut ppls = Vec::new();
    let mut gerrs = Vec::new();
    let mut sims = Vec::new();
    for r in &successes {
        mods.push(modification_rate(r)?);
        ppls.push(models.perplexity.perplexity(&r.adversarial)?);
        let before = models.grammar.count_errors(&r.original)? as f64;
        let after = models.grammar.count_errors(&r.adversarial)? as f64;
        gerrs.push(after - before);
        sims.push(
            models
                .similarity
                .similarity(&r.original, &r.adversarial, None)?,
        );
    }
    Ok(MetricsReport {
        a_rate: (attacked > 0).then(|| successes.len() as f64 / attacked as f64),
        mod_rate: mean(&mods),
        ppl: mean(&ppls),
        gerr: mean(&gerrs),
        sim: mean(&sims),
        n_total: results.len(),
        n_skipped,
        n_success: successes.len(),
        n_errors,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

/// One-row table in the order A-rate, Mod, PPL, GErr, Sim. Rates are shown
/// as percentages.
pub fn summary_table(report: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>10} {:>8} {:>8}",
        "A-rate", "Mod", "PPL", "GErr", "Sim"
    );
    let _ = writeln!(
        out,
        "{:>8} {:>8} {:>10} {:>8} {:>8}",
        fmt_opt(report.a_rate),
        fmt_opt(report.mod_rate),
        report.ppl.map_or_else(|| "-".into(), |v| format!("{v:.2}")),
        report
            .gerr
            .map_or_else(|| "-".into(), |v| format!("{v:.2}")),
        report.sim.map_or_else(|| "-".into(), |v| format!("{v:.3}")),
    );
    let _ = write!(
        out,
        "n_total={} n_skipped={} n_success={} n_errors={}",
        report.n_total, report.n_skipped, report.n_success, report.n_errors
    );
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: f64,
    pub l: f64,
    pub a_rate: Option<f64>,
    pub sim: Option<f64>,
    pub ppl: Option<f64>,
}

pub const SWEEP_HEADER: &str = "k,l,a_rate,sim,ppl";

/// Runs one attack per `(k, l)` cell, in grid order.
pub fn sweep(
    dataset: &Dataset,
    models: &ModelStack,
    base: &AttackConfig,
    grid: &[(f64, f64)],
    workers: usize,
) -> Result<Vec<SweepPoint>, EvalError> {
    if grid.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    grid.iter()
        .map(|&(k, l)| {
            let config = AttackConfig {
                mlm_threshold: k,
                sim_threshold: l,
                ..base.clone()
            };
            let results = attack_dataset(dataset, models, &config, workers)?;
            let report = aggregate(&results, models)?;
            log::info!("sweep k={k} l={l}: a_rate={:?}", report.a_rate);
            Ok(SweepPoint {
                k,
                l,
                a_rate: report.a_rate,
                sim: report.sim,
                ppl: report.ppl,
            })
        })
        .collect()
}

/// Cartesian product of the two threshold lists, `k` outermost.
pub fn grid(ks: &[f64], ls: &[f64]) -> Vec<(f64, f64)> {
    ks.iter()
        .flat_map(|&k| ls.iter().map(move |&l| (k, l)))
        .collect()
}

/// CSV with shortest round-trip float formatting; absent values are empty.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.k,
            p.l,
            cell(p.a_rate),
            cell(p.sim),
            cell(p.ppl)
        );
    }
    out
}

pub fn parse_sweep_csv(csv: &str) -> Result<Vec<SweepPoint>, EvalError> {
    let mut lines = csv.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == SWEEP_HEADER => {}
        other => {
            return Err(EvalError::Csv {
                line: 1,
                message: format!(
                    "expected header {SWEEP_HEADER:?}, got {:?}",
                    other.map(|(_, h)| h)
                ),
            })
        }
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Csv {
            line: i + 1,
            message,
        };
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", cells.len())));
        }
        let num = |j: usize| -> Result<f64, EvalError> {
            cells[j]
                .parse()
                .map_err(|e| err(format!("field {j} {:?}: {e}", cells[j])))
        };
        let opt = |j: usize| -> Result<Option<f64>, EvalError> {
            if cells[j].is_empty() {
                Ok(None)
            } else {
                num(j).map(Some)
            }
        };
        points.push(SweepPoint {
            k: num(0)?,
            l: num(1)?,
            a_rate: opt(2)?,
            sim: opt(3)?,
            ppl: opt(4)?,
        });
    }
    Ok(points)
}

/// Marker used when an insertion lands at the end of the text.
pub const END_TAG: &str = "END";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagShare {
    pub key: String,
    pub count: usize,
    pub percent: f64,
}

/// Tag tallies over the actions applied in successful attacks. Replace is
/// keyed by the replaced tag, insert by the tags around the gap, merge by the
/// merged bigram. Each table is sorted by count, then key.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PosBreakdown {
    pub replace: Vec<TagShare>,
    pub insert: Vec<TagShare>,
    pub merge: Vec<TagShare>,
}

fn shares(counts: BTreeMap<String, usize>) -> Vec<TagShare> {
    let total: usize = counts.values().sum();
    let mut out: Vec<TagShare> = counts
        .into_iter()
        .map(|(key, count)| TagShare {
            key,
            count,
            percent: 100.0 * count as f64 / total as f64,
        })
        .collect();
    out.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.key.cmp(&b.key)));
    out
}

/// Tags are taken on the text each action was applied to.
pub fn pos_breakdown(
    results: &[AttackResult],
    tagger: &dyn PosTagger,
) -> Result<PosBreakdown, EvalError> {
    let mut tables: [BTreeMap<String, usize>; 3] = Default::default();
    for r in results.iter().filter(|r| r.success) {
        let mut text = TokenizedText::new(r.original.tokens().to_vec());
        for a in &r.applied {
            let tags = tagger.tag(&text)?;
            let tag = |i: usize| tags.get(i).map_or(END_TAG, |t: &PosTag| t.as_str());
            let (table, key) = match a.kind {
                ActionKind::Replace => (0, tag(a.live_pos).to_string()),
                ActionKind::Insert => (1, format!("{} {}", tag(a.live_pos), tag(a.live_pos + 1))),
                ActionKind::Merge => (2, format!("{} {}", tag(a.live_pos), tag(a.live_pos + 1))),
            };
            *tables[table].entry(key).or_default() += 1;
            text = apply_edit(&text, a.kind, a.live_pos, &a.fill)?;
        }
    }
    let [replace, insert, merge] = tables;
    Ok(PosBreakdown {
        replace: shares(replace),
        insert: shares(insert),
        merge: shares(merge),
    })
}

/// The training set followed by one record per successful attack, labeled
/// with the original gold label. The flags mark the appended records.
pub fn export_augmented(train: &Dataset, results: &[AttackResult]) -> (Dataset, Vec<bool>) {
    let mut examples = train.examples.clone();
    let mut flags = vec![false; examples.len()];
    for r in results.iter().filter(|r| r.success) {
        let (a, b) = adversarial_pair(r);
        examples.push(LabeledExample {
            text_a: a,
            text_b: b,
            gold_label: r.gold_label.clone(),
        });
        flags.push(true);
    }
    (train.with_examples(examples), flags)
}

pub fn write_augmented(
    dataset: &Dataset,
    flags: &[bool],
    schema: &DatasetSchema,
    path: &Path,
) -> Result<(), EvalError> {
    Ok(write_jsonl(dataset, schema, Some(flags), path)?)
}

/// Fraction of examples whose victim argmax equals the gold label.
pub fn accuracy(dataset: &Dataset, models: &ModelStack) -> Result<f64, EvalError> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for e in &dataset.examples {
        let dist = models.victim.predict(&e.text_a, e.text_b.as_ref())?;
        if dist.argmax() == e.gold_label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub accuracy: f64,
    pub a_rate: Option<f64>,
    pub mod_rate: Option<f64>,
    /// Mean [`modification_count`] over successful attacks.
    pub mod_count: Option<f64>,
}

impl RobustnessRow {
    fn measure(
        test: &Dataset,
        models: &ModelStack,
        config: &AttackConfig,
        workers: usize,
    ) -> Result<Self, EvalError> {
        let results = attack_dataset(test, models, config, workers)?;
        let report = aggregate(&results, models)?;
        let counts: Vec<f64> = results
            .iter()
            .filter(|r| r.success)
            .map(|r| modification_count(r) as f64)
            .collect();
        Ok(Self {
            accuracy: accuracy(test, models)?,
            a_rate: report.a_rate,
            mod_rate: report.mod_rate,
            mod_count: mean(&counts),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainingParams {
    /// Naive Bayes smoothing for both the clean and the retrained victim.
    pub alpha: f64,
    /// Training examples attacked to harvest adversarial data; all when `None`.
    pub augment_size: Option<usize>,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainingReport {
    pub before: RobustnessRow,
    pub after: RobustnessRow,
    pub n_augmented: usize,
}

fn diff(after: Option<f64>, before: Option<f64>) -> Option<f64> {
    Some(after? - before?)
}

impl AdvTrainingReport {
    /// `after - before` for every column.
    pub fn delta(&self) -> RobustnessRow {
        RobustnessRow {
            accuracy: self.after.accuracy - self.before.accuracy,
            a_rate: diff(self.after.a_rate, self.before.a_rate),
            mod_rate: diff(self.after.mod_rate, self.before.mod_rate),
            mod_count: diff(self.after.mod_count, self.before.mod_count),
        }
    }
}

/// Trains the reference victim on `train`, attacks `test`, attacks (a sample
/// of) `train` to collect adversarial examples, retrains on the augmented
/// set and attacks `test` again. The victim in `models` is replaced.
pub fn adversarial_training_experiment(
    train: &Dataset,
    test: &Dataset,
    models: &ModelStack,
    config: &AttackConfig,
    params: &AdvTrainingParams,
) -> Result<AdvTrainingReport, EvalError> {
    let clean = models.with_victim(Arc::new(train_reference_victim(train, params.alpha)?));
    let before = RobustnessRow::measure(test, &clean, config, params.workers)?;

    let source = match params.augment_size {
        Some(n) if n < train.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let mut picked = index::sample(&mut rng, train.len(), n).into_vec();
            picked.sort_unstable();
            train.with_examples(
                picked
                    .into_iter()
                    .map(|i| train.examples[i].clone())
                    .collect(),
            )
        }
        _ => train.clone(),
    };
    let harvest = attack_dataset(&source, &clean, config, params.workers)?;
    let (augmented, flags) = export_augmented(train, &harvest);
    let n_augmented = flags.iter().filter(|&&f| f).count();

    let hardened = models.with_victim(Arc::new(train_reference_victim(&augmented, params.alpha)?));
    let after = RobustnessRow::measure(test, &hardened, config, params.workers)?;
    Ok(AdvTrainingReport {
        before,
        after,
        n_augmented,
    })
}
