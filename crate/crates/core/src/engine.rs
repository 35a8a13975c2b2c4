//! Greedy attack loop: build at most one scored action per position, then
//! apply actions in score order until the victim's prediction flips or the
//! step budget runs out.
//!
//! Scores are computed once against the original text and never refreshed.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{ActionKind, ModelError, ModelStack, PosTag};
use crate::perturb::{
    self, action_from_prob, build_candidate_set, select_fill, Action, CandidateParams,
    PerturbError, VictimView, ABLATION_SAMPLE_SIZE, DEFAULT_MLM_THRESHOLD, DEFAULT_SIM_THRESHOLD,
    DEFAULT_WINDOW,
};
use crate::text::{select_attack_target, Dataset, LabeledExample, Side, TextError, TokenizedText};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("trace {path}:{line}: {message}")]
    Trace {
        path: String,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// `k`: minimum MLM probability of a fill (exclusive).
    pub mlm_threshold: f64,
    /// `l`: minimum local similarity of a perturbed text (exclusive).
    pub sim_threshold: f64,
    /// `T`; `None` means 10% of the target length, rounded up.
    pub max_steps: Option<usize>,
    pub window: usize,
    pub enabled_actions: BTreeSet<ActionKind>,
    pub disable_sim_filter: bool,
    pub disable_mlm_filter: bool,
    pub mlm_sample_size: usize,
    /// Merge only bigrams tagged as noun phrases.
    pub np_gate: bool,
    pub attack_punct: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mlm_threshold: DEFAULT_MLM_THRESHOLD,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            max_steps: None,
            window: DEFAULT_WINDOW,
            enabled_actions: ActionKind::ALL.into(),
            disable_sim_filter: false,
            disable_mlm_filter: false,
            mlm_sample_size: ABLATION_SAMPLE_SIZE,
            np_gate: true,
            attack_punct: true,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn only(kind: ActionKind) -> Self {
        Self {
            enabled_actions: [kind].into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        let mut problems = Vec::new();
        if !(0.0..=1.0).contains(&self.mlm_threshold) {
            problems.push(format!(
                "mlm_threshold {} outside [0, 1]",
                self.mlm_threshold
            ));
        }
        if !(0.0..=1.0).contains(&self.sim_threshold) {
            problems.push(format!(
                "sim_threshold {} outside [0, 1]",
                self.sim_threshold
            ));
        }
        if self.max_steps == Some(0) {
            problems.push("max_steps must be at least 1".into());
        }
        if self.window == 0 {
            problems.push("window must be at least 1".into());
        }
        if self.enabled_actions.is_empty() {
            problems.push("enabled_actions is empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(AttackError::Config(problems.join("; ")))
        }
    }

    /// Step budget for a target of `n` tokens.
    pub fn step_limit(&self, n: usize) -> usize {
        self.max_steps.unwrap_or_else(|| n.div_ceil(10)).max(1)
    }

    fn candidate_params(&self, seed: u64) -> CandidateParams {
        CandidateParams {
            mlm_threshold: self.mlm_threshold,
            sim_threshold: self.sim_threshold,
            window: self.window,
            disable_sim_filter: self.disable_sim_filter,
            disable_mlm_filter: self.disable_mlm_filter,
            sample_size: self.mlm_sample_size,
            seed,
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn kind_rank(kind: ActionKind) -> u8 {
    match kind {
        ActionKind::Replace => 0,
        ActionKind::Insert => 1,
        ActionKind::Merge => 2,
    }
}

/// Pool order: higher score, then replace > insert > merge, then lower position.
pub fn action_order(a: &Action, b: &Action) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| kind_rank(a.kind).cmp(&kind_rank(b.kind)))
        .then_with(|| a.position.cmp(&b.position))
}

/// True iff `(tags[i], tags[i+1])` is a noun-phrase pattern; always true when
/// the gate is disabled.
pub fn np_gate(tags: &[PosTag], i: usize, enabled: bool) -> bool {
    !enabled || perturb::is_noun_phrase(tags, i)
}

/// Best action per attackable position, in position order.
pub fn build_action_pool(
    x: &TokenizedText,
    victim: &VictimView<'_>,
    models: &ModelStack,
    config: &AttackConfig,
) -> Result<Vec<Action>, AttackError> {
    let merge_on = config.enabled_actions.contains(&ActionKind::Merge);
    let tags = if merge_on && config.np_gate {
        Some(models.tagger.tag(x)?)
    } else {
        None
    };
    let attackable =
        |i: usize| !x.is_frozen(i) && (config.attack_punct || !x.tokens()[i].is_punct());
    let positions: Vec<usize> = (0..x.len()).filter(|&i| attackable(i)).collect();

    let per_position = positions
        .par_iter()
        .map(|&i| -> Result<Option<Action>, AttackError> {
            let mut best: Option<Action> = None;
            for &kind in &config.enabled_actions {
                if kind == ActionKind::Merge && !(i + 1 < x.len() && attackable(i + 1)) {
                    continue;
                }
                let ctx = match perturb::mask(x, kind, i, tags.as_deref()) {
                    Ok(ctx) => ctx,
                    Err(
                        PerturbError::OutOfRange { .. }
                        | PerturbError::Frozen(_)
                        | PerturbError::NotNounPhrase(_),
                    ) => continue,
                    Err(e) => return Err(e.into()),
                };
                let salt = (i as u64) << 2 | kind_rank(kind) as u64;
                let params = config.candidate_params(mix_seed(config.seed, salt));
                let z = build_candidate_set(
                    &ctx,
                    x,
                    models.mlm.as_ref(),
                    models.similarity.as_ref(),
                    &params,
                )?;
                let Some((fill, gold_prob)) = select_fill(&z, x, victim)? else {
                    continue;
                };
                let action = action_from_prob(x, kind, i, &fill.token, gold_prob);
                // enabled_actions iterates replace, insert, merge; ties keep the earlier kind
                if best.as_ref().is_none_or(|b| action.score > b.score) {
                    best = Some(action);
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(per_position.into_iter().flatten().collect())
}

/// A pool entry: the action plus where its anchor currently sits.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub action: Action,
    pub live: usize,
}

/// Shifts the live positions of `pool` after an action of `kind` ran at live
/// position `p`. Merges drop entries anchored on the consumed second token.
pub fn reindex(pool: &mut Vec<PoolEntry>, kind: ActionKind, p: usize) {
    match kind {
        ActionKind::Replace => {}
        ActionKind::Insert => {
            for e in pool.iter_mut().filter(|e| e.live > p) {
                e.live += 1;
            }
        }
        ActionKind::Merge => {
            pool.retain(|e| e.live != p && e.live != p + 1);
            for e in pool.iter_mut().filter(|e| e.live > p + 1) {
                e.live -= 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedAction {
    pub kind: ActionKind,
    pub orig_pos: usize,
    pub live_pos: usize,
    pub fill: String,
    pub score: f64,
    /// Surfaces the edit removed from the text it was applied to.
    pub replaced: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub index: usize,
    pub gold_label: String,
    pub target: Side,
    pub success: bool,
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub original: TokenizedText,
    /// The untouched partner text of a pair example.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub other: Option<TokenizedText>,
    pub adversarial: TokenizedText,
    pub applied: Vec<AppliedAction>,
    pub steps: usize,
    pub initial_gold_prob: f64,
    pub final_gold_prob: f64,
    pub final_label: String,
}

impl AttackResult {
    /// Neither skipped nor errored.
    pub fn attempted(&self) -> bool {
        !self.skipped && self.error.is_none()
    }

    fn errored(index: usize, example: &LabeledExample, error: String) -> Self {
        Self {
            index,
            gold_label: example.gold_label.clone(),
            target: Side::A,
            success: false,
            skipped: false,
            error: Some(error),
            original: example.text_a.clone(),
            other: example.text_b.clone(),
            adversarial: example.text_a.clone(),
            applied: Vec::new(),
            steps: 0,
            initial_gold_prob: 0.0,
            final_gold_prob: 0.0,
            final_label: String::new(),
        }
    }
}

/// Picks the text to attack and freezes tokens shared with its partner.
fn prepare_target(
    example: &LabeledExample,
) -> Result<(Side, TokenizedText, Option<TokenizedText>), AttackError> {
    match &example.text_b {
        None => Ok((Side::A, example.text_a.clone(), None)),
        Some(b) => {
            let (side, shared) = select_attack_target(example)?;
            let (target, other) = match side {
                Side::A => (&example.text_a, b),
                Side::B => (b, &example.text_a),
            };
            let frozen = target.frozen().union(&shared).copied().collect();
            Ok((
                side,
                target.clone().with_frozen(frozen)?,
                Some(other.clone()),
            ))
        }
    }
}

pub fn attack(
    example: &LabeledExample,
    models: &ModelStack,
    config: &AttackConfig,
) -> Result<AttackResult, AttackError> {
    config.validate()?;
    let (side, x, other) = prepare_target(example)?;
    let victim = VictimView::new(
        models.victim.as_ref(),
        other.as_ref().map(|o| (o, side)),
        &example.gold_label,
    );
    let initial = victim.distribution(&x)?;
    let mut result = AttackResult {
        index: 0,
        gold_label: example.gold_label.clone(),
        target: side,
        success: false,
        skipped: false,
        error: None,
        original: x.clone(),
        other: other.clone(),
        adversarial: x.clone(),
        applied: Vec::new(),
        steps: 0,
        initial_gold_prob: initial.prob(&example.gold_label),
        final_gold_prob: initial.prob(&example.gold_label),
        final_label: initial.argmax().to_string(),
    };
    if initial.argmax() != example.gold_label {
        result.skipped = true;
        return Ok(result);
    }

    let pool = build_action_pool(&x, &victim, models, config)?;
    run_greedy(&mut result, pool, config.step_limit(x.len()), &victim)?;
    Ok(result)
}

/// Applies pool actions best-first until the prediction flips or `budget`
/// actions have run.
fn run_greedy(
    result: &mut AttackResult,
    mut pool: Vec<Action>,
    budget: usize,
    victim: &VictimView<'_>,
) -> Result<(), AttackError> {
    pool.sort_by(action_order);
    let mut remaining: Vec<PoolEntry> = pool
        .into_iter()
        .map(|action| PoolEntry {
            live: action.position,
            action,
        })
        .collect();
    // reversed so the best entry pops off the end
    remaining.reverse();
    let mut current = result.original.clone();
    while result.steps < budget {
        let Some(entry) = remaining.pop() else { break };
        let a = &entry.action;
        let removed = current.tokens()[entry.live..entry.live + a.kind.span()]
            .iter()
            .map(|t| t.surface().to_string())
            .collect();
        current = perturb::apply_edit(&current, a.kind, entry.live, &a.fill)?;
        reindex(&mut remaining, a.kind, entry.live);
        result.applied.push(AppliedAction {
            kind: a.kind,
            orig_pos: a.position,
            live_pos: entry.live,
            fill: a.fill.clone(),
            score: a.score,
            replaced: removed,
        });
        result.steps += 1;
        let dist = victim.distribution(&current)?;
        result.final_gold_prob = dist.prob(victim.gold());
        result.final_label = dist.argmax().to_string();
        if result.final_label != victim.gold() {
            result.success = true;
            break;
        }
    }
    result.adversarial = current;
    Ok(())
}

/// Attacks every example; per-example failures are recorded in the result.
/// Output order follows the dataset regardless of `workers`.
pub fn attack_dataset(
    dataset: &Dataset,
    models: &ModelStack,
    config: &AttackConfig,
    workers: usize,
) -> Result<Vec<AttackResult>, AttackError> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| AttackError::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        dataset
            .examples
            .par_iter()
            .enumerate()
            .map(|(i, example)| {
                let config = AttackConfig {
                    seed: mix_seed(config.seed, i as u64),
                    ..config.clone()
                };
                match attack(example, models, &config) {
                    Ok(mut r) => {
                        r.index = i;
                        r
                    }
                    Err(e) => {
                        log::warn!("example {i}: {e}");
                        AttackResult::errored(i, example, e.to_string())
                    }
                }
            })
            .collect()
    }))
}

pub fn write_trace(results: &[AttackResult], path: &Path) -> Result<(), AttackError> {
    let io = |e: std::io::Error| AttackError::Trace {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    };
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for r in results {
        serde_json::to_writer(&mut out, r).map_err(|e| io(std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_trace(path: &Path) -> Result<Vec<AttackResult>, AttackError> {
    let err = |line: usize, message: String| AttackError::Trace {
        path: path.display().to_string(),
        line,
        message,
    };
    let file = File::open(path).map_err(|e| err(0, e.to_string()))?;
    let mut results = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| err(i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        results.push(serde_json::from_str(&line).map_err(|e| err(i + 1, e.to_string()))?);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(kind: ActionKind, pos: usize) -> PoolEntry {
        PoolEntry {
            action: Action {
                kind,
                position: pos,
                fill: "z".into(),
                score: -0.5,
                resulting_gold_prob: 0.5,
                replaced: vec![],
            },
            live: pos,
        }
    }

    #[test]
    fn insert_shifts_later_positions() {
        let mut pool = vec![entry(ActionKind::Replace, 5), entry(ActionKind::Replace, 1)];
        reindex(&mut pool, ActionKind::Insert, 2);
        assert_eq!(pool[0].live, 6);
        assert_eq!(pool[1].live, 1);
    }

    #[test]
    fn merge_removes_covered_and_shifts() {
        let mut pool = vec![
            entry(ActionKind::Insert, 4),
            entry(ActionKind::Replace, 2),
            entry(ActionKind::Replace, 7),
        ];
        reindex(&mut pool, ActionKind::Merge, 3);
        let lives: Vec<usize> = pool.iter().map(|e| e.live).collect();
        assert_eq!(lives, [2, 6]);
    }

    #[test]
    fn replace_leaves_pool_alone() {
        let mut pool = vec![entry(ActionKind::Merge, 0), entry(ActionKind::Insert, 9)];
        let before = pool.clone();
        reindex(&mut pool, ActionKind::Replace, 4);
        assert_eq!(pool, before);
    }

    #[test]
    fn np_gate_table() {
        use PosTag::*;
        assert!(np_gate(&[Adj, Noun], 0, true));
        assert!(!np_gate(&[Verb, Adv], 0, true));
        assert!(np_gate(&[Verb, Adv], 0, false));
    }

    #[test]
    fn ordering_ties() {
        let mk = |kind, position, score| Action {
            kind,
            position,
            fill: "z".into(),
            score,
            resulting_gold_prob: -score,
            replaced: vec![],
        };
        let mut pool = [
            mk(ActionKind::Merge, 0, -0.4),
            mk(ActionKind::Insert, 3, -0.4),
            mk(ActionKind::Replace, 5, -0.4),
            mk(ActionKind::Replace, 2, -0.4),
            mk(ActionKind::Merge, 9, -0.1),
        ];
        pool.sort_by(action_order);
        let order: Vec<(ActionKind, usize)> = pool.iter().map(|a| (a.kind, a.position)).collect();
        assert_eq!(
            order,
            [
                (ActionKind::Merge, 9),
                (ActionKind::Replace, 2),
                (ActionKind::Replace, 5),
                (ActionKind::Insert, 3),
                (ActionKind::Merge, 0),
            ]
        );
    }

    #[test]
    fn config_validation() {
        assert!(AttackConfig::default().validate().is_ok());
        let bad = AttackConfig {
            mlm_threshold: 1.5,
            max_steps: Some(0),
            enabled_actions: BTreeSet::new(),
            ..AttackConfig::default()
        };
        let msg = bad.validate().unwrap_err().to_string();
        assert!(
            msg.contains("mlm_threshold")
                && msg.contains("max_steps")
                && msg.contains("enabled_actions")
        );
        assert_eq!(AttackConfig::default().step_limit(20), 2);
        assert_eq!(AttackConfig::default().step_limit(21), 3);
        assert_eq!(AttackConfig::default().step_limit(3), 1);
        assert_eq!(AttackConfig::default().step_limit(0), 1);
    }
}
