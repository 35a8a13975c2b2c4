//! Acceptance criteria. Prints one `[PASS]` or `[FAIL]` line per criterion
//! and exits nonzero if any fails.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use maskfill::engine::{attack, build_action_pool, AppliedAction};
use maskfill::eval::{
    adversarial_training_experiment, aggregate, grid, modification_count, modification_rate,
    parse_sweep_csv, sweep, sweep_csv, AdvTrainingParams, SWEEP_HEADER,
};
use maskfill::models::{
    reference_stack, train_reference_mlm, EmbeddingSimilarity, GrammarChecker, JaccardSimilarity,
    LexiconTagger, MaskedContext, MaskedLanguageModel, ModelEndpoint, ModelError, NaiveBayes,
    NgramInfiller, PerplexityScorer, PosTag, PosTagger, RemoteClient, RuleGrammarChecker,
    SimilarityScorer, VictimClassifier, Window, WordVectors, DEFAULT_ALPHA, DEFAULT_DELTA,
};
use maskfill::perturb::{self, build_candidate_set, is_fillable, CandidateParams, VictimView};
use maskfill::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use maskfill::text::{Side, TaskKind};
use maskfill::{
    attack_dataset, Action, ActionKind, AttackConfig, AttackResult, Dataset, LabeledExample,
    ModelStack, TokenizedText,
};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn text(words: &[String]) -> TokenizedText {
    TokenizedText::from_surfaces(words).expect("valid surfaces")
}

fn surfaces(x: &TokenizedText) -> Vec<String> {
    x.surface_strings()
}

// ---------------------------------------------------------------------------
// Fixtures

/// A Markov-ish corpus over `n_words` types with random word vectors.
struct RandomCorpus {
    sentences: Vec<Vec<String>>,
    successors: Vec<Vec<usize>>,
    words: Vec<String>,
    mlm: NgramInfiller,
    sim: EmbeddingSimilarity,
}

impl RandomCorpus {
    fn new(seed: u64, n_words: usize, n_sentences: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<String> = (0..n_words).map(|i| format!("w{i:03}")).collect();
        let successors: Vec<Vec<usize>> = (0..n_words)
            .map(|_| (0..3).map(|_| rng.gen_range(0..n_words)).collect())
            .collect();
        let mut corpus = Self {
            sentences: Vec::new(),
            successors,
            words,
            mlm: NgramInfiller::new(DEFAULT_DELTA),
            sim: EmbeddingSimilarity::new(WordVectors::new(8)),
        };
        corpus.sentences = (0..n_sentences)
            .map(|_| corpus.sentence(&mut rng, 3, 12))
            .collect();
        let texts: Vec<TokenizedText> = corpus.sentences.iter().map(|s| text(s)).collect();
        corpus.mlm = train_reference_mlm(texts.iter(), DEFAULT_DELTA).expect("train mlm");
        let mut vectors = WordVectors::new(8);
        for w in &corpus.words {
            // some words stay out of the embedding table
            if rng.gen_bool(0.9) {
                let v = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
                vectors.insert(w.clone(), v).expect("vector");
            }
        }
        corpus.sim = EmbeddingSimilarity::new(vectors);
        corpus
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
        let n = rng.gen_range(min..=max);
        let mut w = rng.gen_range(0..self.words.len());
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.words[w].clone());
            w = if rng.gen_bool(0.75) {
                *self.successors[w].choose(rng).unwrap()
            } else {
                rng.gen_range(0..self.words.len())
            };
        }
        out
    }
}

fn random_site(rng: &mut ChaCha8Rng, len: usize) -> (ActionKind, usize) {
    let mut kind = *ActionKind::ALL.choose(rng).unwrap();
    if kind == ActionKind::Merge && len < 2 {
        kind = ActionKind::Replace;
    }
    let limit = if kind == ActionKind::Merge {
        len - 1
    } else {
        len
    };
    (kind, rng.gen_range(0..limit))
}

fn synthetic_stack(seed: u64) -> Result<(SyntheticCorpus, ModelStack), String> {
    let corpus = generate(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    });
    let stack = reference_stack(
        &corpus.train,
        Some(corpus.vectors.clone()),
        LexiconTagger::with_entries(corpus.lexicon.clone()),
        DEFAULT_DELTA,
        DEFAULT_ALPHA,
    )
    .map_err(err)?;
    Ok((corpus, stack))
}

// ---------------------------------------------------------------------------
// Oracles

/// Mask context written out from the definition.
fn manual_context(x: &[String], kind: ActionKind, i: usize) -> MaskedContext {
    let (left, right, replaced) = match kind {
        ActionKind::Replace => (x[..i].to_vec(), x[i + 1..].to_vec(), vec![x[i].clone()]),
        ActionKind::Insert => (x[..=i].to_vec(), x[i + 1..].to_vec(), vec![]),
        ActionKind::Merge => (x[..i].to_vec(), x[i + 2..].to_vec(), x[i..i + 2].to_vec()),
    };
    MaskedContext::new(left, right, kind, i, replaced).expect("context")
}

fn manual_edit(x: &[String], kind: ActionKind, i: usize, fill: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(x.len() + 1);
    for (j, w) in x.iter().enumerate() {
        match kind {
            ActionKind::Replace if j == i => out.push(fill.to_string()),
            ActionKind::Insert if j == i => {
                out.push(w.clone());
                out.push(fill.to_string());
            }
            ActionKind::Merge if j == i => out.push(fill.to_string()),
            ActionKind::Merge if j == i + 1 => {}
            _ => out.push(w.clone()),
        }
    }
    out
}

/// Tokens whose index lies in `[center - before, center - before + size)`.
fn manual_crop(x: &[String], size: usize, center: usize) -> Vec<String> {
    let before = (size - 1) / 2;
    x.iter()
        .enumerate()
        .filter(|(j, _)| j + before >= center && *j + before < center + size)
        .map(|(_, w)| w.clone())
        .collect()
}

struct OracleMember {
    token: String,
    p: f64,
    sim: f64,
}

fn oracle_candidates(
    corpus: &RandomCorpus,
    x: &[String],
    kind: ActionKind,
    i: usize,
    k: f64,
    l: f64,
    window: usize,
) -> Result<(Vec<OracleMember>, usize), String> {
    let ctx = manual_context(x, kind, i);
    let dist = corpus.mlm.predict(&ctx).map_err(err)?;
    let crop_x = text(&manual_crop(x, window, i));
    let mut members = Vec::new();
    let mut considered = 0;
    let mut vocab: Vec<&str> = corpus.mlm.vocabulary().collect();
    vocab.sort_unstable();
    for z in vocab {
        if z == "<s>" || z == "</s>" || (kind == ActionKind::Replace && z == x[i]) {
            continue;
        }
        let p = dist.prob(z);
        if p <= k {
            continue;
        }
        considered += 1;
        let y = manual_edit(x, kind, i, z);
        let crop_y = text(&manual_crop(&y, window, i));
        let sim = corpus.sim.similarity(&crop_x, &crop_y, None).map_err(err)?;
        if sim > l {
            members.push(OracleMember {
                token: z.to_string(),
                p,
                sim,
            });
        }
    }
    Ok((members, considered))
}

fn kind_rank(kind: ActionKind) -> u8 {
    match kind {
        ActionKind::Replace => 0,
        ActionKind::Insert => 1,
        ActionKind::Merge => 2,
    }
}

struct OracleTrace {
    applied: Vec<(ActionKind, usize, String)>,
    success: bool,
    adversarial: Vec<String>,
    final_gold_prob: f64,
}

/// Greedy application with every token tagged by the original index it
/// descends from.
fn oracle_greedy(
    x: &TokenizedText,
    pool: &[Action],
    budget: usize,
    victim: &VictimView<'_>,
) -> Result<OracleTrace, String> {
    let mut order: Vec<&Action> = pool.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(kind_rank(a.kind).cmp(&kind_rank(b.kind)))
            .then(a.position.cmp(&b.position))
    });
    let mut toks: Vec<(String, Option<usize>)> = surfaces(x)
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, Some(i)))
        .collect();
    let mut trace = OracleTrace {
        applied: Vec::new(),
        success: false,
        adversarial: Vec::new(),
        final_gold_prob: victim.gold_prob(x).map_err(err)?,
    };
    for a in order {
        if trace.applied.len() == budget {
            break;
        }
        let Some(live) = toks.iter().position(|t| t.1 == Some(a.position)) else {
            continue;
        };
        match a.kind {
            ActionKind::Replace => toks[live].0 = a.fill.clone(),
            ActionKind::Insert => toks.insert(live + 1, (a.fill.clone(), None)),
            ActionKind::Merge => {
                toks.splice(live..live + 2, [(a.fill.clone(), Some(a.position))]);
            }
        }
        trace.applied.push((a.kind, a.position, a.fill.clone()));
        let current: Vec<String> = toks.iter().map(|t| t.0.clone()).collect();
        let dist = victim.distribution(&text(&current)).map_err(err)?;
        trace.final_gold_prob = dist.prob(victim.gold());
        if dist.argmax() != victim.gold() {
            trace.success = true;
            break;
        }
    }
    trace.adversarial = toks.into_iter().map(|t| t.0).collect();
    Ok(trace)
}

/// Replays `applied` on the original surfaces and counts modified tokens. A
/// merge counts the removed tokens that differ from its fill, at least one.
fn brute_mod_count(original: &[String], applied: &[AppliedAction]) -> usize {
    let mut current = original.to_vec();
    let mut count = 0;
    for a in applied {
        match a.kind {
            ActionKind::Replace | ActionKind::Insert => count += 1,
            ActionKind::Merge => {
                let differing = current[a.live_pos..a.live_pos + 2]
                    .iter()
                    .filter(|w| **w != a.fill)
                    .count();
                count += differing.max(1);
            }
        }
        current = manual_edit(&current, a.kind, a.live_pos, &a.fill);
    }
    count
}

// ---------------------------------------------------------------------------
// Criteria

fn criterion_1() -> Outcome {
    let corpus = RandomCorpus::new(11, 400, 800);
    ensure!(corpus.mlm.vocab_size() <= 1000, "vocabulary too large");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut total_members = 0;
    for case in 0..200 {
        let x = corpus.sentence(&mut rng, 1, 12);
        let (kind, i) = random_site(&mut rng, x.len());
        let k = *[1e-4, 1e-3, 5e-3, 2e-2].choose(&mut rng).unwrap();
        let l = *[0.0, 0.3, 0.6, 0.9].choose(&mut rng).unwrap();
        let window = *[1, 3, 5, 15].choose(&mut rng).unwrap();
        let tx = text(&x);
        let ctx = perturb::mask(&tx, kind, i, None).map_err(err)?;
        ensure!(
            ctx == manual_context(&x, kind, i),
            "case {case}: mask context differs"
        );
        let params = CandidateParams {
            mlm_threshold: k,
            sim_threshold: l,
            window,
            ..CandidateParams::default()
        };
        let z = build_candidate_set(&ctx, &tx, &corpus.mlm, &corpus.sim, &params).map_err(err)?;
        let (oracle, considered) = oracle_candidates(&corpus, &x, kind, i, k, l, window)?;
        ensure!(
            z.considered == considered,
            "case {case}: considered {} vs {considered}",
            z.considered
        );
        ensure!(
            z.members.len() == oracle.len(),
            "case {case} ({kind} at {i}): {} members vs oracle {}",
            z.members.len(),
            oracle.len()
        );
        for (got, want) in z.members.iter().zip(&oracle) {
            ensure!(
                got.token == want.token
                    && got.mlm_prob.to_bits() == want.p.to_bits()
                    && got.local_sim.to_bits() == want.sim.to_bits(),
                "case {case}: member {:?} differs from oracle {:?}",
                got.token,
                want.token
            );
        }
        total_members += oracle.len();
    }
    Ok(format!("200 contexts, {total_members} members matched"))
}

/// A small two-class victim with a trigram infiller on the same words.
fn toy_stack(rng: &mut ChaCha8Rng) -> Result<(ModelStack, Vec<String>), String> {
    let words: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
    let mut examples = Vec::new();
    for _ in 0..60 {
        let label = if rng.gen_bool(0.5) { "x" } else { "y" };
        let n = rng.gen_range(3..=8);
        let s: Vec<String> = (0..n)
            .map(|_| {
                let half = if label == "x" { 0 } else { 6 };
                if rng.gen_bool(0.7) {
                    words[half + rng.gen_range(0..6)].clone()
                } else {
                    words.choose(rng).unwrap().clone()
                }
            })
            .collect();
        examples.push(LabeledExample::single(text(&s), label));
    }
    let train =
        Dataset::new(examples, vec!["x".into(), "y".into()], TaskKind::SingleText).map_err(err)?;
    let mut nb = NaiveBayes::new(1.0);
    nb.train(&train).map_err(err)?;
    let mlm =
        Arc::new(train_reference_mlm(train.examples.iter().map(|e| &e.text_a), 0.5).map_err(err)?);
    let tags = [PosTag::Adj, PosTag::Noun, PosTag::Dt, PosTag::Verb];
    let tagger = LexiconTagger::with_entries(
        words
            .iter()
            .map(|w| (w.clone(), *tags.choose(rng).unwrap())),
    );
    let stack = ModelStack {
        mlm: mlm.clone(),
        victim: Arc::new(nb),
        similarity: Arc::new(JaccardSimilarity),
        perplexity: mlm,
        grammar: Arc::new(RuleGrammarChecker),
        tagger: Arc::new(tagger),
    };
    Ok((stack, words))
}

fn random_config(rng: &mut ChaCha8Rng) -> AttackConfig {
    let mut enabled = BTreeSet::new();
    while enabled.is_empty() {
        for kind in ActionKind::ALL {
            if rng.gen_bool(0.6) {
                enabled.insert(kind);
            }
        }
    }
    AttackConfig {
        enabled_actions: enabled,
        np_gate: rng.gen_bool(0.5),
        seed: rng.gen(),
        ..AttackConfig::default()
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut successes = 0;
    let mut steps = 0;
    let (mut stack, mut words) = toy_stack(&mut rng)?;
    for case in 0..100 {
        if case % 10 == 9 {
            (stack, words) = toy_stack(&mut rng)?;
        }
        let n = rng.gen_range(3..=8);
        let x: Vec<String> = (0..n)
            .map(|_| words.choose(&mut rng).unwrap().clone())
            .collect();
        let tx = text(&x);
        let gold = stack
            .victim
            .predict(&tx, None)
            .map_err(err)?
            .argmax()
            .to_string();
        let mut config = random_config(&mut rng);
        config.mlm_threshold = *[0.0, 0.01, 0.05].choose(&mut rng).unwrap();
        config.sim_threshold = *[0.0, 0.2, 0.4].choose(&mut rng).unwrap();
        config.max_steps = Some(rng.gen_range(1..=4));

        let result = attack(
            &LabeledExample::single(tx.clone(), gold.clone()),
            &stack,
            &config,
        )
        .map_err(err)?;
        let view = VictimView::new(stack.victim.as_ref(), None, &gold);
        let pool = build_action_pool(&tx, &view, &stack, &config).map_err(err)?;
        let mut positions = HashSet::new();
        ensure!(
            pool.iter().all(|a| positions.insert(a.position)),
            "case {case}: two pool actions share a position"
        );
        let oracle = oracle_greedy(&tx, &pool, config.step_limit(n), &view)?;
        let got: Vec<(ActionKind, usize, String)> = result
            .applied
            .iter()
            .map(|a| (a.kind, a.orig_pos, a.fill.clone()))
            .collect();
        ensure!(
            got == oracle.applied,
            "case {case}: trace {got:?} vs oracle {:?}",
            oracle.applied
        );
        ensure!(
            result.success == oracle.success,
            "case {case}: success differs"
        );
        ensure!(
            surfaces(&result.adversarial) == oracle.adversarial,
            "case {case}: adversarial text differs"
        );
        ensure!(
            result.final_gold_prob.to_bits() == oracle.final_gold_prob.to_bits(),
            "case {case}: final gold probability differs"
        );
        successes += usize::from(result.success);
        steps += result.steps;
    }
    Ok(format!(
        "100 instances, {successes} successes, {steps} steps"
    ))
}

/// Pair examples: two synthetic sentences with the same label.
fn pair_dataset(corpus: &SyntheticCorpus, n: usize, seed: u64) -> Result<Dataset, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples = (0..n)
        .map(|_| {
            let a = corpus.train.examples.choose(&mut rng).unwrap();
            let b = corpus
                .train
                .examples
                .iter()
                .filter(|e| e.gold_label == a.gold_label)
                .nth(rng.gen_range(0..50))
                .unwrap();
            LabeledExample::pair(a.text_a.clone(), b.text_a.clone(), a.gold_label.clone())
        })
        .collect();
    Dataset::new(examples, corpus.train.label_set.clone(), TaskKind::TextPair).map_err(err)
}

fn check_invariants(
    r: &AttackResult,
    config: &AttackConfig,
    stack: &ModelStack,
) -> Result<(), String> {
    let view = VictimView::new(
        stack.victim.as_ref(),
        r.other.as_ref().map(|o| (o, r.target)),
        &r.gold_label,
    );
    if r.skipped {
        ensure!(r.applied.is_empty(), "skipped example has actions");
        let dist = view.distribution(&r.original).map_err(err)?;
        ensure!(
            dist.argmax() != r.gold_label,
            "skipped example was classified correctly"
        );
        return Ok(());
    }
    ensure!(r.error.is_none(), "attack errored: {:?}", r.error);
    ensure!(
        r.steps == r.applied.len(),
        "steps {} vs {} actions",
        r.steps,
        r.applied.len()
    );
    ensure!(
        r.steps <= config.step_limit(r.original.len()),
        "steps exceed T"
    );
    ensure!(
        r.applied.windows(2).all(|w| w[0].score >= w[1].score),
        "scores not monotone"
    );
    let mut origins = HashSet::new();
    ensure!(
        r.applied.iter().all(|a| origins.insert(a.orig_pos)),
        "position acted on twice"
    );
    ensure!(
        r.applied
            .iter()
            .all(|a| config.enabled_actions.contains(&a.kind)),
        "disabled action applied"
    );
    let inserts = r
        .applied
        .iter()
        .filter(|a| a.kind == ActionKind::Insert)
        .count();
    let merges = r
        .applied
        .iter()
        .filter(|a| a.kind == ActionKind::Merge)
        .count();
    ensure!(
        r.adversarial.len() + merges == r.original.len() + inserts,
        "length identity broken"
    );

    let mut toks: Vec<(String, Option<usize>)> = surfaces(&r.original)
        .into_iter()
        .enumerate()
        .map(|(i, w)| (w, Some(i)))
        .collect();
    for a in &r.applied {
        let removed: Vec<String> = toks[a.live_pos..a.live_pos + a.kind.span()]
            .iter()
            .map(|t| t.0.clone())
            .collect();
        ensure!(
            removed == a.replaced,
            "replaced surfaces do not match the replay"
        );
        match a.kind {
            ActionKind::Replace => toks[a.live_pos] = (a.fill.clone(), None),
            ActionKind::Insert => toks.insert(a.live_pos + 1, (a.fill.clone(), None)),
            ActionKind::Merge => {
                toks.splice(a.live_pos..a.live_pos + 2, [(a.fill.clone(), None)]);
            }
        }
    }
    let replayed: Vec<String> = toks.iter().map(|t| t.0.clone()).collect();
    ensure!(
        replayed == surfaces(&r.adversarial),
        "replayed trace differs from the adversarial text"
    );
    for &f in r.original.frozen() {
        let live = toks.iter().position(|t| t.1 == Some(f));
        ensure!(live.is_some(), "frozen token {f} was modified");
        let live = live.unwrap();
        ensure!(
            toks[live].0 == r.original.tokens()[f].surface(),
            "frozen token {f} changed"
        );
        ensure!(r.adversarial.is_frozen(live), "frozen mark of {f} lost");
    }

    let dist = view.distribution(&r.adversarial).map_err(err)?;
    ensure!(
        r.success == (dist.argmax() != r.gold_label),
        "success flag disagrees with the victim"
    );
    ensure!(
        dist.argmax() == r.final_label,
        "final label disagrees with the victim"
    );
    Ok(())
}

fn criterion_3() -> Outcome {
    let (corpus, stack) = synthetic_stack(31)?;
    let pairs = pair_dataset(&corpus, 400, 32)?;
    let pair_stack = reference_stack(
        &pairs,
        Some(corpus.vectors.clone()),
        LexiconTagger::with_entries(corpus.lexicon.clone()),
        DEFAULT_DELTA,
        DEFAULT_ALPHA,
    )
    .map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let singles = corpus
        .test
        .examples
        .iter()
        .chain(corpus.train.examples.iter().take(500));
    let cases = singles
        .map(|e| (e, &stack))
        .chain(pairs.examples.iter().take(300).map(|e| (e, &pair_stack)));
    let (mut n, mut frozen, mut successes) = (0, 0, 0);
    for (example, stack) in cases {
        let mut config = random_config(&mut rng);
        config.mlm_threshold = *[0.001, 0.005, 0.02].choose(&mut rng).unwrap();
        config.sim_threshold = *[0.3, 0.5, 0.7, 0.9].choose(&mut rng).unwrap();
        config.max_steps = [None, Some(1), Some(2), Some(3), Some(5)][rng.gen_range(0..5)];
        config.attack_punct = rng.gen_bool(0.5);
        config.disable_sim_filter = rng.gen_bool(0.1);
        if rng.gen_bool(0.1) {
            config.disable_mlm_filter = true;
            config.mlm_sample_size = rng.gen_range(5..50);
        }
        let r = attack(example, stack, &config).map_err(err)?;
        check_invariants(&r, &config, stack).map_err(|e| format!("attack {n}: {e}"))?;
        frozen += usize::from(!r.original.frozen().is_empty());
        successes += usize::from(r.success);
        n += 1;
    }
    ensure!(n >= 1000, "only {n} attacks");
    ensure!(frozen > 0, "no attack had frozen tokens");
    Ok(format!(
        "{n} attacks ({frozen} with frozen tokens, {successes} successes)"
    ))
}

fn applied(kind: ActionKind, live: usize, fill: &str, replaced: &[&str]) -> AppliedAction {
    AppliedAction {
        kind,
        orig_pos: live,
        live_pos: live,
        fill: fill.into(),
        score: -0.5,
        replaced: replaced.iter().map(|s| s.to_string()).collect(),
    }
}

fn result_with(original: &[&str], actions: Vec<AppliedAction>) -> AttackResult {
    let original = TokenizedText::from_surfaces(original).unwrap();
    AttackResult {
        index: 0,
        gold_label: "pos".into(),
        target: Side::A,
        success: true,
        skipped: false,
        error: None,
        original: original.clone(),
        other: None,
        adversarial: original,
        steps: actions.len(),
        applied: actions,
        initial_gold_prob: 0.9,
        final_gold_prob: 0.1,
        final_label: "neg".into(),
    }
}

fn criterion_4() -> Outcome {
    let hand = [
        // fill keeps the head noun
        (
            vec!["the", "big", "dog", "runs"],
            vec![applied(ActionKind::Merge, 1, "dog", &["big", "dog"])],
            1,
        ),
        // fill is new
        (
            vec!["the", "big", "dog", "runs"],
            vec![applied(ActionKind::Merge, 1, "cat", &["big", "dog"])],
            2,
        ),
        // replace then a merge keeping the first token
        (
            vec!["a", "red", "car", "stops"],
            vec![
                applied(ActionKind::Replace, 3, "halts", &["stops"]),
                applied(ActionKind::Merge, 0, "a", &["a", "red"]),
            ],
            2,
        ),
    ];
    for (i, (original, actions, want)) in hand.into_iter().enumerate() {
        let r = result_with(&original, actions);
        let got = modification_count(&r);
        ensure!(got == want, "hand case {i}: count {got}, expected {want}");
        let rate = modification_rate(&r).map_err(err)?;
        ensure!(
            rate == want as f64 / original.len() as f64,
            "hand case {i}: rate {rate}"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let alphabet = ["a", "b", "c", "d"];
    for case in 0..50 {
        let n = rng.gen_range(2..=10);
        let original: Vec<String> = (0..n)
            .map(|_| alphabet.choose(&mut rng).unwrap().to_string())
            .collect();
        let mut current = original.clone();
        let mut actions = Vec::new();
        for _ in 0..rng.gen_range(1..=4) {
            let (kind, live) = random_site(&mut rng, current.len());
            let fill = alphabet.choose(&mut rng).unwrap().to_string();
            let replaced: Vec<&str> = current[live..live + kind.span()]
                .iter()
                .map(String::as_str)
                .collect();
            actions.push(applied(kind, live, &fill, &replaced));
            current = manual_edit(&current, kind, live, &fill);
        }
        let refs: Vec<&str> = original.iter().map(String::as_str).collect();
        let r = result_with(&refs, actions);
        let want = brute_mod_count(&original, &r.applied);
        let got = modification_count(&r);
        ensure!(
            got == want,
            "random trace {case}: count {got}, brute force {want}"
        );
    }
    Ok("3 hand cases and 50 random traces".into())
}

fn criterion_5() -> Outcome {
    let mut rows = Vec::new();
    let mut holds = [0usize; 3];
    for seed in 0..3 {
        let (corpus, stack) = synthetic_stack(seed)?;
        let rate = |config: AttackConfig| -> Result<f64, String> {
            let results = attack_dataset(&corpus.test, &stack, &AttackConfig { seed, ..config }, 4)
                .map_err(err)?;
            aggregate(&results, &stack)
                .map_err(err)?
                .a_rate
                .ok_or_else(|| "no attacked examples".to_string())
        };
        let full = rate(AttackConfig::default())?;
        let mut row = format!("seed {seed}: full {full:.3}");
        for (j, kind) in ActionKind::ALL.into_iter().enumerate() {
            let single = rate(AttackConfig::only(kind))?;
            row += &format!(" {kind} {single:.3}");
            holds[j] += usize::from(full >= single);
        }
        rows.push(row);
    }
    ensure!(
        holds.iter().all(|&h| h >= 2),
        "full attack below a single action on too many seeds: {}",
        rows.join("; ")
    );
    Ok(rows.join("; "))
}

fn criterion_6() -> Outcome {
    let corpus = RandomCorpus::new(61, 400, 800);
    ensure!(
        corpus.mlm.vocab_size() >= 203,
        "vocabulary of {} is too small",
        corpus.mlm.vocab_size()
    );
    let vocab: HashSet<&str> = corpus.mlm.vocabulary().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for case in 0..100 {
        let x = corpus.sentence(&mut rng, 2, 12);
        let (kind, i) = random_site(&mut rng, x.len());
        let tx = text(&x);
        let ctx = perturb::mask(&tx, kind, i, None).map_err(err)?;
        let build = |params: CandidateParams| {
            build_candidate_set(&ctx, &tx, &corpus.mlm, &corpus.sim, &params).map_err(err)
        };
        let tokens = |z: &perturb::CandidateSet| {
            z.members
                .iter()
                .map(|c| c.token.clone())
                .collect::<BTreeSet<_>>()
        };

        let full = build(CandidateParams::default())?;
        let no_sim = build(CandidateParams {
            disable_sim_filter: true,
            ..CandidateParams::default()
        })?;
        ensure!(
            tokens(&no_sim).is_superset(&tokens(&full)),
            "case {case}: w/o-sim set is not a superset"
        );

        let seed = rng.gen();
        let no_mlm = build(CandidateParams {
            disable_mlm_filter: true,
            seed,
            ..CandidateParams::default()
        })?;
        ensure!(
            no_mlm.considered == 200,
            "case {case}: w/o-MLM considered {}",
            no_mlm.considered
        );
        let neither = build(CandidateParams {
            disable_mlm_filter: true,
            disable_sim_filter: true,
            seed,
            ..CandidateParams::default()
        })?;
        let sample = tokens(&neither);
        ensure!(
            neither.len() == 200 && sample.len() == 200,
            "case {case}: sample has {} members",
            neither.len()
        );
        ensure!(
            sample
                .iter()
                .all(|z| is_fillable(z) && vocab.contains(z.as_str())),
            "case {case}: sample holds a non-fillable token"
        );
        ensure!(
            kind != ActionKind::Replace || !sample.contains(&x[i]),
            "case {case}: sample holds the replaced token"
        );
        ensure!(
            tokens(&no_mlm).is_subset(&sample),
            "case {case}: sample differs across filters"
        );
    }
    Ok("100 contexts".into())
}

fn criterion_7() -> Outcome {
    let ks = [0.001, 0.005, 0.02];
    let ls = [0.5, 0.7, 0.9];
    let dir = tempfile::tempdir().map_err(err)?;
    let mut rows = Vec::new();
    for seed in 0..3 {
        let (corpus, stack) = synthetic_stack(seed)?;
        let base = AttackConfig {
            seed,
            ..AttackConfig::default()
        };
        let points = sweep(&corpus.test, &stack, &base, &grid(&ks, &ls), 4).map_err(err)?;
        let csv = sweep_csv(&points);
        ensure!(csv.lines().next() == Some(SWEEP_HEADER), "bad CSV header");
        ensure!(csv.lines().count() == 10, "expected 9 rows");
        let path = dir.path().join(format!("sweep{seed}.csv"));
        std::fs::write(&path, &csv).map_err(err)?;
        let parsed = parse_sweep_csv(&std::fs::read_to_string(&path).map_err(err)?).map_err(err)?;
        let bits = |v: Option<f64>| v.map(f64::to_bits);
        ensure!(
            parsed.len() == points.len(),
            "row count changed on re-parse"
        );
        for (a, b) in parsed.iter().zip(&points) {
            ensure!(
                a.k.to_bits() == b.k.to_bits()
                    && a.l.to_bits() == b.l.to_bits()
                    && bits(a.a_rate) == bits(b.a_rate)
                    && bits(a.sim) == bits(b.sim)
                    && bits(a.ppl) == bits(b.ppl),
                "seed {seed}: CSV row for k={} l={} does not round-trip",
                b.k,
                b.l
            );
        }
        for (ki, k) in ks.iter().enumerate() {
            let rates: Vec<f64> = points[ki * 3..ki * 3 + 3]
                .iter()
                .map(|p| p.a_rate.unwrap_or(0.0))
                .collect();
            ensure!(
                rates.windows(2).all(|w| w[0] >= w[1]),
                "seed {seed}, k={k}: A-rate rises with l: {rates:?}"
            );
            rows.push(format!(
                "s{seed} k={k}: {:.3}/{:.3}/{:.3}",
                rates[0], rates[1], rates[2]
            ));
        }
    }
    Ok(rows.join("; "))
}

fn criterion_8() -> Outcome {
    let mut rows = Vec::new();
    let (mut robust, mut longer) = (0, 0);
    for seed in 0..3 {
        let (corpus, stack) = synthetic_stack(seed)?;
        let config = AttackConfig {
            max_steps: Some(3),
            seed,
            ..AttackConfig::default()
        };
        let params = AdvTrainingParams {
            alpha: DEFAULT_ALPHA,
            augment_size: Some(300),
            workers: 4,
        };
        let report =
            adversarial_training_experiment(&corpus.train, &corpus.test, &stack, &config, &params)
                .map_err(err)?;
        let d = report.delta();
        let (da, dc) = (d.a_rate.unwrap_or(0.0), d.mod_count.unwrap_or(0.0));
        ensure!(
            d.accuracy.abs() <= 0.02,
            "seed {seed}: accuracy moved by {:+.3}",
            d.accuracy
        );
        robust += usize::from(da < 0.0);
        longer += usize::from(dc > 0.0);
        rows.push(format!(
            "seed {seed}: dA {da:+.3} dMod {dc:+.3} dAcc {:+.3}",
            d.accuracy
        ));
    }
    ensure!(robust >= 2 && longer >= 2, "{}", rows.join("; "));
    Ok(rows.join("; "))
}

// ---------------------------------------------------------------------------
// Remote models

static LOG: Mutex<Vec<(log::Level, String)>> = Mutex::new(Vec::new());

struct CaptureLogger;

impl log::Log for CaptureLogger {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        LOG.lock()
            .unwrap()
            .push((record.level(), record.args().to_string()));
    }

    fn flush(&self) {}
}

static LOGGER: CaptureLogger = CaptureLogger;

enum Reply {
    Json(String),
    Status(u16),
    Hang(Duration),
}

struct MockServer {
    url: String,
    requests: Arc<Mutex<Vec<(String, serde_json::Value)>>>,
}

fn read_request(stream: &mut TcpStream) -> Option<(String, String)> {
    stream.set_read_timeout(Some(Duration::from_secs(5))).ok()?;
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(p) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            break p + 4;
        }
    };
    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let path = head.split_whitespace().nth(1)?.to_string();
    let length: usize = head
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    while buf.len() < header_end + length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Some((
        path,
        String::from_utf8_lossy(&buf[header_end..]).to_string(),
    ))
}

impl MockServer {
    fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, usize) -> Reply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let seen = requests.clone();
        let handler = Arc::new(handler);
        let counter = Arc::new(AtomicUsize::new(0));
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let (seen, handler, counter) = (seen.clone(), handler.clone(), counter.clone());
                thread::spawn(move || {
                    let Some((path, body)) = read_request(&mut stream) else {
                        return;
                    };
                    let value = serde_json::from_str(&body).unwrap_or(serde_json::Value::Null);
                    seen.lock().unwrap().push((path.clone(), value));
                    let n = counter.fetch_add(1, AtomicOrdering::SeqCst);
                    let (status, body) = match handler(&path, n) {
                        Reply::Json(body) => (200, body),
                        Reply::Status(code) => (code, "{}".to_string()),
                        Reply::Hang(d) => {
                            thread::sleep(d);
                            return;
                        }
                    };
                    let response = format!(
                        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    );
                    let _ = stream.write_all(response.as_bytes());
                });
            }
        });
        Self { url, requests }
    }

    fn client(&self, timeout_ms: u64, retries: u32) -> RemoteClient {
        let endpoint = ModelEndpoint::new(self.url.parse().unwrap())
            .with_timeout(Duration::from_millis(timeout_ms))
            .with_retries(retries)
            .with_backoff(Duration::from_millis(10));
        RemoteClient::new(endpoint).unwrap()
    }

    fn request_count(&self) -> usize {
        self.requests.lock().unwrap().len()
    }
}

fn criterion_9() -> Outcome {
    let p1 = 0.123_456_789_012_345_67_f64;
    let p2 = 1.0 / 3.0;
    let p3 = 1.0 - p1 - p2;
    let victim_p = std::f64::consts::FRAC_1_SQRT_2;
    let score = 0.841_470_984_807_896_5_f64;
    let ppl = 12.345_678_901_234_567_f64;
    let server = MockServer::start(move |path, _| match path {
        "/mlm" => Reply::Json(format!(
            r#"{{"probs": {{"alpha": {p1}, "beta": {p2}, "gamma": {p3}}}}}"#
        )),
        "/victim" => Reply::Json(format!(
            r#"{{"probs": {{"neg": {}, "pos": {victim_p}}}}}"#,
            1.0 - victim_p
        )),
        "/similarity" => Reply::Json(format!(r#"{{"score": {score}}}"#)),
        "/perplexity" => Reply::Json(format!(r#"{{"ppl": {ppl}}}"#)),
        "/grammar" => Reply::Json(r#"{"count": 3}"#.into()),
        "/pos" => Reply::Json(r#"{"tags": ["DT", "NOUN", "VERB"]}"#.into()),
        _ => Reply::Status(404),
    });
    let client = server
        .client(2000, 0)
        .with_labels(vec!["pos".into(), "neg".into()]);
    let x = TokenizedText::from_surfaces(&["the", "dog", "barks"]).unwrap();
    let ctx = perturb::mask(&x, ActionKind::Replace, 1, None).map_err(err)?;

    let dist = MaskedLanguageModel::predict(&client, &ctx).map_err(err)?;
    for (token, p) in [("alpha", p1), ("beta", p2), ("gamma", p3)] {
        ensure!(
            dist.prob(token).to_bits() == p.to_bits(),
            "mlm probability of {token} changed"
        );
    }
    let labels = VictimClassifier::predict(&client, &x, None).map_err(err)?;
    ensure!(
        labels.prob("pos").to_bits() == victim_p.to_bits(),
        "victim probability changed"
    );
    ensure!(
        labels.prob("neg").to_bits() == (1.0 - victim_p).to_bits(),
        "victim probability changed"
    );
    ensure!(
        labels.entries()[0].0 == "pos",
        "labels not in configured order"
    );
    let s = client
        .similarity(&x, &x, Some(Window::new(3, 0)))
        .map_err(err)?;
    ensure!(s.to_bits() == score.to_bits(), "similarity changed");
    ensure!(
        client.perplexity(&x).map_err(err)?.to_bits() == ppl.to_bits(),
        "perplexity changed"
    );
    ensure!(
        client.count_errors(&x).map_err(err)? == 3,
        "grammar count changed"
    );
    ensure!(
        client.tag(&x).map_err(err)? == vec![PosTag::Dt, PosTag::Noun, PosTag::Verb],
        "tags changed"
    );
    {
        let requests = server.requests.lock().unwrap();
        let body = |p: &str| {
            requests
                .iter()
                .find(|r| r.0 == p)
                .map(|r| r.1.clone())
                .unwrap_or_default()
        };
        let mlm = body("/mlm");
        ensure!(
            mlm["left"] == serde_json::json!(["the"])
                && mlm["right"] == serde_json::json!(["barks"])
                && mlm["kind"] == "replace",
            "mlm request body {mlm}"
        );
        let sim = body("/similarity");
        ensure!(
            sim["a"] == serde_json::json!(["the", "dog"]) && sim["window"] == 3,
            "similarity request body {sim}"
        );
    }

    let skewed =
        MockServer::start(|_, _| Reply::Json(r#"{"probs": {"a": 0.25, "b": 0.25}}"#.into()));
    LOG.lock().unwrap().clear();
    let dist = MaskedLanguageModel::predict(&skewed.client(2000, 0), &ctx).map_err(err)?;
    ensure!(
        dist.prob("a") == 0.5 && dist.prob("b") == 0.5,
        "distribution not renormalized"
    );
    ensure!(
        LOG.lock()
            .unwrap()
            .iter()
            .any(|(level, msg)| *level == log::Level::Warn && msg.contains("renormaliz")),
        "no renormalization warning logged"
    );

    let flaky = MockServer::start(|_, n| {
        if n == 0 {
            Reply::Status(503)
        } else {
            Reply::Json(r#"{"count": 1}"#.into())
        }
    });
    ensure!(
        flaky.client(2000, 1).count_errors(&x).map_err(err)? == 1,
        "5xx not retried"
    );

    let retries = 2;
    let hanging = MockServer::start(|_, _| Reply::Hang(Duration::from_millis(1500)));
    match hanging.client(150, retries).perplexity(&x) {
        Err(ModelError::Transport { attempts, .. }) => {
            ensure!(attempts == retries + 1, "reported {attempts} attempts")
        }
        other => return Err(format!("expected a transport error, got {other:?}")),
    }
    let deadline = Instant::now() + Duration::from_secs(2);
    while hanging.request_count() < (retries + 1) as usize && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(10));
    }
    thread::sleep(Duration::from_millis(100));
    ensure!(
        hanging.request_count() == (retries + 1) as usize,
        "server saw {} requests",
        hanging.request_count()
    );
    Ok("6 roles round-trip, renormalization warned, retries exhausted after 3 attempts".into())
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let output = Command::new(env!("CARGO_BIN_EXE_maskfill"))
        .args(args)
        .output()
        .map_err(err)?;
    ensure!(
        output.status.success(),
        "maskfill {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&output.stderr)
    );
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let root = dir.path();
    let path = |name: &str| root.join(name).to_string_lossy().into_owned();
    run_cli(&[
        "synth",
        "--out",
        &path(""),
        "--seed",
        "7",
        "--n-train",
        "600",
        "--n-test",
        "80",
    ])?;
    let config = path("config.toml");
    run_cli(&["train-victim", "--config", &config])?;
    run_cli(&["train-mlm", "--config", &config])?;
    let runs = [("a", "1"), ("b", "1"), ("c", "4")];
    for (name, workers) in runs {
        run_cli(&[
            "attack",
            "--config",
            &config,
            "--out",
            &path(name),
            "--workers",
            workers,
        ])?;
    }
    let read =
        |name: &str, file: &str| std::fs::read(Path::new(&path(name)).join(file)).map_err(err);
    let first = read("a", "trace.jsonl")?;
    ensure!(!first.is_empty(), "empty trace");
    for (name, workers) in &runs[1..] {
        ensure!(
            read(name, "trace.jsonl")? == first,
            "trace with {workers} worker(s) differs"
        );
        ensure!(
            read(name, "metrics.json")? == read("a", "metrics.json")?,
            "metrics with {workers} worker(s) differ"
        );
    }
    Ok(format!("3 runs, {} byte traces identical", first.len()))
}

// ---------------------------------------------------------------------------

type Check = fn() -> Outcome;

const CRITERIA: &[(&str, Check, Option<u64>)] = &[
    (
        "candidate set matches brute-force oracle",
        criterion_1,
        Some(5),
    ),
    (
        "greedy trace matches origin-tracking oracle",
        criterion_2,
        Some(10),
    ),
    ("attack invariants hold on fuzzed inputs", criterion_3, None),
    ("modification counting", criterion_4, None),
    (
        "full attack at least as strong as each single action",
        criterion_5,
        Some(300),
    ),
    ("ablation candidate sets", criterion_6, None),
    (
        "threshold sweep CSV and monotonicity in l",
        criterion_7,
        None,
    ),
    ("adversarial training", criterion_8, None),
    ("remote model protocol", criterion_9, None),
    ("CLI determinism across worker counts", criterion_10, None),
];

fn main() -> ExitCode {
    log::set_logger(&LOGGER).expect("logger");
    log::set_max_level(log::LevelFilter::Warn);
    let mut failed = 0;
    for (i, (name, check, limit)) in CRITERIA.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let message = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {message}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(limit)) if secs > *limit as f64 => {
                Err(format!("took {secs:.1}s, limit {limit}s"))
            }
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("[PASS] criterion {}: {name} ({secs:.2}s) {detail}", i + 1),
            Err(reason) => {
                failed += 1;
                println!("[FAIL] criterion {}: {name} ({secs:.2}s) {reason}", i + 1);
            }
        }
    }
    println!(
        "{}/{} criteria passed",
        CRITERIA.len() - failed,
        CRITERIA.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
