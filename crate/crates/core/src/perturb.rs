//! Replace / Insert / Merge perturbations: masking, candidate-set
//! construction under the MLM-probability and local-similarity thresholds,
//! fill selection and action scoring.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{
    ActionKind, LabelDistribution, MaskedContext, MaskedLanguageModel, ModelError, PosTag,
    SimilarityScorer, VictimClassifier, Window, BOS, EOS,
};
use crate::text::{Side, Token, TokenizedText};

/// Default MLM probability threshold `k`.
pub const DEFAULT_MLM_THRESHOLD: f64 = 5e-3;
/// Default local similarity threshold `l`.
pub const DEFAULT_SIM_THRESHOLD: f64 = 0.7;
/// Default local similarity window, in tokens.
pub const DEFAULT_WINDOW: usize = 15;
/// Tokens sampled per context when the MLM filter is ablated.
pub const ABLATION_SAMPLE_SIZE: usize = 200;

#[derive(Debug, Error)]
pub enum PerturbError {
    #[error("position {position} out of range for {kind} on a text of {len} tokens")]
    OutOfRange {
        kind: ActionKind,
        position: usize,
        len: usize,
    },
    #[error("position {0} is frozen")]
    Frozen(usize),
    #[error("bigram at {0} is not a noun phrase")]
    NotNounPhrase(usize),
    #[error("fill {0:?} is not a valid token")]
    InvalidFill(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: String,
    pub mlm_prob: f64,
    pub local_sim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub members: Vec<Candidate>,
    pub ctx: MaskedContext,
    /// Vocabulary entries examined before the similarity filter.
    pub considered: usize,
}

impl CandidateSet {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }
}

/// A scored edit. `position` indexes the text the action was built against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub kind: ActionKind,
    pub position: usize,
    pub fill: String,
    pub score: f64,
    pub resulting_gold_prob: f64,
    /// Surfaces the edit removes (one for replace, two for merge).
    pub replaced: Vec<String>,
}

fn surfaces(tokens: &[Token]) -> Vec<String> {
    tokens.iter().map(|t| t.surface().to_string()).collect()
}

fn check_range(x: &TokenizedText, kind: ActionKind, i: usize) -> Result<(), PerturbError> {
    let limit = match kind {
        ActionKind::Merge => x.len().saturating_sub(1),
        _ => x.len(),
    };
    if i >= limit {
        return Err(PerturbError::OutOfRange {
            kind,
            position: i,
            len: x.len(),
        });
    }
    Ok(())
}

pub fn mask_replace(x: &TokenizedText, i: usize) -> Result<MaskedContext, PerturbError> {
    check_range(x, ActionKind::Replace, i)?;
    if x.is_frozen(i) {
        return Err(PerturbError::Frozen(i));
    }
    let t = x.tokens();
    Ok(MaskedContext::new(
        surfaces(&t[..i]),
        surfaces(&t[i + 1..]),
        ActionKind::Replace,
        i,
        vec![t[i].surface().to_string()],
    )?)
}

/// Mask placed after position `i`.
pub fn mask_insert(x: &TokenizedText, i: usize) -> Result<MaskedContext, PerturbError> {
    check_range(x, ActionKind::Insert, i)?;
    if x.is_frozen(i) {
        return Err(PerturbError::Frozen(i));
    }
    let t = x.tokens();
    Ok(MaskedContext::new(
        surfaces(&t[..=i]),
        surfaces(&t[i + 1..]),
        ActionKind::Insert,
        i,
        vec![],
    )?)
}

/// Single mask over the bigram at `(i, i + 1)`. With `tags`, the bigram must
/// also pass the noun-phrase gate.
pub fn mask_merge(
    x: &TokenizedText,
    i: usize,
    tags: Option<&[PosTag]>,
) -> Result<MaskedContext, PerturbError> {
    check_range(x, ActionKind::Merge, i)?;
    for p in [i, i + 1] {
        if x.is_frozen(p) {
            return Err(PerturbError::Frozen(p));
        }
    }
    if let Some(tags) = tags {
        if !is_noun_phrase(tags, i) {
            return Err(PerturbError::NotNounPhrase(i));
        }
    }
    let t = x.tokens();
    Ok(MaskedContext::new(
        surfaces(&t[..i]),
        surfaces(&t[i + 2..]),
        ActionKind::Merge,
        i,
        surfaces(&t[i..i + 2]),
    )?)
}

/// Tag bigrams a merge may collapse.
pub const NOUN_PHRASE_PATTERNS: [(PosTag, PosTag); 3] = [
    (PosTag::Adj, PosTag::Noun),
    (PosTag::Noun, PosTag::Noun),
    (PosTag::Dt, PosTag::Noun),
];

pub fn is_noun_phrase(tags: &[PosTag], i: usize) -> bool {
    match (tags.get(i), tags.get(i + 1)) {
        (Some(&a), Some(&b)) => NOUN_PHRASE_PATTERNS.contains(&(a, b)),
        _ => false,
    }
}

pub fn mask(
    x: &TokenizedText,
    kind: ActionKind,
    i: usize,
    tags: Option<&[PosTag]>,
) -> Result<MaskedContext, PerturbError> {
    match kind {
        ActionKind::Replace => mask_replace(x, i),
        ActionKind::Insert => mask_insert(x, i),
        ActionKind::Merge => mask_merge(x, i, tags),
    }
}

/// Applies an edit. Frozen positions are carried to their new indices.
pub fn apply_edit(
    x: &TokenizedText,
    kind: ActionKind,
    i: usize,
    fill: &str,
) -> Result<TokenizedText, PerturbError> {
    check_range(x, kind, i)?;
    let fill = Token::new(fill).map_err(|_| PerturbError::InvalidFill(fill.to_string()))?;
    let mut tokens = x.tokens().to_vec();
    let frozen: BTreeSet<usize> = match kind {
        ActionKind::Replace => {
            tokens[i] = fill;
            x.frozen().clone()
        }
        ActionKind::Insert => {
            tokens.insert(i + 1, fill);
            x.frozen()
                .iter()
                .map(|&p| if p > i { p + 1 } else { p })
                .collect()
        }
        ActionKind::Merge => {
            tokens.splice(i..i + 2, [fill]);
            x.frozen()
                .iter()
                .filter(|&&p| p != i && p != i + 1)
                .map(|&p| if p > i + 1 { p - 1 } else { p })
                .collect()
        }
    };
    Ok(TokenizedText::from_parts(tokens, frozen))
}

pub fn apply_action(x: &TokenizedText, a: &Action) -> Result<TokenizedText, PerturbError> {
    apply_edit(x, a.kind, a.position, &a.fill)
}

/// Filter settings for [`build_candidate_set`].
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateParams {
    pub mlm_threshold: f64,
    pub sim_threshold: f64,
    pub window: usize,
    pub disable_sim_filter: bool,
    pub disable_mlm_filter: bool,
    pub sample_size: usize,
    /// Seeds the vocabulary sample when the MLM filter is disabled.
    pub seed: u64,
}

impl Default for CandidateParams {
    fn default() -> Self {
        Self {
            mlm_threshold: DEFAULT_MLM_THRESHOLD,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            window: DEFAULT_WINDOW,
            disable_sim_filter: false,
            disable_mlm_filter: false,
            sample_size: ABLATION_SAMPLE_SIZE,
            seed: 0,
        }
    }
}

/// Whether the MLM may propose `token` as a fill at all.
pub fn is_fillable(token: &str) -> bool {
    token != BOS && token != EOS && Token::is_valid_surface(token)
}

/// `Z = { z in V : p_MLM(z | ctx) > k and local_sim(x, x_z) > l }`, minus the
/// original token for replace. Members are ordered by token.
pub fn build_candidate_set(
    ctx: &MaskedContext,
    x: &TokenizedText,
    mlm: &dyn MaskedLanguageModel,
    sim: &dyn SimilarityScorer,
    params: &CandidateParams,
) -> Result<CandidateSet, PerturbError> {
    let dist = mlm.predict(ctx)?;
    let mut pool: Vec<(&str, f64)> = dist
        .entries()
        .iter()
        .map(|(t, p)| (&**t, *p))
        .filter(|(t, _)| is_fillable(t))
        .filter(|(t, _)| !(ctx.kind == ActionKind::Replace && ctx.replaced[0] == *t))
        .collect();
    pool.sort_by(|a, b| a.0.cmp(b.0));
    pool.dedup_by(|a, b| a.0 == b.0);

    if params.disable_mlm_filter {
        let take = params.sample_size.min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let mut picked = index::sample(&mut rng, pool.len(), take).into_vec();
        picked.sort_unstable();
        pool = picked.into_iter().map(|i| pool[i]).collect();
    } else {
        pool.retain(|(_, p)| *p > params.mlm_threshold);
    }
    let considered = pool.len();

    let window = Window::new(params.window, ctx.origin_position);
    let mut members = Vec::new();
    for (token, mlm_prob) in pool {
        let filled = apply_edit(x, ctx.kind, ctx.origin_position, token)?;
        let local_sim = sim.similarity(x, &filled, Some(window))?;
        if params.disable_sim_filter || local_sim > params.sim_threshold {
            members.push(Candidate {
                token: token.to_string(),
                mlm_prob,
                local_sim,
            });
        }
    }
    Ok(CandidateSet {
        members,
        ctx: ctx.clone(),
        considered,
    })
}

/// The victim as seen from an attack on one side of an example.
pub struct VictimView<'a> {
    victim: &'a dyn VictimClassifier,
    other: Option<(&'a TokenizedText, Side)>,
    gold: &'a str,
}

impl<'a> VictimView<'a> {
    /// `other` is the untouched partner text and the side the *target* sits on.
    pub fn new(
        victim: &'a dyn VictimClassifier,
        other: Option<(&'a TokenizedText, Side)>,
        gold: &'a str,
    ) -> Self {
        Self {
            victim,
            other,
            gold,
        }
    }

    pub fn gold(&self) -> &str {
        self.gold
    }

    pub fn distribution(&self, target: &TokenizedText) -> Result<LabelDistribution, ModelError> {
        match self.other {
            None => self.victim.predict(target, None),
            Some((other, Side::A)) => self.victim.predict(target, Some(other)),
            Some((other, Side::B)) => self.victim.predict(other, Some(target)),
        }
    }

    pub fn gold_prob(&self, target: &TokenizedText) -> Result<f64, ModelError> {
        Ok(self.distribution(target)?.prob(self.gold))
    }
}

/// The member minimizing the victim's gold-label probability. Ties prefer the
/// higher MLM probability, then the lexicographically smaller token.
pub fn select_fill(
    z: &CandidateSet,
    x: &TokenizedText,
    victim: &VictimView<'_>,
) -> Result<Option<(Candidate, f64)>, PerturbError> {
    let mut best: Option<(&Candidate, f64)> = None;
    for candidate in &z.members {
        let filled = apply_edit(x, z.ctx.kind, z.ctx.origin_position, &candidate.token)?;
        let p = victim.gold_prob(&filled)?;
        let better = match best {
            None => true,
            Some((incumbent, q)) => match p.total_cmp(&q) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => match candidate.mlm_prob.total_cmp(&incumbent.mlm_prob) {
                    Ordering::Greater => true,
                    Ordering::Less => false,
                    Ordering::Equal => candidate.token < incumbent.token,
                },
            },
        };
        if better {
            best = Some((candidate, p));
        }
    }
    Ok(best.map(|(c, p)| (c.clone(), p)))
}

/// Scores `kind` at `position` with `fill` as `-p_f(y | a(x))`.
pub fn score_action(
    x: &TokenizedText,
    kind: ActionKind,
    position: usize,
    fill: &str,
    victim: &VictimView<'_>,
) -> Result<Action, PerturbError> {
    let perturbed = apply_edit(x, kind, position, fill)?;
    let p = victim.gold_prob(&perturbed)?;
    Ok(action_from_prob(x, kind, position, fill, p))
}

pub(crate) fn action_from_prob(
    x: &TokenizedText,
    kind: ActionKind,
    position: usize,
    fill: &str,
    gold_prob: f64,
) -> Action {
    let replaced = x.tokens()[position..position + kind.span()]
        .iter()
        .map(|t| t.surface().to_string())
        .collect();
    Action {
        kind,
        position,
        fill: fill.to_string(),
        score: -gold_prob,
        resulting_gold_prob: gold_prob,
        replaced,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{JaccardSimilarity, LabelDistribution, VocabDistribution};
    use crate::text::tokenize;
    use std::collections::HashMap;
    use std::sync::Arc;

    fn text(s: &str) -> TokenizedText {
        tokenize(s)
    }

    #[test]
    fn replace_mask_shapes() {
        let x = text("The movie is fantastic");
        let ctx = mask_replace(&x, 3).unwrap();
        assert_eq!(ctx.left, ["The", "movie", "is"]);
        assert!(ctx.right.is_empty());
        assert_eq!(ctx.replaced, ["fantastic"]);
        assert!(mask_replace(&x, 0).unwrap().left.is_empty());
        assert!(matches!(
            mask_replace(&x, 4),
            Err(PerturbError::OutOfRange { .. })
        ));
        let frozen = x.clone().with_frozen([1].into()).unwrap();
        assert!(matches!(
            mask_replace(&frozen, 1),
            Err(PerturbError::Frozen(1))
        ));
    }

    #[test]
    fn insert_mask_shapes() {
        let x = text("I recommend");
        let ctx = mask_insert(&x, 0).unwrap();
        assert_eq!(ctx.left, ["I"]);
        assert_eq!(ctx.right, ["recommend"]);
        assert!(ctx.replaced.is_empty());
        assert!(mask_insert(&x, 1).unwrap().right.is_empty());
        let filled = apply_edit(&x, ActionKind::Insert, 0, "highly").unwrap();
        assert_eq!(filled.surfaces(), ["I", "highly", "recommend"]);
        assert!(mask_insert(&x, 2).is_err());
    }

    #[test]
    fn merge_mask_shapes() {
        let x = text("I love New York");
        let ctx = mask_merge(&x, 2, None).unwrap();
        assert_eq!(ctx.left, ["I", "love"]);
        assert!(ctx.right.is_empty());
        assert_eq!(ctx.replaced, ["New", "York"]);
        let filled = apply_edit(&x, ActionKind::Merge, 2, "York").unwrap();
        assert_eq!(filled.surfaces(), ["I", "love", "York"]);
        assert!(matches!(
            mask_merge(&x, 3, None),
            Err(PerturbError::OutOfRange { .. })
        ));
        let tags = [PosTag::Pron, PosTag::Verb, PosTag::Verb, PosTag::Noun];
        assert!(matches!(
            mask_merge(&x, 2, Some(&tags)),
            Err(PerturbError::NotNounPhrase(2))
        ));
    }

    #[test]
    fn apply_edit_lengths_and_frozen() {
        let x = text("a b c").with_frozen([2].into()).unwrap();
        let r = apply_edit(&x, ActionKind::Replace, 1, "x").unwrap();
        assert_eq!(r.surfaces(), ["a", "x", "c"]);
        assert_eq!(r.frozen(), &BTreeSet::from([2]));
        let i = apply_edit(&text("a b"), ActionKind::Insert, 0, "x").unwrap();
        assert_eq!(i.surfaces(), ["a", "x", "b"]);
        let m = apply_edit(&x, ActionKind::Merge, 0, "a").unwrap();
        assert_eq!(m.surfaces(), ["a", "c"]);
        assert_eq!(m.frozen(), &BTreeSet::from([1]));
        assert_eq!(m.token(1).unwrap().surface(), "c");
        assert!(matches!(
            apply_edit(&x, ActionKind::Replace, 0, "two words"),
            Err(PerturbError::InvalidFill(_))
        ));
    }

    #[test]
    fn noun_phrase_gate() {
        assert!(is_noun_phrase(&[PosTag::Adj, PosTag::Noun], 0));
        assert!(is_noun_phrase(&[PosTag::Dt, PosTag::Noun], 0));
        assert!(!is_noun_phrase(&[PosTag::Verb, PosTag::Adv], 0));
        assert!(!is_noun_phrase(&[PosTag::Adj], 0));
    }

    /// Returns a fixed distribution whatever the context.
    struct FixedMlm(Vec<(&'static str, f64)>);

    impl MaskedLanguageModel for FixedMlm {
        fn predict(&self, _: &MaskedContext) -> Result<VocabDistribution, ModelError> {
            VocabDistribution::new(self.0.iter().map(|(t, p)| (Arc::from(*t), *p)).collect())
        }
    }

    struct ConstSim(f64);

    impl SimilarityScorer for ConstSim {
        fn similarity(
            &self,
            _: &TokenizedText,
            _: &TokenizedText,
            _: Option<Window>,
        ) -> Result<f64, ModelError> {
            Ok(self.0)
        }
    }

    /// Gold probability looked up by which probe word the text contains.
    struct LookupVictim(HashMap<&'static str, f64>);

    impl VictimClassifier for LookupVictim {
        fn predict(
            &self,
            text: &TokenizedText,
            _: Option<&TokenizedText>,
        ) -> Result<LabelDistribution, ModelError> {
            let p = text
                .surfaces()
                .iter()
                .find_map(|s| self.0.get(s).copied())
                .unwrap_or(1.0);
            LabelDistribution::new(vec![("y".into(), p), ("n".into(), 1.0 - p)])
        }
    }

    #[test]
    fn candidate_set_filters_and_excludes_original() {
        let mlm = FixedMlm(vec![("good", 0.5), ("great", 0.4), ("bad", 0.1)]);
        let x = text("the film is good");
        let ctx = mask_replace(&x, 3).unwrap();
        let params = CandidateParams {
            mlm_threshold: 0.2,
            ..CandidateParams::default()
        };
        let z = build_candidate_set(&ctx, &x, &mlm, &ConstSim(0.9), &params).unwrap();
        let tokens: Vec<&str> = z.members.iter().map(|c| c.token.as_str()).collect();
        assert_eq!(tokens, ["great"]);

        let unreachable = CandidateParams {
            mlm_threshold: 1.0,
            ..CandidateParams::default()
        };
        assert!(
            build_candidate_set(&ctx, &x, &mlm, &ConstSim(0.9), &unreachable)
                .unwrap()
                .is_empty()
        );
        let low_sim = build_candidate_set(&ctx, &x, &mlm, &ConstSim(0.7), &params).unwrap();
        assert!(low_sim.is_empty(), "similarity must exceed l strictly");
    }

    #[test]
    fn boundary_symbols_never_fill() {
        let mlm = FixedMlm(vec![(BOS, 0.3), (EOS, 0.3), ("x", 0.4)]);
        let x = text("a b");
        let ctx = mask_insert(&x, 0).unwrap();
        let z = build_candidate_set(
            &ctx,
            &x,
            &mlm,
            &JaccardSimilarity,
            &CandidateParams {
                disable_sim_filter: true,
                ..CandidateParams::default()
            },
        )
        .unwrap();
        assert_eq!(z.members.len(), 1);
        assert_eq!(z.members[0].token, "x");
    }

    #[test]
    fn ablated_mlm_samples_fixed_count() {
        let words: Vec<&'static str> = (0..500)
            .map(|i| &*Box::leak(format!("w{i}").into_boxed_str()))
            .collect();
        let mlm = FixedMlm(words.iter().map(|w| (*w, 1.0 / 500.0)).collect());
        let x = text("a b c");
        let ctx = mask_replace(&x, 1).unwrap();
        let params = CandidateParams {
            disable_mlm_filter: true,
            disable_sim_filter: true,
            seed: 11,
            ..CandidateParams::default()
        };
        let z = build_candidate_set(&ctx, &x, &mlm, &ConstSim(1.0), &params).unwrap();
        assert_eq!(z.considered, 200);
        assert_eq!(z.len(), 200);
        let again = build_candidate_set(&ctx, &x, &mlm, &ConstSim(1.0), &params).unwrap();
        assert_eq!(z.members, again.members);
    }

    fn candidate(token: &str, mlm_prob: f64) -> Candidate {
        Candidate {
            token: token.into(),
            mlm_prob,
            local_sim: 1.0,
        }
    }

    #[test]
    fn select_fill_takes_most_confusing() {
        let x = text("the film is fine");
        let ctx = mask_replace(&x, 3).unwrap();
        let victim = LookupVictim([("great", 0.3), ("decent", 0.9)].into());
        let view = VictimView::new(&victim, None, "y");
        let z = CandidateSet {
            members: vec![candidate("decent", 0.5), candidate("great", 0.1)],
            ctx: ctx.clone(),
            considered: 2,
        };
        let (best, p) = select_fill(&z, &x, &view).unwrap().unwrap();
        assert_eq!(best.token, "great");
        assert_eq!(p, 0.3);

        let empty = CandidateSet {
            members: vec![],
            ctx: ctx.clone(),
            considered: 0,
        };
        assert!(select_fill(&empty, &x, &view).unwrap().is_none());

        let single = CandidateSet {
            members: vec![candidate("decent", 0.5)],
            ctx,
            considered: 1,
        };
        assert_eq!(
            select_fill(&single, &x, &view).unwrap().unwrap().0.token,
            "decent"
        );
    }

    #[test]
    fn select_fill_tie_breaks() {
        let x = text("a b");
        let ctx = mask_replace(&x, 1).unwrap();
        let victim = LookupVictim([("p", 0.4), ("q", 0.4), ("r", 0.4)].into());
        let view = VictimView::new(&victim, None, "y");
        let z = CandidateSet {
            members: vec![
                candidate("r", 0.2),
                candidate("q", 0.3),
                candidate("p", 0.3),
            ],
            ctx,
            considered: 3,
        };
        assert_eq!(select_fill(&z, &x, &view).unwrap().unwrap().0.token, "p");
    }

    #[test]
    fn score_is_negative_gold_prob() {
        let x = text("a b");
        let certain = LookupVictim([("keep", 1.0), ("flip", 0.0)].into());
        let view = VictimView::new(&certain, None, "y");
        let a = score_action(&x, ActionKind::Replace, 1, "keep", &view).unwrap();
        assert_eq!(a.score, -1.0);
        assert_eq!(a.replaced, ["b"]);
        let b = score_action(&x, ActionKind::Replace, 1, "flip", &view).unwrap();
        assert_eq!(b.score, 0.0);
        assert_eq!(b.resulting_gold_prob, 0.0);

        let graded = LookupVictim([("u", 0.2), ("v", 0.7)].into());
        let view = VictimView::new(&graded, None, "y");
        let u = score_action(&x, ActionKind::Insert, 0, "u", &view).unwrap();
        let v = score_action(&x, ActionKind::Insert, 0, "v", &view).unwrap();
        assert!(u.score > v.score);
    }
}
