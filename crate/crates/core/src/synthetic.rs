//! Lexicon-generated two-class sentiment corpus for experiments that need a
//! trainable stack without external data.
//!
//! Each sentence carries one sentiment adjective drawn from its class plus
//! neutral words (nouns, adjectives, adverbs, verbs). Every neutral word
//! leans toward one class and is drawn from the class it leans to with
//! probability `lean`, so the victim picks up spurious evidence an attack can
//! exploit. Word vectors give sentiment adjectives a large polarity
//! component, which keeps the similarity filter from accepting a swap to
//! the opposite sentiment.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{PosTag, WordVectors};
use crate::text::{Dataset, LabeledExample, TaskKind, Token, TokenizedText};

pub const POSITIVE: &str = "pos";
pub const NEGATIVE: &str = "neg";

const POSITIVE_WORDS: &[&str] = &[
    "great",
    "wonderful",
    "superb",
    "brilliant",
    "lovely",
    "excellent",
    "delightful",
    "charming",
    "stunning",
    "terrific",
];
const NEGATIVE_WORDS: &[&str] = &[
    "awful", "terrible", "dreadful", "boring", "bland", "tedious", "clumsy", "painful", "dull",
    "lame",
];
const NOUNS: &[&str] = &[
    "movie",
    "film",
    "plot",
    "story",
    "cast",
    "script",
    "soundtrack",
    "ending",
    "acting",
    "dialogue",
    "pacing",
    "score",
    "camera",
    "lighting",
    "editing",
    "premise",
];
const ADJECTIVES: &[&str] = &[
    "long", "short", "recent", "french", "quiet", "modern", "early", "late", "loud", "simple",
    "old", "new",
];
const ADVERBS: &[&str] = &[
    "really", "quite", "truly", "rather", "fairly", "pretty", "mostly", "simply",
];
const VERBS: &[&str] = &["watched", "saw", "rented", "streamed", "caught", "reviewed"];
const FUNCTION_WORDS: &[(&str, PosTag)] = &[
    ("the", PosTag::Dt),
    ("this", PosTag::Dt),
    ("i", PosTag::Pron),
    ("it", PosTag::Pron),
    ("was", PosTag::Verb),
    ("is", PosTag::Verb),
    ("were", PosTag::Verb),
    ("felt", PosTag::Verb),
    ("and", PosTag::Other),
    (",", PosTag::Punct),
    (".", PosTag::Punct),
];

/// Template slots. `Opt*` slots are filled half of the time.
#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    Sentiment,
    Noun,
    Adj,
    OptAdj,
    OptAdv,
    Verb,
}

use Slot::*;

const TEMPLATES: &[&[Slot]] = &[
    &[
        Word("the"),
        OptAdj,
        Noun,
        Word("was"),
        OptAdv,
        Sentiment,
        Word("."),
    ],
    &[
        Word("this"),
        Noun,
        Word("is"),
        Sentiment,
        Word("and"),
        Word("the"),
        Noun,
        Word("is"),
        Adj,
        Word("."),
    ],
    &[
        Word("i"),
        Verb,
        Word("the"),
        OptAdj,
        Noun,
        Word(","),
        Word("it"),
        Word("was"),
        Sentiment,
        Word("."),
    ],
    &[
        Word("the"),
        Adj,
        Noun,
        Word("felt"),
        OptAdv,
        Sentiment,
        Word("."),
    ],
    &[
        Word("this"),
        Word("was"),
        OptAdv,
        Sentiment,
        Word(","),
        Word("the"),
        Noun,
        Word("was"),
        Adj,
        Word("."),
    ],
    &[
        Word("the"),
        Noun,
        Word("and"),
        Word("the"),
        Noun,
        Word("were"),
        OptAdv,
        Sentiment,
        Word("."),
    ],
    &[
        Word("i"),
        Verb,
        Word("this"),
        Noun,
        Word(","),
        OptAdv,
        Sentiment,
        Word("."),
    ],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_test: usize,
    /// Probability that an example's label is flipped.
    pub label_noise: f64,
    /// Probability that a neutral word is drawn from the gold class's lean.
    pub lean: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_test: 200,
            label_noise: 0.1,
            lean: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub train: Dataset,
    pub test: Dataset,
    pub vectors: WordVectors,
    /// Tags for every generated word.
    pub lexicon: Vec<(String, PosTag)>,
}

/// Splits a category into the halves leaning positive and negative.
fn lean_halves(words: &[&'static str]) -> [Vec<&'static str>; 2] {
    let mut halves = [Vec::new(), Vec::new()];
    for (i, w) in words.iter().enumerate() {
        halves[i % 2].push(*w);
    }
    halves
}

struct Generator {
    nouns: [Vec<&'static str>; 2],
    adjectives: [Vec<&'static str>; 2],
    adverbs: [Vec<&'static str>; 2],
    verbs: [Vec<&'static str>; 2],
    lean: f64,
}

impl Generator {
    fn neutral(
        &self,
        rng: &mut ChaCha8Rng,
        halves: &[Vec<&'static str>; 2],
        class: usize,
    ) -> &'static str {
        let side = if rng.gen_bool(self.lean) {
            class
        } else {
            1 - class
        };
        halves[side].choose(rng).copied().unwrap_or("the")
    }

    fn sentence(&self, rng: &mut ChaCha8Rng, class: usize) -> TokenizedText {
        let template = TEMPLATES.choose(rng).copied().unwrap_or(TEMPLATES[0]);
        let sentiment = if class == 0 {
            POSITIVE_WORDS
        } else {
            NEGATIVE_WORDS
        };
        let mut words = Vec::with_capacity(template.len());
        for slot in template {
            let word = match *slot {
                Word(w) => Some(w),
                Sentiment => sentiment.choose(rng).copied(),
                Noun => Some(self.neutral(rng, &self.nouns, class)),
                Adj => Some(self.neutral(rng, &self.adjectives, class)),
                Verb => Some(self.neutral(rng, &self.verbs, class)),
                OptAdj => rng
                    .gen_bool(0.5)
                    .then(|| self.neutral(rng, &self.adjectives, class)),
                OptAdv => rng
                    .gen_bool(0.5)
                    .then(|| self.neutral(rng, &self.adverbs, class)),
            };
            if let Some(w) = word {
                words.push(Token::new(w).expect("lexicon words are valid tokens"));
            }
        }
        TokenizedText::new(words)
    }
}

pub fn generate(config: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let generator = Generator {
        nouns: lean_halves(NOUNS),
        adjectives: lean_halves(ADJECTIVES),
        adverbs: lean_halves(ADVERBS),
        verbs: lean_halves(VERBS),
        lean: config.lean,
    };
    let labels = [POSITIVE.to_string(), NEGATIVE.to_string()];
    let draw = |n: usize, rng: &mut ChaCha8Rng| {
        let examples = (0..n)
            .map(|_| {
                let class = rng.gen_range(0..2);
                let text = generator.sentence(rng, class);
                let gold = if rng.gen_bool(config.label_noise) {
                    1 - class
                } else {
                    class
                };
                LabeledExample::single(text, labels[gold].clone())
            })
            .collect();
        Dataset::new(examples, labels.to_vec(), TaskKind::SingleText)
            .expect("labels are consistent")
    };
    let train = draw(config.n_train, &mut rng);
    let test = draw(config.n_test, &mut rng);
    SyntheticCorpus {
        train,
        test,
        vectors: word_vectors(&mut rng),
        lexicon: lexicon(),
    }
}

pub fn lexicon() -> Vec<(String, PosTag)> {
    let mut entries: Vec<(String, PosTag)> = Vec::new();
    for (words, tag) in [
        (POSITIVE_WORDS, PosTag::Adj),
        (NEGATIVE_WORDS, PosTag::Adj),
        (ADJECTIVES, PosTag::Adj),
        (NOUNS, PosTag::Noun),
        (ADVERBS, PosTag::Adv),
        (VERBS, PosTag::Verb),
    ] {
        entries.extend(words.iter().map(|w| (w.to_string(), tag)));
    }
    entries.extend(FUNCTION_WORDS.iter().map(|(w, t)| (w.to_string(), *t)));
    entries
}

const VECTOR_DIM: usize = 12;
const POLARITY_DIM: usize = 6;
const POLARITY: f64 = 6.0;
const NOISE: f64 = 0.35;

fn base_dim(tag: PosTag) -> usize {
    match tag {
        PosTag::Noun => 0,
        PosTag::Adj => 1,
        PosTag::Adv => 2,
        PosTag::Verb => 3,
        PosTag::Dt | PosTag::Pron => 4,
        _ => 5,
    }
}

/// One-hot POS base, polarity on a dedicated axis for sentiment words, and
/// small uniform noise elsewhere.
fn word_vectors(rng: &mut ChaCha8Rng) -> WordVectors {
    let mut vectors = WordVectors::new(VECTOR_DIM);
    for (word, tag) in lexicon() {
        let mut v = vec![0.0; VECTOR_DIM];
        v[base_dim(tag)] = 1.0;
        if POSITIVE_WORDS.contains(&word.as_str()) {
            v[POLARITY_DIM] = POLARITY;
        } else if NEGATIVE_WORDS.contains(&word.as_str()) {
            v[POLARITY_DIM] = -POLARITY;
        }
        for x in &mut v[POLARITY_DIM + 1..] {
            *x = rng.gen_range(-NOISE..NOISE);
        }
        vectors.insert(word, v).expect("dimension matches");
    }
    vectors
}
