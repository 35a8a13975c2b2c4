use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, PosTagger};
use crate::text::TokenizedText;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Adv,
    Dt,
    Pron,
    Prep,
    Num,
    Punct,
    Other,
}

impl PosTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Adv => "ADV",
            PosTag::Dt => "DT",
            PosTag::Pron => "PRON",
            PosTag::Prep => "PREP",
            PosTag::Num => "NUM",
            PosTag::Punct => "PUNCT",
            PosTag::Other => "OTHER",
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PosTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "NOUN" => PosTag::Noun,
            "VERB" => PosTag::Verb,
            "ADJ" => PosTag::Adj,
            "ADV" => PosTag::Adv,
            "DT" => PosTag::Dt,
            "PRON" => PosTag::Pron,
            "PREP" => PosTag::Prep,
            "NUM" => PosTag::Num,
            "PUNCT" => PosTag::Punct,
            "OTHER" => PosTag::Other,
            other => return Err(format!("unknown POS tag {other:?}")),
        })
    }
}

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "that", "these", "those", "every", "each", "some", "any", "no",
    "all", "both", "either", "neither", "another", "such",
];
const PRONOUNS: &[&str] = &[
    "i",
    "you",
    "he",
    "she",
    "it",
    "we",
    "they",
    "me",
    "him",
    "her",
    "us",
    "them",
    "my",
    "your",
    "his",
    "its",
    "our",
    "their",
    "mine",
    "yours",
    "ours",
    "theirs",
    "myself",
    "yourself",
    "itself",
    "themselves",
    "who",
    "whom",
    "what",
    "which",
    "someone",
    "something",
    "nothing",
    "everyone",
    "everything",
    "anyone",
    "anything",
];
const PREPOSITIONS: &[&str] = &[
    "of", "in", "on", "at", "to", "for", "with", "from", "by", "about", "into", "over", "after",
    "before", "under", "between", "through", "during", "without", "against", "among", "across",
    "behind", "beyond", "near", "since", "until", "upon", "within", "toward", "towards", "as",
    "like", "than", "despite",
];
const ADVERBS: &[&str] = &[
    "very", "too", "so", "quite", "rather", "just", "not", "never", "always", "often", "still",
    "already", "also", "even", "ever", "again", "here", "there", "now", "then", "soon", "once",
    "almost", "fast", "well", "much", "more", "most", "less", "least", "yet", "perhaps", "maybe",
    "somewhat", "pretty", "far",
];
const VERBS: &[&str] = &[
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "am",
    "being",
    "do",
    "does",
    "did",
    "have",
    "has",
    "had",
    "will",
    "would",
    "can",
    "could",
    "should",
    "may",
    "might",
    "must",
    "shall",
    "run",
    "runs",
    "ran",
    "go",
    "goes",
    "went",
    "gone",
    "get",
    "gets",
    "got",
    "make",
    "makes",
    "made",
    "see",
    "sees",
    "saw",
    "seen",
    "say",
    "says",
    "said",
    "take",
    "takes",
    "took",
    "come",
    "comes",
    "came",
    "know",
    "knows",
    "knew",
    "think",
    "thinks",
    "thought",
    "give",
    "gives",
    "gave",
    "find",
    "finds",
    "found",
    "tell",
    "told",
    "feel",
    "feels",
    "felt",
    "seem",
    "seems",
    "like",
    "likes",
    "love",
    "loves",
    "hate",
    "hates",
    "recommend",
    "recommends",
    "watch",
    "watched",
    "enjoy",
    "enjoys",
    "buy",
    "bought",
    "sell",
    "sold",
    "win",
    "wins",
    "won",
    "lose",
    "loses",
    "lost",
    "play",
    "plays",
    "become",
    "became",
    "keep",
    "kept",
    "leave",
    "left",
    "sleeps",
    "sleep",
    "rests",
    "rest",
    "sat",
    "sit",
    "stop",
    "stops",
];
const ADJECTIVES: &[&str] = &[
    "good",
    "bad",
    "great",
    "new",
    "old",
    "big",
    "small",
    "large",
    "little",
    "long",
    "short",
    "high",
    "low",
    "young",
    "best",
    "worst",
    "better",
    "worse",
    "fine",
    "nice",
    "poor",
    "rich",
    "red",
    "blue",
    "green",
    "black",
    "white",
    "happy",
    "sad",
    "funny",
    "awful",
    "terrible",
    "fantastic",
    "amazing",
    "boring",
    "dull",
    "bright",
    "dark",
    "hard",
    "easy",
    "strong",
    "weak",
    "real",
    "true",
    "false",
    "full",
    "empty",
    "fresh",
    "cheap",
    "clever",
    "slow",
    "quick",
    "top",
    "main",
    "whole",
    "free",
    "late",
    "early",
    "open",
    "clear",
    "simple",
    "smart",
    "wise",
    "brilliant",
    "superb",
    "excellent",
    "lovely",
    "bland",
    "messy",
    "thin",
    "flat",
    "wooden",
];
const NOUNS: &[&str] = &[
    "movie",
    "film",
    "plot",
    "story",
    "actor",
    "actress",
    "acting",
    "cast",
    "scene",
    "script",
    "ending",
    "music",
    "director",
    "car",
    "man",
    "woman",
    "person",
    "people",
    "time",
    "year",
    "day",
    "way",
    "thing",
    "world",
    "life",
    "hand",
    "part",
    "child",
    "eye",
    "place",
    "week",
    "case",
    "point",
    "company",
    "number",
    "group",
    "problem",
    "fact",
    "book",
    "food",
    "service",
    "restaurant",
    "hotel",
    "room",
    "staff",
    "price",
    "game",
    "team",
    "city",
    "york",
    "boston",
    "seattle",
    "news",
    "market",
    "government",
    "apple",
    "cat",
    "dog",
    "house",
    "water",
    "money",
    "job",
    "school",
    "question",
    "character",
    "characters",
    "dialogue",
    "soundtrack",
    "sequel",
];

const NOUN_SUFFIXES: &[&str] = &[
    "ness", "tion", "sion", "ment", "ity", "ship", "hood", "ism", "ist", "ance", "ence",
];
const ADV_SUFFIXES: &[&str] = &["ly"];
const ADJ_SUFFIXES: &[&str] = &[
    "ous", "ful", "ive", "able", "ible", "less", "ical", "ic", "ish", "al",
];
const VERB_SUFFIXES: &[&str] = &["ing", "ed", "ize", "ise", "ify"];

/// Lexicon lookup, then suffix heuristics, else [`PosTag::Other`].
#[derive(Debug, Clone)]
pub struct LexiconTagger {
    lexicon: HashMap<String, PosTag>,
}

impl Default for LexiconTagger {
    fn default() -> Self {
        let mut lexicon = HashMap::new();
        // later tables win for words listed twice ("like": VERB over PREP)
        for (words, tag) in [
            (PREPOSITIONS, PosTag::Prep),
            (DETERMINERS, PosTag::Dt),
            (PRONOUNS, PosTag::Pron),
            (ADVERBS, PosTag::Adv),
            (NOUNS, PosTag::Noun),
            (ADJECTIVES, PosTag::Adj),
            (VERBS, PosTag::Verb),
        ] {
            for w in words {
                lexicon.insert(w.to_string(), tag);
            }
        }
        Self { lexicon }
    }
}

impl LexiconTagger {
    /// The built-in lexicon extended (or overridden) by `entries`.
    pub fn with_entries<I, S>(entries: I) -> Self
    where
        I: IntoIterator<Item = (S, PosTag)>,
        S: Into<String>,
    {
        let mut tagger = Self::default();
        for (word, tag) in entries {
            tagger.lexicon.insert(word.into().to_lowercase(), tag);
        }
        tagger
    }

    pub fn tag_word(&self, surface: &str, is_punct: bool) -> PosTag {
        if is_punct {
            return PosTag::Punct;
        }
        let lower = surface.to_lowercase();
        if let Some(&tag) = self.lexicon.get(&lower) {
            return tag;
        }
        if is_number(&lower) {
            return PosTag::Num;
        }
        let has = |suffixes: &[&str]| {
            suffixes
                .iter()
                .any(|s| lower.len() > s.len() + 1 && lower.ends_with(s))
        };
        if has(NOUN_SUFFIXES) {
            PosTag::Noun
        } else if has(ADV_SUFFIXES) {
            PosTag::Adv
        } else if has(ADJ_SUFFIXES) {
            PosTag::Adj
        } else if has(VERB_SUFFIXES) {
            PosTag::Verb
        } else {
            PosTag::Other
        }
    }

    pub fn tags(&self, text: &TokenizedText) -> Vec<PosTag> {
        text.tokens()
            .iter()
            .map(|t| self.tag_word(t.surface(), t.is_punct()))
            .collect()
    }
}

/// Reads `word<TAB>TAG` lines. Blank lines and lines starting with `#` are
/// skipped.
pub fn load_lexicon(path: &Path) -> Result<Vec<(String, PosTag)>, ModelError> {
    let content = fs::read_to_string(path)
        .map_err(|e| ModelError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut entries = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |m: String| ModelError::Io(format!("{}:{}: {m}", path.display(), i + 1));
        let (word, tag) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected word<TAB>TAG".into()))?;
        entries.push((word.to_string(), tag.trim().parse().map_err(bad)?));
    }
    Ok(entries)
}

pub fn write_lexicon(entries: &[(String, PosTag)], path: &Path) -> Result<(), ModelError> {
    let body: String = entries.iter().map(|(w, t)| format!("{w}\t{t}\n")).collect();
    fs::write(path, body)
        .map_err(|e| ModelError::Io(format!("cannot write {}: {e}", path.display())))
}

fn is_number(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
        && word
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | ',' | '-'))
}

impl PosTagger for LexiconTagger {
    fn tag(&self, text: &TokenizedText) -> Result<Vec<PosTag>, ModelError> {
        Ok(self.tags(text))
    }
}
