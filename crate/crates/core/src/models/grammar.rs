use super::{GrammarChecker, ModelError};
use crate::text::{Token, TokenizedText};

/// Deterministic rule-based error counter.
///
/// Each of these adds one error per occurrence:
/// 1. the same word twice in a row, ignoring case ("the the");
/// 2. "a" before a vowel-initial word ("a apple");
/// 3. "an" before a consonant-initial word ("an movie");
/// 4. a sentence-final mark (`.`, `!`, `?`) that terminates nothing: it opens
///    the text, directly follows `,` `;` `:` or an opening bracket, or is
///    followed by a word starting with a lowercase letter.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleGrammarChecker;

fn is_final_mark(token: &Token) -> bool {
    matches!(token.surface(), "." | "!" | "?")
}

fn starts_with_vowel(word: &str) -> bool {
    word.chars()
        .next()
        .is_some_and(|c| "aeiouAEIOU".contains(c))
}

fn starts_with_consonant(word: &str) -> bool {
    word.chars()
        .next()
        .is_some_and(|c| c.is_alphabetic() && !"aeiouAEIOU".contains(c))
}

impl RuleGrammarChecker {
    pub fn count(&self, text: &TokenizedText) -> usize {
        let tokens = text.tokens();
        let mut errors = 0;
        for pair in tokens.windows(2) {
            let (cur, next) = (&pair[0], &pair[1]);
            if !cur.is_punct() && cur.surface().eq_ignore_ascii_case(next.surface()) {
                errors += 1;
            }
            if !next.is_punct() {
                match cur.surface().to_lowercase().as_str() {
                    "a" if starts_with_vowel(next.surface()) => errors += 1,
                    "an" if starts_with_consonant(next.surface()) => errors += 1,
                    _ => {}
                }
            }
            if is_final_mark(cur)
                && !next.is_punct()
                && next
                    .surface()
                    .chars()
                    .next()
                    .is_some_and(char::is_lowercase)
            {
                errors += 1;
            }
            if is_final_mark(next) && matches!(cur.surface(), "," | ";" | ":" | "(" | "[" | "{") {
                errors += 1;
            }
        }
        if tokens.first().is_some_and(is_final_mark) {
            errors += 1;
        }
        errors
    }
}

impl GrammarChecker for RuleGrammarChecker {
    fn count_errors(&self, text: &TokenizedText) -> Result<usize, ModelError> {
        Ok(self.count(text))
    }
}
