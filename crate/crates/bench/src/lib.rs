//! Fixtures shared by the benchmarks.

use maskfill::models::{reference_stack, LexiconTagger, DEFAULT_ALPHA, DEFAULT_DELTA};
use maskfill::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use maskfill::{Dataset, ModelStack};

pub struct Fixture {
    pub corpus: SyntheticCorpus,
    pub stack: ModelStack,
}

/// Synthetic corpus with the reference stack trained on it.
pub fn fixture(n_train: usize, n_test: usize) -> Fixture {
    let corpus = generate(&SyntheticConfig {
        n_train,
        n_test,
        ..SyntheticConfig::default()
    });
    let stack = reference_stack(
        &corpus.train,
        Some(corpus.vectors.clone()),
        LexiconTagger::with_entries(corpus.lexicon.clone()),
        DEFAULT_DELTA,
        DEFAULT_ALPHA,
    )
    .expect("synthetic corpus trains");
    Fixture { corpus, stack }
}

/// The first `n` test examples.
pub fn head(dataset: &Dataset, n: usize) -> Dataset {
    dataset.with_examples(dataset.examples.iter().take(n).cloned().collect())
}
