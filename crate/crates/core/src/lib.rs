//! Mask-then-infill adversarial examples for text classifiers.
//!
//! A target text is masked at one position, a masked language model proposes
//! fills, and the fill that most lowers the victim's gold-label probability
//! is applied. Three edits are available: replace a token, insert a token,
//! and merge a noun-phrase bigram into one token. Edits are applied greedily
//! until the victim's prediction flips or the step limit is reached.

pub mod engine;
pub mod eval;
pub mod models;
pub mod perturb;
pub mod synthetic;
pub mod text;

pub use engine::{attack, attack_dataset, AttackConfig, AttackError, AttackResult};
pub use eval::{aggregate, modification_count, modification_rate, MetricsReport, SweepPoint};
pub use models::{reference_stack, ActionKind, ModelStack};
pub use perturb::{Action, Candidate, CandidateSet};
pub use text::{Dataset, LabeledExample, Token, TokenizedText};
