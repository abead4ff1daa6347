//! Synthetic prompts, prompt-conditioned toy data and the quality oracle.

pub mod data;
pub mod oracle;
pub mod vocab;

pub use data::{dataset_csv, generate_dataset, PromptSample, ToyShape, ToyWorld};
pub use oracle::{Gmm, QualityMetric, QualityOracle, Realism, Scorer};
pub use vocab::{TokenKind, Vocabulary, CLASSES, MODIFIERS, TIERS};
