//! Corpus formats, vocabulary, splits, and the synthetic confound generator.

pub mod corpus;
pub mod encode;
pub mod split;
pub mod synth;
pub mod text;
pub mod vocab;

pub use corpus::{
    parse_review_corpus, parse_tagging_corpus, AttributeSchema, ParseSummary, Review, ReviewCorpus,
    TaggedCorpus, TaggedSentence,
};
pub use split::{balance_subsample, kfold_split, Fold, SplitPlan};
pub use synth::{generate_synthetic, SynthCorpus, SynthSpec};
pub use vocab::Vocab;
