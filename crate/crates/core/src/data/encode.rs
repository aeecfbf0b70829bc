//! Corpus → model instances.

use std::collections::BTreeMap;

use crate::autodiff::PAD_ID;
use crate::data::corpus::{AttributeSchema, ReviewCorpus, TaggedCorpus};
use crate::data::text::tokenize;
use crate::data::vocab::Vocab;
use crate::error::{Result, VeilError};
use crate::models::{Instance, Target, UNSEEN_TAG};

/// Review texts longer than this are truncated before padding.
pub const MAX_REVIEW_TOKENS: usize = 256;

/// Builds a vocabulary over every token of a tagging corpus.
pub fn build_tagging_vocab(corpus: &TaggedCorpus, min_count: usize) -> Vocab {
    Vocab::from_tokens(
        corpus
            .sentences
            .iter()
            .flat_map(|s| s.tokens.iter().cloned()),
        min_count,
    )
}

/// Builds a vocabulary over the tokenized review texts.
pub fn build_review_vocab(corpus: &ReviewCorpus, min_count: usize) -> Vocab {
    Vocab::from_tokens(
        corpus.reviews.iter().flat_map(|r| tokenize(&r.text)),
        min_count,
    )
}

/// Maps tokens through `vocab` and tags through `tagset`; tags absent from
/// `tagset` become [`UNSEEN_TAG`].
pub fn encode_tagged(
    corpus: &TaggedCorpus,
    vocab: &Vocab,
    tagset: &[String],
    schema: &AttributeSchema,
) -> Result<Vec<Instance>> {
    let tag_ids: BTreeMap<&str, usize> = tagset
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();
    corpus
        .sentences
        .iter()
        .enumerate()
        .map(|(n, s)| {
            let tokens = s.tokens.iter().map(|t| vocab.id(t)).collect();
            let tags = s
                .tags
                .iter()
                .map(|t| tag_ids.get(t.as_str()).copied().unwrap_or(UNSEEN_TAG))
                .collect();
            let mut attributes = BTreeMap::new();
            for (k, v) in &s.attributes {
                let idx = schema.index(k, v).ok_or_else(|| {
                    VeilError::Data(format!(
                        "sentence {n}: `{k}={v}` is outside the attribute schema"
                    ))
                })?;
                attributes.insert(k.clone(), idx);
            }
            Ok(Instance {
                tokens,
                target: Target::Tags(tags),
                attributes,
            })
        })
        .collect()
}

/// Tokenizes, truncates to [`MAX_REVIEW_TOKENS`] and pads each side with
/// `max_width - 1` PAD ids (topped up so at least `max_width` ids remain).
pub fn encode_reviews(
    corpus: &ReviewCorpus,
    vocab: &Vocab,
    max_width: usize,
) -> Result<Vec<Instance>> {
    let schema = corpus.schema();
    corpus
        .reviews
        .iter()
        .enumerate()
        .map(|(n, r)| {
            let mut tokens = pad_ids(
                tokenize(&r.text)
                    .iter()
                    .take(MAX_REVIEW_TOKENS)
                    .map(|t| vocab.id(t))
                    .collect(),
                max_width,
            );
            tokens.shrink_to_fit();
            let mut attributes = BTreeMap::new();
            for name in ["sex", "age", "loc"] {
                let v = r.attribute(name).expect("review attributes are fixed");
                let idx = schema.index(name, v).ok_or_else(|| {
                    VeilError::Data(format!(
                        "review {n}: `{name}={v}` is outside the attribute schema"
                    ))
                })?;
                attributes.insert(name.to_string(), idx);
            }
            Ok(Instance {
                tokens,
                target: Target::Class(r.rating_class()),
                attributes,
            })
        })
        .collect()
}

/// Surrounds `ids` with `max_width - 1` PADs on each side.
pub fn pad_ids(ids: Vec<usize>, max_width: usize) -> Vec<usize> {
    let side = max_width.saturating_sub(1);
    let mut out = Vec::with_capacity(ids.len() + 2 * side + 1);
    out.extend(std::iter::repeat_n(PAD_ID, side));
    out.extend(ids);
    out.extend(std::iter::repeat_n(PAD_ID, side));
    while out.len() < max_width.max(1) {
        out.push(PAD_ID);
    }
    out
}
