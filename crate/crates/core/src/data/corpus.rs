//! Tagged-sentence and review corpora with protected-attribute labels.
//!
//! Tagging format (UTF-8): each sentence is an optional header line
//! `# key=value [key=value…]` followed by one `token<TAB>tag` line per token
//! and terminated by a blank line (or end of file). A `#` line containing a
//! tab is a token line, so hashtags survive.
//!
//! Review format: one JSON object per line with exactly the fields `text`,
//! `rating` (1–5), `sex`, `age` and `loc`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VeilError};

pub const SEX_VALUES: [&str; 2] = ["F", "M"];
pub const AGE_VALUES: [&str; 2] = ["O45", "U35"];
pub const LOC_VALUES: [&str; 5] = ["US", "UK", "Germany", "Denmark", "France"];

/// Declared attributes and their ordered value lists. A value's position is
/// its class index.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attrs: BTreeMap<String, Vec<String>>,
}

fn owned(values: &[&str]) -> Vec<String> {
    values.iter().map(|s| s.to_string()).collect()
}

impl AttributeSchema {
    pub fn new(attrs: BTreeMap<String, Vec<String>>) -> Self {
        AttributeSchema { attrs }
    }

    /// `sex ∈ {F, M}`, `age ∈ {O45, U35}`.
    pub fn tagging() -> Self {
        let mut attrs = BTreeMap::new();
        attrs.insert("sex".to_string(), owned(&SEX_VALUES));
        attrs.insert("age".to_string(), owned(&AGE_VALUES));
        AttributeSchema { attrs }
    }

    /// Tagging attributes plus the five location classes.
    pub fn review() -> Self {
        Self::review_with_locations(owned(&LOC_VALUES))
    }

    pub fn review_with_locations(locations: Vec<String>) -> Self {
        let mut s = Self::tagging();
        s.attrs.insert("loc".to_string(), locations);
        s
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attrs.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.attrs.contains_key(name)
    }

    pub fn values(&self, name: &str) -> Option<&[String]> {
        self.attrs.get(name).map(Vec::as_slice)
    }

    pub fn arity(&self, name: &str) -> Option<usize> {
        self.attrs.get(name).map(Vec::len)
    }

    pub fn index(&self, name: &str, value: &str) -> Option<usize> {
        self.attrs.get(name)?.iter().position(|v| v == value)
    }
}

/// Result of mapping a raw age field onto the two age bands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AgeBand {
    Band(&'static str),
    /// 35–45 inclusive, outside both bands.
    Excluded,
    Invalid,
}

/// Accepts the band labels or a raw age: `< 35 → U35`, `> 45 → O45`.
pub fn age_band(raw: &str) -> AgeBand {
    match raw {
        "O45" => return AgeBand::Band("O45"),
        "U35" => return AgeBand::Band("U35"),
        _ => {}
    }
    match raw.trim().parse::<f64>() {
        Ok(a) if a.is_finite() && a >= 0.0 => {
            if a < 35.0 {
                AgeBand::Band("U35")
            } else if a > 45.0 {
                AgeBand::Band("O45")
            } else {
                AgeBand::Excluded
            }
        }
        _ => AgeBand::Invalid,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub attributes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaggedCorpus {
    pub sentences: Vec<TaggedSentence>,
    /// Sorted, de-duplicated tags seen in the data.
    pub tagset: Vec<String>,
    pub provenance: String,
    /// Sentences skipped because a raw age fell between the two bands.
    pub dropped: usize,
}

impl TaggedCorpus {
    pub fn from_sentences(sentences: Vec<TaggedSentence>, provenance: impl Into<String>) -> Self {
        let mut tagset: Vec<String> = sentences
            .iter()
            .flat_map(|s| s.tags.iter().cloned())
            .collect();
        tagset.sort();
        tagset.dedup();
        TaggedCorpus {
            sentences,
            tagset,
            provenance: provenance.into(),
            dropped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> TaggedCorpus {
        let mut c = TaggedCorpus::from_sentences(
            indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            self.provenance.clone(),
        );
        c.tagset = self.tagset.clone();
        c
    }
}

fn read_utf8(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| VeilError::io(path, e))?;
    String::from_utf8(bytes).map_err(|e| VeilError::Parse {
        path: path.display().to_string(),
        line: 0,
        msg: format!("not valid UTF-8: {e}"),
    })
}

pub fn parse_tagging_corpus(path: &Path, schema: &AttributeSchema) -> Result<TaggedCorpus> {
    let text = read_utf8(path)?;
    parse_tagging_str(&text, &path.display().to_string(), schema)
}

pub fn parse_tagging_str(
    text: &str,
    provenance: &str,
    schema: &AttributeSchema,
) -> Result<TaggedCorpus> {
    let err = |line: usize, msg: String| VeilError::Parse {
        path: provenance.to_string(),
        line,
        msg,
    };
    let mut sentences = Vec::new();
    let mut dropped = 0;
    let mut header: Option<BTreeMap<String, String>> = None;
    let mut excluded = false;
    let mut tokens = Vec::new();
    let mut tags = Vec::new();
    let mut flush = |header: &mut Option<BTreeMap<String, String>>,
                     tokens: &mut Vec<String>,
                     tags: &mut Vec<String>,
                     excluded: &mut bool,
                     line: usize|
     -> Result<()> {
        if tokens.is_empty() {
            if header.is_some() {
                return Err(err(line, "header without tokens".into()));
            }
            return Ok(());
        }
        let attributes = header.take().unwrap_or_default();
        if std::mem::take(excluded) {
            dropped += 1;
            tokens.clear();
            tags.clear();
        } else {
            sentences.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(tags),
                attributes,
            });
        }
        Ok(())
    };
    let mut last_line = 0;
    for (n, raw) in text.lines().enumerate() {
        let lineno = n + 1;
        last_line = lineno;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            flush(&mut header, &mut tokens, &mut tags, &mut excluded, lineno)?;
            continue;
        }
        if let Some(rest) = line.strip_prefix('#').filter(|_| !line.contains('\t')) {
            if !tokens.is_empty() || header.is_some() {
                return Err(err(lineno, "header inside a sentence block".into()));
            }
            let mut attrs = BTreeMap::new();
            for pair in rest.split_whitespace() {
                let (k, v) = pair
                    .split_once('=')
                    .ok_or_else(|| err(lineno, format!("expected key=value, got `{pair}`")))?;
                if !schema.contains(k) {
                    return Err(err(lineno, format!("unknown attribute key `{k}`")));
                }
                let v = if k == "age" {
                    match age_band(v) {
                        AgeBand::Band(b) => b.to_string(),
                        AgeBand::Excluded => {
                            excluded = true;
                            v.to_string()
                        }
                        AgeBand::Invalid => return Err(err(lineno, format!("bad age `{v}`"))),
                    }
                } else {
                    v.to_string()
                };
                if (!excluded || k != "age") && schema.index(k, &v).is_none() {
                    return Err(err(lineno, format!("value `{v}` not declared for `{k}`")));
                }
                if attrs.insert(k.to_string(), v).is_some() {
                    return Err(err(lineno, format!("duplicate attribute key `{k}`")));
                }
            }
            header = Some(attrs);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.as_slice() {
            [tok, tag] if !tok.is_empty() && !tag.is_empty() => {
                tokens.push(tok.to_string());
                tags.push(tag.to_string());
            }
            _ => {
                return Err(err(
                    lineno,
                    format!("expected token<TAB>tag, got {} field(s)", fields.len()),
                ))
            }
        }
    }
    flush(
        &mut header,
        &mut tokens,
        &mut tags,
        &mut excluded,
        last_line + 1,
    )?;
    let mut corpus = TaggedCorpus::from_sentences(sentences, provenance);
    corpus.dropped = dropped;
    Ok(corpus)
}

pub fn write_tagging_str(corpus: &TaggedCorpus) -> String {
    let mut out = String::new();
    for s in &corpus.sentences {
        if !s.attributes.is_empty() {
            out.push('#');
            for (k, v) in &s.attributes {
                let _ = write!(out, " {k}={v}");
            }
            out.push('\n');
        }
        for (t, g) in s.tokens.iter().zip(&s.tags) {
            let _ = writeln!(out, "{t}\t{g}");
        }
        out.push('\n');
    }
    out
}

pub fn write_tagging_corpus(path: &Path, corpus: &TaggedCorpus) -> Result<()> {
    std::fs::write(path, write_tagging_str(corpus)).map_err(|e| VeilError::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Review {
    pub text: String,
    pub rating: u8,
    pub sex: String,
    pub age: String,
    pub loc: String,
}

impl Review {
    /// Zero-based class of the 1–5 star rating.
    pub fn rating_class(&self) -> usize {
        self.rating as usize - 1
    }

    pub fn attribute(&self, name: &str) -> Option<&str> {
        match name {
            "sex" => Some(&self.sex),
            "age" => Some(&self.age),
            "loc" => Some(&self.loc),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReviewCorpus {
    pub reviews: Vec<Review>,
    pub loc_classes: Vec<String>,
}

impl ReviewCorpus {
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }

    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema::review_with_locations(self.loc_classes.clone())
    }

    pub fn subset(&self, indices: &[usize]) -> ReviewCorpus {
        ReviewCorpus {
            reviews: indices.iter().map(|&i| self.reviews[i].clone()).collect(),
            loc_classes: self.loc_classes.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseSummary {
    pub accepted: usize,
    pub rejected: usize,
    /// `(line, reason)` for each rejected line.
    pub rejections: Vec<(usize, String)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawReview {
    text: String,
    rating: serde_json::Value,
    sex: String,
    age: serde_json::Value,
    loc: String,
}

fn validate_review(line: &str, schema: &AttributeSchema) -> std::result::Result<Review, String> {
    let raw: RawReview = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let rating = raw
        .rating
        .as_i64()
        .ok_or_else(|| format!("rating must be an integer, got {}", raw.rating))?;
    if !(1..=5).contains(&rating) {
        return Err(format!("rating {rating} outside 1-5"));
    }
    if schema.index("sex", &raw.sex).is_none() {
        return Err(format!("unknown sex `{}`", raw.sex));
    }
    let age_raw = match &raw.age {
        serde_json::Value::String(s) => s.clone(),
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(format!("bad age {other}")),
    };
    let age = match age_band(&age_raw) {
        AgeBand::Band(b) => b.to_string(),
        AgeBand::Excluded => return Err(format!("age {age_raw} between bands")),
        AgeBand::Invalid => return Err(format!("bad age `{age_raw}`")),
    };
    if schema.index("loc", &raw.loc).is_none() {
        return Err(format!("unknown loc `{}`", raw.loc));
    }
    Ok(Review {
        text: raw.text,
        rating: rating as u8,
        sex: raw.sex,
        age,
        loc: raw.loc,
    })
}

pub fn parse_review_str(text: &str, loc_classes: &[String]) -> (ReviewCorpus, ParseSummary) {
    let schema = AttributeSchema::review_with_locations(loc_classes.to_vec());
    let mut reviews = Vec::new();
    let mut summary = ParseSummary::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match validate_review(line, &schema) {
            Ok(r) => {
                reviews.push(r);
                summary.accepted += 1;
            }
            Err(reason) => {
                summary.rejected += 1;
                summary.rejections.push((n + 1, reason));
            }
        }
    }
    (
        ReviewCorpus {
            reviews,
            loc_classes: loc_classes.to_vec(),
        },
        summary,
    )
}

/// Reads a review file against the default five location classes.
pub fn parse_review_corpus(path: &Path) -> Result<(ReviewCorpus, ParseSummary)> {
    parse_review_corpus_with(path, &owned(&LOC_VALUES))
}

pub fn parse_review_corpus_with(
    path: &Path,
    loc_classes: &[String],
) -> Result<(ReviewCorpus, ParseSummary)> {
    let text = read_utf8(path)?;
    Ok(parse_review_str(&text, loc_classes))
}

pub fn write_review_str(corpus: &ReviewCorpus) -> String {
    let mut out = String::new();
    for r in &corpus.reviews {
        out.push_str(&serde_json::to_string(r).expect("review serializes"));
        out.push('\n');
    }
    out
}

pub fn write_review_corpus(path: &Path, corpus: &ReviewCorpus) -> Result<()> {
    std::fs::write(path, write_review_str(corpus)).map_err(|e| VeilError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_input_is_an_empty_corpus() {
        let c = parse_tagging_str("", "t", &AttributeSchema::tagging()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn one_sentence_with_header() {
        let c = parse_tagging_str(
            "# sex=F age=O45\nI\tPRON\nran\tVERB\n",
            "t",
            &AttributeSchema::tagging(),
        )
        .unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.sentences[0];
        assert_eq!(s.tokens, ["I", "ran"]);
        assert_eq!(s.attributes["sex"], "F");
        assert_eq!(s.attributes["age"], "O45");
        assert_eq!(c.tagset, ["PRON", "VERB"]);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let schema = AttributeSchema::tagging();
        let e = parse_tagging_str("# sex=F\na\tX\nb\n", "t", &schema).unwrap_err();
        assert!(e.to_string().contains("t:3"), "{e}");
        let e = parse_tagging_str("# colour=red\na\tX\n", "t", &schema).unwrap_err();
        assert!(e.to_string().contains("unknown attribute key"), "{e}");
        let e = parse_tagging_str("# sex=X\na\tX\n", "t", &schema).unwrap_err();
        assert!(e.to_string().contains("not declared"), "{e}");
        assert!(parse_tagging_str("a\tX\tY\n", "t", &schema).is_err());
        assert!(parse_tagging_str("# sex=F\n\n", "t", &schema).is_err());
    }

    #[test]
    fn raw_ages_are_banded_or_dropped() {
        let schema = AttributeSchema::tagging();
        let c = parse_tagging_str(
            "# age=50\na\tX\n\n# age=40\nb\tX\n\n# age=20\nc\tX\n",
            "t",
            &schema,
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.dropped, 1);
        assert_eq!(c.sentences[0].attributes["age"], "O45");
        assert_eq!(c.sentences[1].attributes["age"], "U35");
        assert_eq!(age_band("35"), AgeBand::Excluded);
        assert_eq!(age_band("45"), AgeBand::Excluded);
        assert_eq!(age_band("34.9"), AgeBand::Band("U35"));
        assert_eq!(age_band("old"), AgeBand::Invalid);
    }

    #[test]
    fn review_validation() {
        let locs = owned(&LOC_VALUES);
        let text = concat!(
            r#"{"text":"great","rating":5,"sex":"F","age":"U35","loc":"UK"}"#,
            "\n",
            r#"{"text":"meh","rating":3,"sex":"M","age":"O45"}"#,
            "\n",
            r#"{"text":"bad","rating":0,"sex":"M","age":"O45","loc":"US"}"#,
            "\n",
            r#"{"text":"x","rating":2,"sex":"M","age":"O45","loc":"US","extra":1}"#,
            "\n",
            r#"{"text":"old","rating":2,"sex":"M","age":60,"loc":"France"}"#,
            "\n",
            "not json\n",
        );
        let (c, s) = parse_review_str(text, &locs);
        assert_eq!(s.accepted, 2);
        assert_eq!(s.rejected, 4);
        assert_eq!(c.reviews[0].rating_class(), 4);
        assert_eq!(c.reviews[1].age, "O45");
        assert_eq!(s.rejections[0].0, 2);
    }

    fn arb_sentence() -> impl Strategy<Value = TaggedSentence> {
        (
            prop::collection::vec(("[a-z]{1,6}", "[A-Z]{1,4}"), 1..6),
            prop::option::of((0usize..2, 0usize..2)),
        )
            .prop_map(|(pairs, attrs)| {
                let mut attributes = BTreeMap::new();
                if let Some((s, a)) = attrs {
                    attributes.insert("sex".to_string(), SEX_VALUES[s].to_string());
                    attributes.insert("age".to_string(), AGE_VALUES[a].to_string());
                }
                TaggedSentence {
                    tokens: pairs.iter().map(|p| p.0.clone()).collect(),
                    tags: pairs.iter().map(|p| p.1.clone()).collect(),
                    attributes,
                }
            })
    }

    fn arb_review() -> impl Strategy<Value = Review> {
        ("[ -~]{0,30}", 1u8..=5, 0usize..2, 0usize..2, 0usize..5).prop_map(
            |(text, rating, s, a, l)| Review {
                text,
                rating,
                sex: SEX_VALUES[s].into(),
                age: AGE_VALUES[a].into(),
                loc: LOC_VALUES[l].into(),
            },
        )
    }

    proptest! {
        #[test]
        fn tagging_round_trip(sents in prop::collection::vec(arb_sentence(), 0..6)) {
            let corpus = TaggedCorpus::from_sentences(sents, "p");
            let text = write_tagging_str(&corpus);
            let back = parse_tagging_str(&text, "p", &AttributeSchema::tagging()).unwrap();
            prop_assert_eq!(back, corpus);
        }

        #[test]
        fn review_round_trip(reviews in prop::collection::vec(arb_review(), 0..8)) {
            let corpus = ReviewCorpus { reviews, loc_classes: owned(&LOC_VALUES) };
            let (back, summary) = parse_review_str(&write_review_str(&corpus), &corpus.loc_classes);
            prop_assert_eq!(summary.rejected, 0);
            prop_assert_eq!(back, corpus);
        }

        #[test]
        fn parsers_are_total(bytes in prop::collection::vec(any::<u8>(), 0..200)) {
            let text = String::from_utf8_lossy(&bytes);
            let _ = parse_tagging_str(&text, "fuzz", &AttributeSchema::tagging());
            let _ = parse_review_str(&text, &owned(&LOC_VALUES));
        }
    }
}
