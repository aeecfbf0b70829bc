//! Synthetic corpora with a controllable attribute/label confound.
//!
//! Generation of one instance:
//!
//! 1. The protected attribute `b` is uniform over `attribute_arity` values.
//! 2. The label group targeted by the confound is `b` in training data and
//!    `(b + 1) mod arity` in test data when `flip_out_of_domain` is set.
//!    With probability `confound_strength` the label `y` is drawn uniformly
//!    from the classes `c` with `c mod arity` equal to that group; otherwise
//!    `y` is uniform over all classes.
//! 3. Each of `length` positions independently holds
//!    - a task token (probability `task_rate`) from class `y`'s indicator
//!      set with probability `task_purity`, or from a uniformly random
//!      class's set otherwise,
//!    - a style token (probability `style_rate`) from `b`'s indicator set,
//!    - a noise token from the remaining vocabulary.
//!
//! Style tokens reveal `b`, and through the confound they carry label
//! information that reverses sign out of domain. Token strings are `w<id>`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::corpus::{
    Review, ReviewCorpus, TaggedCorpus, TaggedSentence, AGE_VALUES, LOC_VALUES, SEX_VALUES,
};
use crate::error::{Result, VeilError};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub confound_strength: f64,
    pub flip_out_of_domain: bool,
    pub task_classes: usize,
    pub attribute_arity: usize,
    pub seed: u64,
    pub length: usize,
    pub task_rate: f64,
    pub task_purity: f64,
    pub style_rate: f64,
    pub indicators_per_class: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_train: 2000,
            n_test: 1000,
            vocab_size: 200,
            confound_strength: 0.8,
            flip_out_of_domain: true,
            task_classes: 5,
            attribute_arity: 2,
            seed: 0,
            length: 12,
            task_rate: 0.2,
            task_purity: 0.5,
            style_rate: 0.2,
            indicators_per_class: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenKind {
    Task(usize),
    Style,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthRecord {
    pub tokens: Vec<String>,
    pub label: usize,
    pub attribute: usize,
    kinds: Vec<TokenKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub spec: SynthSpec,
    /// `(P(y mod A = b) − 1/A) · A/(A−1)`: +1 when the attribute names the
    /// label group exactly, 0 when independent, negative when reversed.
    pub train_association: f64,
    pub test_association: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<SynthRecord>,
    pub test: Vec<SynthRecord>,
    pub manifest: SynthManifest,
}

impl SynthSpec {
    fn task_tokens(&self) -> usize {
        self.task_classes * self.indicators_per_class
    }

    fn style_tokens(&self) -> usize {
        self.attribute_arity * self.indicators_per_class
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VeilError::Config(format!("synthetic spec: {m}")));
        if !(0.0..=1.0).contains(&self.confound_strength) {
            return bad(format!(
                "confound strength {} outside [0, 1]",
                self.confound_strength
            ));
        }
        if self.attribute_arity < 2 || self.task_classes < 2 {
            return bad("need at least two classes and two attribute values".into());
        }
        if self.task_classes < self.attribute_arity {
            return bad(format!(
                "{} classes cannot cover {} label groups",
                self.task_classes, self.attribute_arity
            ));
        }
        if self.indicators_per_class == 0 || self.length == 0 {
            return bad("indicators_per_class and length must be positive".into());
        }
        let need = self.task_tokens() + self.style_tokens() + 1;
        if self.vocab_size < need {
            return bad(format!(
                "vocabulary of {} cannot hold {need} indicator and noise tokens",
                self.vocab_size
            ));
        }
        for (name, p) in [
            ("task_rate", self.task_rate),
            ("task_purity", self.task_purity),
            ("style_rate", self.style_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.task_rate + self.style_rate > 1.0 {
            return bad("task_rate + style_rate exceeds 1".into());
        }
        Ok(())
    }

    fn record(&self, rng: &mut ChaCha8Rng, flipped: bool) -> SynthRecord {
        let arity = self.attribute_arity;
        let k = self.task_classes;
        let b = rng.gen_range(0..arity);
        let group = if flipped { (b + 1) % arity } else { b };
        let label = if rng.gen::<f64>() < self.confound_strength {
            let members: Vec<usize> = (0..k).filter(|c| c % arity == group).collect();
            members[rng.gen_range(0..members.len())]
        } else {
            rng.gen_range(0..k)
        };
        let m = self.indicators_per_class;
        let noise_start = self.task_tokens() + self.style_tokens();
        let mut tokens = Vec::with_capacity(self.length);
        let mut kinds = Vec::with_capacity(self.length);
        for _ in 0..self.length {
            let u = rng.gen::<f64>();
            let (id, kind) = if u < self.task_rate {
                let c = if rng.gen::<f64>() < self.task_purity {
                    label
                } else {
                    rng.gen_range(0..k)
                };
                (c * m + rng.gen_range(0..m), TokenKind::Task(c))
            } else if u < self.task_rate + self.style_rate {
                (
                    self.task_tokens() + b * m + rng.gen_range(0..m),
                    TokenKind::Style,
                )
            } else {
                (
                    rng.gen_range(noise_start..self.vocab_size),
                    TokenKind::Noise,
                )
            };
            tokens.push(format!("w{id}"));
            kinds.push(kind);
        }
        SynthRecord {
            tokens,
            label,
            attribute: b,
            kinds,
        }
    }
}

/// Signed association between the attribute and the label group.
pub fn label_attribute_association(records: &[SynthRecord], arity: usize) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| r.label % arity == r.attribute)
        .count();
    let p = hits as f64 / records.len() as f64;
    let chance = 1.0 / arity as f64;
    (p - chance) / (1.0 - chance)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, seed::ROLE_SYNTH, 0));
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, seed::ROLE_SYNTH, 1));
    let train: Vec<_> = (0..spec.n_train)
        .map(|_| spec.record(&mut train_rng, false))
        .collect();
    let test: Vec<_> = (0..spec.n_test)
        .map(|_| spec.record(&mut test_rng, spec.flip_out_of_domain))
        .collect();
    let manifest = SynthManifest {
        spec: spec.clone(),
        train_association: label_attribute_association(&train, spec.attribute_arity),
        test_association: label_attribute_association(&test, spec.attribute_arity),
    };
    Ok(SynthCorpus {
        train,
        test,
        manifest,
    })
}

/// Field that carries the synthetic attribute in the fixed-schema formats.
pub fn attribute_field(arity: usize) -> Result<&'static str> {
    match arity {
        2 => Ok("sex"),
        3..=5 => Ok("loc"),
        _ => Err(VeilError::Config(format!(
            "attribute arity {arity} does not fit the sex or loc field"
        ))),
    }
}

/// Review records: rating = label + 1, the attribute in `sex` (binary) or
/// `loc` (3–5 values); the remaining attributes are seeded noise.
pub fn to_review_corpus(
    records: &[SynthRecord],
    spec: &SynthSpec,
    split_index: u64,
) -> Result<ReviewCorpus> {
    if spec.task_classes > 5 {
        return Err(VeilError::Config(
            "review ratings allow at most 5 task classes".into(),
        ));
    }
    let field = attribute_field(spec.attribute_arity)?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, seed::ROLE_SYNTH, 10 + split_index));
    let reviews = records
        .iter()
        .map(|r| {
            let mut sex = SEX_VALUES[rng.gen_range(0..2)].to_string();
            let age = AGE_VALUES[rng.gen_range(0..2)].to_string();
            let mut loc = LOC_VALUES[rng.gen_range(0..5)].to_string();
            if field == "sex" {
                sex = SEX_VALUES[r.attribute].to_string();
            } else {
                loc = LOC_VALUES[r.attribute].to_string();
            }
            Review {
                text: r.tokens.join(" "),
                rating: (r.label + 1) as u8,
                sex,
                age,
                loc,
            }
        })
        .collect();
    Ok(ReviewCorpus {
        reviews,
        loc_classes: LOC_VALUES.iter().map(|s| s.to_string()).collect(),
    })
}

/// Tagging sentences: task tokens are tagged `T<class>`, style tokens `S`
/// and noise tokens `N<label>`, so noise tags need sentence context.
pub fn to_tagged_corpus(
    records: &[SynthRecord],
    spec: &SynthSpec,
    split_index: u64,
) -> Result<TaggedCorpus> {
    if spec.attribute_arity != 2 {
        return Err(VeilError::Config(
            "tagging format carries binary attributes only".into(),
        ));
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(spec.seed, seed::ROLE_SYNTH, 20 + split_index));
    let sentences = records
        .iter()
        .map(|r| {
            let tags = r
                .kinds
                .iter()
                .map(|k| match k {
                    TokenKind::Task(c) => format!("T{c}"),
                    TokenKind::Style => "S".to_string(),
                    TokenKind::Noise => format!("N{}", r.label),
                })
                .collect();
            let mut attributes = std::collections::BTreeMap::new();
            attributes.insert("sex".to_string(), SEX_VALUES[r.attribute].to_string());
            attributes.insert(
                "age".to_string(),
                AGE_VALUES[rng.gen_range(0..2)].to_string(),
            );
            TaggedSentence {
                tokens: r.tokens.clone(),
                tags,
                attributes,
            }
        })
        .collect();
    Ok(TaggedCorpus::from_sentences(
        sentences,
        format!("synthetic seed={}", spec.seed),
    ))
}
