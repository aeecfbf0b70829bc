//! Corpus-level workflows shared by the CLI and the test suites: fit a model
//! on a corpus, evaluate it per group, attack its representations and run
//! k-fold cross-validation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::corpus::{
    parse_review_corpus, parse_tagging_corpus, AttributeSchema, ParseSummary, ReviewCorpus,
    TaggedCorpus,
};
use crate::data::encode::{build_review_vocab, build_tagging_vocab, encode_reviews, encode_tagged};
use crate::data::split::kfold_split;
use crate::data::vocab::Vocab;
use crate::error::{Result, VeilError};
use crate::eval::{
    attack, group_accuracy, tagging_accuracy, task_accuracy, task_metric, AttackerConfig,
    GroupReport, LeakageReport,
};
use crate::models::{Instance, JointModel, ModelSpec, TaskKind};
use crate::training::{train, TrainConfig, TrainHistory};

/// Default vocabulary frequency threshold.
pub const DEFAULT_MIN_COUNT: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Tagged(TaggedCorpus),
    Reviews(ReviewCorpus),
}

impl Corpus {
    /// Reads a tagging file (tagger) or a review file (sentiment). Rejected
    /// review lines are reported in the summary, not as an error.
    pub fn load(task: TaskKind, path: &Path) -> Result<(Corpus, Option<ParseSummary>)> {
        match task {
            TaskKind::Tagger => Ok((
                Corpus::Tagged(parse_tagging_corpus(path, &AttributeSchema::tagging())?),
                None,
            )),
            TaskKind::Sentiment => {
                let (c, summary) = parse_review_corpus(path)?;
                Ok((Corpus::Reviews(c), Some(summary)))
            }
        }
    }

    pub fn task(&self) -> TaskKind {
        match self {
            Corpus::Tagged(_) => TaskKind::Tagger,
            Corpus::Reviews(_) => TaskKind::Sentiment,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Tagged(c) => c.len(),
            Corpus::Reviews(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, indices: &[usize]) -> Corpus {
        match self {
            Corpus::Tagged(c) => Corpus::Tagged(c.subset(indices)),
            Corpus::Reviews(c) => Corpus::Reviews(c.subset(indices)),
        }
    }

    pub fn schema(&self) -> AttributeSchema {
        match self {
            Corpus::Tagged(_) => AttributeSchema::tagging(),
            Corpus::Reviews(c) => c.schema(),
        }
    }

    /// Tagset (tagger) or rating labels `1..=5` (classifier).
    pub fn labels(&self) -> Vec<String> {
        match self {
            Corpus::Tagged(c) => c.tagset.clone(),
            Corpus::Reviews(_) => (1..=5).map(|r| r.to_string()).collect(),
        }
    }

    pub fn build_vocab(&self, min_count: usize) -> Vocab {
        match self {
            Corpus::Tagged(c) => build_tagging_vocab(c, min_count),
            Corpus::Reviews(c) => build_review_vocab(c, min_count),
        }
    }
}

/// Layer sizes; the defaults are the full-size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden_total: usize,
    pub conv_widths: Vec<usize>,
    pub conv_maps: usize,
    pub disc_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        let s = ModelSpec::tagger(2, 1);
        ModelDims {
            embed_dim: s.embed_dim,
            hidden_total: s.hidden_total,
            conv_widths: s.conv_widths,
            conv_maps: s.conv_maps,
            disc_hidden: s.disc_hidden,
        }
    }
}

impl ModelDims {
    /// Model shape for `task` with one discriminator per λ key; arities come
    /// from `schema`.
    pub fn spec(
        &self,
        task: TaskKind,
        vocab_size: usize,
        n_outputs: usize,
        schema: &AttributeSchema,
        lambdas: &BTreeMap<String, f64>,
    ) -> Result<ModelSpec> {
        let mut spec = ModelSpec {
            task,
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_total: self.hidden_total,
            conv_widths: self.conv_widths.clone(),
            conv_maps: self.conv_maps,
            n_outputs,
            disc_hidden: self.disc_hidden,
            attributes: BTreeMap::new(),
        };
        for name in lambdas.keys() {
            let arity = schema.arity(name).ok_or_else(|| {
                VeilError::Config(format!(
                    "attribute `{name}` is not part of the {task} schema"
                ))
            })?;
            spec = spec.with_attribute(name, arity);
        }
        Ok(spec)
    }
}

/// Encodes `corpus` with the vocabulary and labels stored in a checkpoint.
pub fn encode(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<Vec<Instance>> {
    if corpus.task() != checkpoint.model.task() {
        return Err(VeilError::Config(format!(
            "a {} checkpoint cannot read {} data",
            checkpoint.model.task(),
            corpus.task()
        )));
    }
    match corpus {
        Corpus::Tagged(c) => {
            encode_tagged(c, &checkpoint.vocab, &checkpoint.labels, &checkpoint.schema)
        }
        Corpus::Reviews(c) => {
            encode_reviews(c, &checkpoint.vocab, checkpoint.model.spec.max_conv_width())
        }
    }
}

/// Builds the vocabulary on `train`, trains with one discriminator per λ
/// key and packs the best-dev snapshot into a checkpoint.
pub fn fit(
    train_corpus: &Corpus,
    dev_corpus: &Corpus,
    dims: &ModelDims,
    config: &TrainConfig,
    min_count: usize,
) -> Result<(Checkpoint, TrainHistory)> {
    if train_corpus.is_empty() {
        return Err(VeilError::Data("empty training corpus".into()));
    }
    if dev_corpus.task() != train_corpus.task() {
        return Err(VeilError::Config(
            "train and dev corpora are in different formats".into(),
        ));
    }
    config.validate()?;
    let task = train_corpus.task();
    let vocab = train_corpus.build_vocab(min_count);
    let labels = train_corpus.labels();
    let schema = train_corpus.schema();
    let spec = dims.spec(task, vocab.len(), labels.len(), &schema, &config.lambdas)?;
    let model = JointModel::new(spec, config.seed)?;
    let mut checkpoint = Checkpoint {
        model,
        config: config.clone(),
        vocab,
        labels,
        schema,
    };
    let train_set = encode(&checkpoint, train_corpus)?;
    let dev_set = encode(&checkpoint, dev_corpus)?;
    let (model, history) = train(checkpoint.model, &train_set, &dev_set, config)?;
    checkpoint.model = model;
    Ok((checkpoint, history))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub instances: usize,
    /// Token accuracy (tagger) or macro-F1 (classifier), in percent.
    pub task_metric: f64,
    /// Token accuracy (tagger) or instance accuracy (classifier).
    pub accuracy: f64,
    /// Share of sentences tagged entirely right; tagger only.
    pub sentence_accuracy: Option<f64>,
    /// One report per schema attribute, over instances that carry it.
    pub groups: Vec<GroupReport>,
}

pub fn evaluate(checkpoint: &Checkpoint, corpus: &Corpus) -> Result<EvalReport> {
    let instances = encode(checkpoint, corpus)?;
    if instances.is_empty() {
        return Err(VeilError::Data("empty evaluation corpus".into()));
    }
    let model = &checkpoint.model;
    let sentence_accuracy = match model.task() {
        TaskKind::Tagger => Some(tagging_accuracy(model, &instances)?.1),
        TaskKind::Sentiment => None,
    };
    let mut groups = Vec::new();
    for name in checkpoint.schema.names() {
        let labelled: Vec<Instance> = instances
            .iter()
            .filter(|i| i.attributes.contains_key(name))
            .cloned()
            .collect();
        if labelled.is_empty() {
            continue;
        }
        let values = checkpoint
            .schema
            .values(name)
            .expect("name comes from the schema");
        groups.push(group_accuracy(model, &labelled, name, values)?);
    }
    Ok(EvalReport {
        task: model.task(),
        instances: instances.len(),
        task_metric: task_metric(model, &instances)?,
        accuracy: task_accuracy(model, &instances)?,
        sentence_accuracy,
        groups,
    })
}

/// Fresh-attacker leakage of each attribute: probe fitted on `train`
/// representations, scored on `test`.
pub fn leakage(
    checkpoint: &Checkpoint,
    train_corpus: &Corpus,
    test_corpus: &Corpus,
    attributes: &[String],
    config: &AttackerConfig,
) -> Result<LeakageReport> {
    let train_set = encode(checkpoint, train_corpus)?;
    let test_set = encode(checkpoint, test_corpus)?;
    let mut out = Vec::with_capacity(attributes.len());
    for name in attributes {
        let arity = checkpoint.schema.arity(name).ok_or_else(|| {
            VeilError::Config(format!(
                "attribute `{name}` is not in the checkpoint schema"
            ))
        })?;
        let with_label = |xs: &[Instance]| {
            xs.iter()
                .filter(|i| i.attributes.contains_key(name))
                .cloned()
                .collect::<Vec<_>>()
        };
        out.push(attack(
            &checkpoint.model,
            &with_label(&train_set),
            &with_label(&test_set),
            name,
            arity,
            config,
        )?);
    }
    Ok(LeakageReport {
        task: checkpoint.model.task(),
        task_metric: task_metric(&checkpoint.model, &test_set)?,
        attributes: out,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub best_epoch: usize,
    pub eval: EvalReport,
    pub leakage: Option<LeakageReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub k: usize,
    pub folds: Vec<FoldReport>,
    pub mean_task_metric: f64,
    /// Per-group accuracy pooled over all test folds, with Δ.
    pub pooled_groups: Vec<GroupReport>,
    /// Mean fresh-attacker accuracy per attacked attribute.
    pub mean_attacker_accuracy: BTreeMap<String, f64>,
}

/// Runs [`fit`], [`evaluate`] and optionally [`leakage`] on every fold of a
/// seeded k-fold plan.
pub fn crossval(
    corpus: &Corpus,
    k: usize,
    dims: &ModelDims,
    config: &TrainConfig,
    min_count: usize,
    attack_attributes: &[String],
    attacker: &AttackerConfig,
) -> Result<CrossvalReport> {
    let plan = kfold_split(corpus.len(), k, config.seed)?;
    let mut folds = Vec::with_capacity(k);
    let mut pooled: BTreeMap<String, Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (f, fold) in plan.folds.iter().enumerate() {
        let (tr, dv, te) = (
            corpus.subset(&fold.train),
            corpus.subset(&fold.dev),
            corpus.subset(&fold.test),
        );
        let (checkpoint, history) = fit(&tr, &dv, dims, config, min_count)?;
        let eval = evaluate(&checkpoint, &te)?;
        for g in &eval.groups {
            let entry = pooled
                .entry(g.attribute.clone())
                .or_insert_with(|| vec![(0, 0, 0); g.groups.len()]);
            for (slot, stat) in entry.iter_mut().zip(&g.groups) {
                slot.0 += stat.correct;
                slot.1 += stat.units;
                slot.2 += stat.instances;
            }
        }
        let leakage = if attack_attributes.is_empty() {
            None
        } else {
            Some(leakage(&checkpoint, &tr, &te, attack_attributes, attacker)?)
        };
        folds.push(FoldReport {
            fold: f,
            train: tr.len(),
            dev: dv.len(),
            test: te.len(),
            best_epoch: history.best_epoch,
            eval,
            leakage,
        });
    }
    let schema = corpus.schema();
    let mut pooled_groups = Vec::new();
    for (name, counts) in pooled {
        let names = schema
            .values(&name)
            .expect("attribute comes from the schema");
        let outcomes: Vec<(usize, usize, usize)> = counts
            .iter()
            .enumerate()
            .map(|(g, &(h, t, _))| (g, h, t))
            .collect();
        let mut report = crate::eval::group_report(&name, names, &outcomes)?;
        for (stat, &(_, _, n)) in report.groups.iter_mut().zip(&counts) {
            stat.instances = n;
        }
        pooled_groups.push(report);
    }
    let mut mean_attacker_accuracy = BTreeMap::new();
    for name in attack_attributes {
        let accs: Vec<f64> = folds
            .iter()
            .filter_map(|f| f.leakage.as_ref())
            .flat_map(|l| {
                l.attributes
                    .iter()
                    .filter(|a| &a.attribute == name)
                    .map(|a| a.attacker_accuracy)
            })
            .collect();
        mean_attacker_accuracy.insert(name.clone(), accs.iter().sum::<f64>() / accs.len() as f64);
    }
    let mean_task_metric =
        folds.iter().map(|f| f.eval.task_metric).sum::<f64>() / folds.len() as f64;
    Ok(CrossvalReport {
        k,
        folds,
        mean_task_metric,
        pooled_groups,
        mean_attacker_accuracy,
    })
}
