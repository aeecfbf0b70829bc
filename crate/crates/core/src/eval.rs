//! Task metrics, group gaps, majority baselines and the leakage attacker.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, softmax, Tape};
use crate::error::{Result, VeilError};
use crate::layers::FeedForwardHead;
use crate::models::{Instance, JointModel, Target, TaskKind};
use crate::params::ParamSet;
use crate::seed;
use crate::tensor::Tensor;
use crate::training::adam_update;

fn percent(hits: usize, total: usize) -> f64 {
    100.0 * hits as f64 / total as f64
}

/// Plain accuracy in percent.
pub fn accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(VeilError::Data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(VeilError::Data("accuracy of an empty set".into()));
    }
    Ok(percent(
        predictions.iter().zip(gold).filter(|(p, g)| p == g).count(),
        gold.len(),
    ))
}

/// Unweighted mean of per-class F1 over `0..n_classes`, in percent. A class
/// absent from both gold and predictions contributes F1 = 0.
pub fn macro_f1(predictions: &[usize], gold: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(VeilError::Data(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if n_classes == 0 {
        return Err(VeilError::Config(
            "macro-F1 needs at least one class".into(),
        ));
    }
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p >= n_classes || g >= n_classes {
            return Err(VeilError::Data(format!("label outside 0..{n_classes}")));
        }
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let sum: f64 = (0..n_classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(100.0 * sum / n_classes as f64)
}

/// Share of the most frequent label, in percent.
pub fn majority_baseline(labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(VeilError::Data(
            "majority baseline of an empty corpus".into(),
        ));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    Ok(percent(
        *counts.values().max().expect("non-empty"),
        labels.len(),
    ))
}

/// Attribute labels of every instance; errors on the first instance without one.
pub fn attribute_labels(instances: &[Instance], attribute: &str) -> Result<Vec<usize>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            inst.attributes.get(attribute).copied().ok_or_else(|| {
                VeilError::Data(format!("instance {i} lacks attribute `{attribute}`"))
            })
        })
        .collect()
}

/// Majority baseline of `attribute` over a set of instances.
pub fn attribute_majority(instances: &[Instance], attribute: &str) -> Result<f64> {
    majority_baseline(&attribute_labels(instances, attribute)?)
}

/// Correct and total counts of one instance's task prediction.
fn outcome(model: &JointModel, inst: &Instance) -> Result<(usize, usize)> {
    let pred = model.predict(inst)?;
    Ok(match &inst.target {
        Target::Tags(tags) => (
            pred.iter().zip(tags).filter(|(p, g)| p == g).count(),
            tags.len(),
        ),
        Target::Class(c) => (usize::from(pred[0] == *c), 1),
    })
}

/// Token-level accuracy and sentence-level (all tokens right) accuracy.
pub fn tagging_accuracy(model: &JointModel, instances: &[Instance]) -> Result<(f64, f64)> {
    if instances.is_empty() {
        return Err(VeilError::Data("accuracy of an empty set".into()));
    }
    let (mut hit, mut tot, mut whole) = (0, 0, 0);
    for inst in instances {
        let (h, t) = outcome(model, inst)?;
        hit += h;
        tot += t;
        whole += usize::from(h == t);
    }
    Ok((percent(hit, tot), percent(whole, instances.len())))
}

/// Task predictions and gold for single-label instances.
pub fn classify(model: &JointModel, instances: &[Instance]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut preds = Vec::with_capacity(instances.len());
    let mut gold = Vec::with_capacity(instances.len());
    for inst in instances {
        let Target::Class(c) = inst.target else {
            return Err(VeilError::Data("expected a class target".into()));
        };
        preds.push(model.predict(inst)?[0]);
        gold.push(c);
    }
    Ok((preds, gold))
}

/// Model-selection metric: token accuracy (tagger) or macro-F1 (classifier).
pub fn task_metric(model: &JointModel, instances: &[Instance]) -> Result<f64> {
    match model.task() {
        TaskKind::Tagger => Ok(tagging_accuracy(model, instances)?.0),
        TaskKind::Sentiment => {
            let (p, g) = classify(model, instances)?;
            macro_f1(&p, &g, model.spec.n_outputs)
        }
    }
}

/// Token accuracy (tagger) or instance accuracy (classifier).
pub fn task_accuracy(model: &JointModel, instances: &[Instance]) -> Result<f64> {
    match model.task() {
        TaskKind::Tagger => Ok(tagging_accuracy(model, instances)?.0),
        TaskKind::Sentiment => {
            let (p, g) = classify(model, instances)?;
            accuracy(&p, &g)
        }
    }
}

/// Accuracy of the jointly trained discriminator for `attribute`.
pub fn discriminator_accuracy(
    model: &JointModel,
    instances: &[Instance],
    attribute: &str,
) -> Result<f64> {
    let gold = attribute_labels(instances, attribute)?;
    let preds = instances
        .iter()
        .map(|inst| model.predict_attribute(inst, attribute))
        .collect::<Result<Vec<_>>>()?;
    accuracy(&preds, &gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub group: String,
    /// `None` when the group has no instances.
    pub accuracy: Option<f64>,
    pub instances: usize,
    /// Scored units (tokens or instances) and how many were right.
    pub units: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub attribute: String,
    pub groups: Vec<GroupStat>,
    /// `max - min` over populated groups; `|acc₁ - acc₂|` for binary attributes.
    pub delta: f64,
}

/// Δ between two group accuracies.
pub fn delta(a: f64, b: f64) -> f64 {
    (a - b).abs()
}

/// Builds a report from per-instance `(group, correct, total)` outcomes.
pub fn group_report(
    attribute: &str,
    group_names: &[String],
    outcomes: &[(usize, usize, usize)],
) -> Result<GroupReport> {
    let mut hits = vec![0usize; group_names.len()];
    let mut units = vec![0usize; group_names.len()];
    let mut counts = vec![0usize; group_names.len()];
    for &(g, h, t) in outcomes {
        if g >= group_names.len() {
            return Err(VeilError::Data(format!(
                "group {g} outside the {} declared for `{attribute}`",
                group_names.len()
            )));
        }
        hits[g] += h;
        units[g] += t;
        counts[g] += 1;
    }
    let groups: Vec<GroupStat> = group_names
        .iter()
        .enumerate()
        .map(|(g, name)| GroupStat {
            group: name.clone(),
            accuracy: (units[g] > 0).then(|| percent(hits[g], units[g])),
            instances: counts[g],
            units: units[g],
            correct: hits[g],
        })
        .collect();
    let accs: Vec<f64> = groups.iter().filter_map(|g| g.accuracy).collect();
    let delta = match accs.as_slice() {
        [] | [_] => 0.0,
        [a, b] => delta(*a, *b),
        many => {
            let hi = many.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = many.iter().cloned().fold(f64::INFINITY, f64::min);
            hi - lo
        }
    };
    Ok(GroupReport {
        attribute: attribute.to_string(),
        groups,
        delta,
    })
}

/// Per-group task accuracy (token-level for the tagger) and Δ.
pub fn group_accuracy(
    model: &JointModel,
    instances: &[Instance],
    attribute: &str,
    group_names: &[String],
) -> Result<GroupReport> {
    let labels = attribute_labels(instances, attribute)?;
    let outcomes = instances
        .iter()
        .zip(labels)
        .map(|(inst, g)| outcome(model, inst).map(|(h, t)| (g, h, t)))
        .collect::<Result<Vec<_>>>()?;
    group_report(attribute, group_names, &outcomes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerConfig {
    /// Hidden width of the probe; 0 takes the model's discriminator width.
    pub hidden: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the attacker's training data held in for early stopping.
    pub held_in: f64,
    /// Z-score features with attacker-train statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            hidden: 0,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            held_in: 0.1,
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeLeakage {
    pub attribute: String,
    /// Test accuracy of the discriminator trained jointly with the model.
    pub discriminator_accuracy: Option<f64>,
    /// Test accuracy of a probe trained post hoc on frozen representations.
    pub attacker_accuracy: f64,
    pub majority_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub task: TaskKind,
    /// Test accuracy (tagger) or macro-F1 (classifier), in percent.
    pub task_metric: f64,
    pub attributes: Vec<AttributeLeakage>,
}

/// Trains a fresh one-hidden-layer probe on `train` representations and
/// reports its accuracy on `test`, in percent. The epoch with the best
/// held-in accuracy (then held-in loss) is kept.
pub fn probe_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
    arity: usize,
    config: &AttackerConfig,
) -> Result<f64> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(VeilError::Data(
            "representation and label counts differ".into(),
        ));
    }
    if train_x.len() < 2 || test_x.is_empty() {
        return Err(VeilError::Data(
            "attacker needs at least two training and one test instance".into(),
        ));
    }
    if train_y.iter().all(|&y| y == train_y[0]) {
        return Err(VeilError::Data(
            "attacker training labels contain a single class".into(),
        ));
    }
    if train_y.iter().chain(test_y).any(|&y| y >= arity) {
        return Err(VeilError::Data(format!(
            "attribute label outside 0..{arity}"
        )));
    }
    if config.hidden == 0
        || config.batch_size == 0
        || config.max_epochs == 0
        || !(0.0..1.0).contains(&config.held_in)
    {
        return Err(VeilError::Config(
            "attacker needs hidden, batch_size and max_epochs >= 1 and held_in in [0, 1)".into(),
        ));
    }
    let dim = train_x[0].len();
    if train_x.iter().chain(test_x).any(|x| x.len() != dim) || dim == 0 {
        return Err(VeilError::dim("attack", "representations differ in width"));
    }

    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..dim)
        .map(|j| train_x.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let std: Vec<f64> = (0..dim)
        .map(|j| {
            (train_x
                .iter()
                .map(|x| (x[j] - mean[j]).powi(2))
                .sum::<f64>()
                / n)
                .sqrt()
        })
        .collect();
    let norm = |x: &Vec<f64>| -> Vec<f64> {
        x.iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| {
                if !config.standardize {
                    *v
                } else if *s > 1e-12 {
                    (v - m) / s
                } else {
                    0.0
                }
            })
            .collect()
    };
    let train_n: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
    let test_n: Vec<Vec<f64>> = test_x.iter().map(norm).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, seed::ROLE_ATTACKER, 0));
    let mut order: Vec<usize> = (0..train_n.len()).collect();
    order.shuffle(&mut rng);
    let n_held = ((train_n.len() as f64 * config.held_in).round() as usize).min(train_n.len() - 1);
    let (held, fit) = order.split_at(n_held);
    let (held, mut fit) = (held.to_vec(), fit.to_vec());

    let mut params = ParamSet::new();
    let head = FeedForwardHead::new(&mut params, "probe", dim, config.hidden, arity, &mut rng)?;
    let mut moments: Vec<(Vec<f64>, Vec<f64>)> = params
        .iter()
        .map(|(_, _, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
        .collect();
    let mut grads = params.zeros_like();
    let mut step = 0u64;

    let batch_matrix = |rows: &[usize], xs: &[Vec<f64>]| -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            data.extend_from_slice(&xs[r]);
        }
        Tensor::matrix(rows.len(), dim, data)
    };
    // predictions and summed cross-entropy over `rows`
    let evaluate = |params: &ParamSet,
                    xs: &[Vec<f64>],
                    ys: Option<&[usize]>,
                    rows: &[usize]|
     -> Result<(Vec<usize>, f64)> {
        let mut out = Vec::with_capacity(rows.len());
        let mut ce = 0.0;
        for chunk in rows.chunks(256) {
            let mut tape = Tape::with_params(params, 0);
            let x = tape.leaf(batch_matrix(chunk, xs)?);
            let logits = head.forward(&mut tape, x)?;
            let v = tape.value(logits);
            for (i, &r) in chunk.iter().enumerate() {
                let row = v.row_slice(i);
                out.push(argmax(row));
                if let Some(ys) = ys {
                    ce -= softmax(row)[ys[r]].max(f64::MIN_POSITIVE).ln();
                }
            }
        }
        Ok((out, ce))
    };
    // held-in accuracy first, held-in loss to break ties
    let held_score = |params: &ParamSet| -> Result<(f64, f64)> {
        if held.is_empty() {
            return Ok((0.0, 0.0));
        }
        let (p, ce) = evaluate(params, &train_n, Some(train_y), &held)?;
        let g: Vec<usize> = held.iter().map(|&i| train_y[i]).collect();
        Ok((accuracy(&p, &g)?, ce))
    };

    let mut best = params.clone();
    let mut best_score = held_score(&params)?;
    let mut since_best = 0;
    for _ in 0..config.max_epochs {
        fit.shuffle(&mut rng);
        for chunk in fit.chunks(config.batch_size) {
            grads.zero();
            {
                let mut tape = Tape::with_params(&params, 0);
                let x = tape.leaf(batch_matrix(chunk, &train_n)?);
                let logits = head.forward(&mut tape, x)?;
                let mut terms = Vec::with_capacity(chunk.len());
                for (r, &i) in chunk.iter().enumerate() {
                    let row = tape.row(logits, r)?;
                    terms.push(tape.softmax_cross_entropy(row, train_y[i])?);
                }
                let total = tape.sum_all(&terms)?;
                let mean = tape.scale(total, 1.0 / chunk.len() as f64);
                tape.backward_into(mean, &mut grads)?;
            }
            step += 1;
            let ids: Vec<_> = params.ids().collect();
            for id in ids {
                let (m, v) = &mut moments[id.index()];
                adam_update(
                    params.get_mut(id).data_mut(),
                    grads.get(id).data(),
                    m,
                    v,
                    step,
                    config.learning_rate,
                    (0.9, 0.999),
                    1e-8,
                );
            }
        }
        if held.is_empty() {
            best = params.clone();
            continue;
        }
        let score = held_score(&params)?;
        if score.0 > best_score.0 || (score.0 == best_score.0 && score.1 < best_score.1) {
            best_score = score;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    let rows: Vec<usize> = (0..test_n.len()).collect();
    let (preds, _) = evaluate(&best, &test_n, None, &rows)?;
    accuracy(&preds, test_y)
}

/// Leakage of `attribute` from a frozen model: fresh-probe test accuracy,
/// the joint discriminator's test accuracy when the model has one, and the
/// test majority baseline. The model is only read.
pub fn attack(
    model: &JointModel,
    train: &[Instance],
    test: &[Instance],
    attribute: &str,
    arity: usize,
    config: &AttackerConfig,
) -> Result<AttributeLeakage> {
    let train_y = attribute_labels(train, attribute)?;
    let test_y = attribute_labels(test, attribute)?;
    let reps = |xs: &[Instance]| {
        xs.iter()
            .map(|i| model.extract_representation(i))
            .collect::<Result<Vec<_>>>()
    };
    let train_x = reps(train)?;
    let test_x = reps(test)?;
    let cfg = AttackerConfig {
        hidden: if config.hidden == 0 {
            model.spec.disc_hidden.max(1)
        } else {
            config.hidden
        },
        ..config.clone()
    };
    let attacker_accuracy = probe_accuracy(&train_x, &train_y, &test_x, &test_y, arity, &cfg)?;
    let discriminator_accuracy = if model.discriminators.contains_key(attribute) {
        Some(discriminator_accuracy(model, test, attribute)?)
    } else {
        None
    };
    Ok(AttributeLeakage {
        attribute: attribute.to_string(),
        discriminator_accuracy,
        attacker_accuracy,
        majority_baseline: majority_baseline(&test_y)?,
    })
}
