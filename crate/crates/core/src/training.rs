//! Joint adversarial objective, optimizers and the epoch loop.
//!
//! One optimizer minimises `task-CE + Σ adv-CEᵢ` over every parameter. The
//! gradient reversal in front of each discriminator turns that into the
//! min-max: discriminators improve, the encoder sees `-λᵢ` times their
//! gradient.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Result, VeilError};
use crate::eval::{discriminator_accuracy, task_metric};
use crate::models::{Instance, JointModel, Target, UNSEEN_TAG};
use crate::params::{Grads, ParamSet};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = VeilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(VeilError::Config(format!(
                "unknown optimizer `{other}` (adam|sgd)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Attribute → λ. Keys must equal the model's discriminator set.
    pub lambdas: BTreeMap<String, f64>,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
}

pub const DEFAULT_LAMBDA: f64 = 1e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambdas: BTreeMap::new(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            dropout: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_lambda(mut self, attribute: &str, lambda: f64) -> Self {
        self.lambdas.insert(attribute.to_string(), lambda);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (k, &l) in &self.lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(VeilError::Config(format!(
                    "lambda.{k} must be finite and >= 0, got {l}"
                )));
            }
        }
        if self.batch_size == 0 {
            return Err(VeilError::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(VeilError::Config("max_epochs must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(VeilError::Config(format!(
                "patience ({}) must not exceed max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(VeilError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(VeilError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(VeilError::Config(
                "beta1 and beta2 must lie in [0, 1)".into(),
            ));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(VeilError::Config("epsilon must be > 0".into()));
        }
        Ok(())
    }

    /// Checks that λ keys and the model's discriminators coincide.
    pub fn check_model(&self, model: &JointModel) -> Result<()> {
        for name in model.attribute_names() {
            if !self.lambdas.contains_key(name) {
                return Err(VeilError::Config(format!(
                    "attribute `{name}` has a discriminator but no lambda"
                )));
            }
        }
        for name in self.lambdas.keys() {
            if !model.discriminators.contains_key(name) {
                return Err(VeilError::Config(format!(
                    "lambda given for `{name}`, which has no discriminator"
                )));
            }
        }
        Ok(())
    }
}

/// Plain values of the objective's terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub task: f64,
    pub adversarial: BTreeMap<String, f64>,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.task + self.adversarial.values().sum::<f64>()
    }
}

/// Nodes of one instance's objective on a tape.
pub struct JointLoss {
    pub objective: Var,
    pub task: Var,
    pub adversarial: BTreeMap<String, Var>,
}

impl JointLoss {
    pub fn components(&self, tape: &Tape<'_>) -> LossComponents {
        LossComponents {
            task: tape.scalar(self.task),
            adversarial: self
                .adversarial
                .iter()
                .map(|(k, &v)| (k.clone(), tape.scalar(v)))
                .collect(),
        }
    }
}

/// Records `task-CE + Σᵢ CE(Dᵢ(GRL_λᵢ(h)), bᵢ)` for one instance. The
/// tagger's task term is the mean per-token CE; each adversarial term is
/// one sentence-level CE.
pub fn joint_loss(
    tape: &mut Tape<'_>,
    model: &JointModel,
    inst: &Instance,
    config: &TrainConfig,
    mode: Mode,
) -> Result<JointLoss> {
    config.check_model(model)?;
    let out = model.forward(tape, inst, mode, config.dropout)?;
    let task = match &inst.target {
        Target::Tags(tags) => {
            if tags.len() != out.logits.len() {
                return Err(VeilError::Data(format!(
                    "{} tags for {} tokens",
                    tags.len(),
                    out.logits.len()
                )));
            }
            let mut terms = Vec::with_capacity(tags.len());
            for (&l, &t) in out.logits.iter().zip(tags) {
                if t == UNSEEN_TAG {
                    return Err(VeilError::Data(
                        "training instance carries a tag outside the tagset".into(),
                    ));
                }
                terms.push(tape.softmax_cross_entropy(l, t)?);
            }
            let total = tape.sum_all(&terms)?;
            tape.scale(total, 1.0 / tags.len() as f64)
        }
        Target::Class(c) => tape.softmax_cross_entropy(out.logits[0], *c)?,
    };
    let mut adversarial = BTreeMap::new();
    let mut objective = task;
    for (name, head) in &model.discriminators {
        let b = *inst.attributes.get(name).ok_or_else(|| {
            VeilError::Data(format!("instance lacks a label for attribute `{name}`"))
        })?;
        let reversed = tape.grad_reverse(out.rep, config.lambdas[name])?;
        let logits = head.forward(tape, reversed)?;
        let ce = tape.softmax_cross_entropy(logits, b)?;
        objective = tape.add(objective, ce)?;
        adversarial.insert(name.clone(), ce);
    }
    Ok(JointLoss {
        objective,
        task,
        adversarial,
    })
}

/// Bias-corrected Adam on one tensor. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state over a whole [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: &TrainConfig, params: &ParamSet) -> Self {
        let moments = match config.optimizer {
            OptimizerKind::Adam => params
                .iter()
                .map(|(_, _, t)| (vec![0.0; t.len()], vec![0.0; t.len()]))
                .collect(),
            OptimizerKind::Sgd => Vec::new(),
        };
        Optimizer {
            kind: config.optimizer,
            lr: config.learning_rate,
            betas: (config.beta1, config.beta2),
            eps: config.epsilon,
            step: 0,
            moments,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter whose name passes `trainable`.
    pub fn update(
        &mut self,
        params: &mut ParamSet,
        grads: &Grads,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !trainable(params.name(id)) {
                continue;
            }
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    let (m, v) = &mut self.moments[id.index()];
                    adam_update(p, g, m, v, self.step, self.lr, self.betas, self.eps);
                }
                OptimizerKind::Sgd => {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= self.lr * d;
                    }
                }
            }
        }
    }
}

/// Summed loss values of one step (divide by `instances` for means).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub instances: usize,
    pub objective: f64,
    pub components: LossComponents,
}

/// Mean joint objective over `batch`, one backward, one update of the
/// parameters accepted by `trainable`. `grads` is zeroed on entry.
#[allow(clippy::too_many_arguments)]
pub fn train_step_filtered(
    model: &mut JointModel,
    batch: &[Instance],
    config: &TrainConfig,
    optimizer: &mut Optimizer,
    grads: &mut Grads,
    dropout_seed: u64,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(VeilError::Data("empty batch".into()));
    }
    grads.zero();
    let mut stats = StepStats {
        instances: batch.len(),
        ..StepStats::default()
    };
    {
        let mut tape = Tape::with_params(&model.params, dropout_seed);
        let mut objectives = Vec::with_capacity(batch.len());
        for inst in batch {
            let loss = joint_loss(&mut tape, model, inst, config, Mode::Train)?;
            let c = loss.components(&tape);
            stats.components.task += c.task;
            for (k, v) in c.adversarial {
                *stats.components.adversarial.entry(k).or_insert(0.0) += v;
            }
            stats.objective += tape.scalar(loss.objective);
            objectives.push(loss.objective);
        }
        if !stats.objective.is_finite() {
            return Err(VeilError::Numerical(format!(
                "non-finite training objective {}",
                stats.objective
            )));
        }
        let total = tape.sum_all(&objectives)?;
        let mean = tape.scale(total, 1.0 / batch.len() as f64);
        tape.backward_into(mean, grads)?;
    }
    optimizer.update(&mut model.params, grads, trainable);
    Ok(stats)
}

/// [`train_step_filtered`] over every parameter with a fresh gradient buffer.
pub fn train_step(
    model: &mut JointModel,
    batch: &[Instance],
    config: &TrainConfig,
    optimizer: &mut Optimizer,
    dropout_seed: u64,
) -> Result<StepStats> {
    let mut grads = model.params.zeros_like();
    train_step_filtered(
        model,
        batch,
        config,
        optimizer,
        &mut grads,
        dropout_seed,
        &|_| true,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-instance task CE over the epoch.
    pub task_loss: f64,
    /// Mean per-instance adversarial CE per attribute.
    pub adversarial_loss: BTreeMap<String, f64>,
    /// Dev accuracy (tagger) or macro-F1 (classifier), in percent.
    pub dev_metric: f64,
    /// Dev accuracy of each jointly trained discriminator, in percent.
    pub dev_discriminator_accuracy: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch of the returned snapshot.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
}

impl TrainHistory {
    /// One JSON object per epoch.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("history records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Epoch loop with a seeded shuffle (seed + epoch), dev evaluation after
/// every epoch and early stopping on the dev task metric. Returns the
/// best-dev snapshot.
pub fn train(
    mut model: JointModel,
    train_set: &[Instance],
    dev_set: &[Instance],
    config: &TrainConfig,
) -> Result<(JointModel, TrainHistory)> {
    config.validate()?;
    config.check_model(&model)?;
    if train_set.is_empty() {
        return Err(VeilError::Data("empty training set".into()));
    }
    if dev_set.is_empty() {
        return Err(VeilError::Data("empty dev set".into()));
    }
    let mut optimizer = Optimizer::new(config, &model.params);
    let mut grads = model.params.zeros_like();
    let mut history = TrainHistory {
        best_dev_metric: f64::NEG_INFINITY,
        ..TrainHistory::default()
    };
    let mut best = model.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
            config.seed.wrapping_add(epoch as u64),
            seed::ROLE_SHUFFLE,
            0,
        ));
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let dropout_seed = seed::derive(config.seed, seed::ROLE_DROPOUT, optimizer.steps());
            let stats = train_step_filtered(
                &mut model,
                &batch,
                config,
                &mut optimizer,
                &mut grads,
                dropout_seed,
                &|_| true,
            )?;
            sums.task += stats.components.task;
            for (k, v) in stats.components.adversarial {
                *sums.adversarial.entry(k).or_insert(0.0) += v;
            }
        }
        let n = train_set.len() as f64;
        let dev_metric = task_metric(&model, dev_set)?;
        let mut dev_disc = BTreeMap::new();
        for name in model.attribute_names() {
            dev_disc.insert(
                name.to_string(),
                discriminator_accuracy(&model, dev_set, name)?,
            );
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            task_loss: sums.task / n,
            adversarial_loss: sums
                .adversarial
                .into_iter()
                .map(|(k, v)| (k, v / n))
                .collect(),
            dev_metric,
            dev_discriminator_accuracy: dev_disc,
        });
        if dev_metric > history.best_dev_metric {
            history.best_dev_metric = dev_metric;
            history.best_epoch = epoch + 1;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok((best, history))
}
