//! End-to-end runs on synthetic confound corpora: a baseline, adversarial
//! models over a λ grid, dev-based λ selection, task accuracy in and out of
//! domain, and leakage measured by a fresh attacker.
//!
//! Leakage is probed on separate corpora drawn from the same generator with
//! the attribute independent of the label (`ρ = 0`). On confounded data any
//! accurate task representation reveals the attribute through the label
//! itself; the independent probe isolates what the representation encodes
//! about the attribute beyond that.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::encode::{build_review_vocab, encode_reviews};
use crate::data::synth::{attribute_field, generate_synthetic, to_review_corpus, SynthSpec};
use crate::data::vocab::Vocab;
use crate::error::{Result, VeilError};
use crate::eval::{attack, discriminator_accuracy, task_accuracy, AttackerConfig};
use crate::models::{Instance, JointModel, ModelSpec};
use crate::seed;
use crate::training::{train, TrainConfig, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticExperiment {
    pub synth: SynthSpec,
    /// Sizes of the independent (`ρ = 0`) attacker train and test corpora.
    pub probe_train: usize,
    pub probe_test: usize,
    /// In-domain test size (same generator, no flip).
    pub in_domain_test: usize,
    pub dev_fraction: f64,
    pub embed_dim: usize,
    pub conv_widths: Vec<usize>,
    pub conv_maps: usize,
    pub disc_hidden: usize,
    /// Training settings shared by all arms; λ comes from `lambdas`.
    pub train: TrainConfig,
    pub lambdas: Vec<f64>,
    /// λ selection keeps adversarial arms whose dev accuracy is within
    /// this many points of the baseline's and picks the largest λ.
    pub dev_tolerance: f64,
    pub attacker: AttackerConfig,
}

impl Default for SyntheticExperiment {
    fn default() -> Self {
        SyntheticExperiment {
            // longer texts with purer task cues: the baseline reliably
            // learns the style tokens while the task stays clean
            synth: SynthSpec {
                length: 20,
                task_rate: 0.25,
                task_purity: 0.9,
                ..SynthSpec::default()
            },
            probe_train: 2000,
            probe_test: 1000,
            in_domain_test: 1000,
            dev_fraction: 0.1,
            embed_dim: 16,
            conv_widths: vec![3, 4, 5],
            conv_maps: 16,
            disc_hidden: 32,
            train: TrainConfig {
                max_epochs: 15,
                patience: 3,
                ..TrainConfig::default()
            },
            lambdas: vec![1e-3, 1e-2, 1e-1],
            dev_tolerance: 3.0,
            attacker: AttackerConfig::default(),
        }
    }
}

/// Encoded splits of one synthetic experiment.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub in_domain_test: Vec<Instance>,
    pub out_of_domain_test: Vec<Instance>,
    pub probe_train: Vec<Instance>,
    pub probe_test: Vec<Instance>,
    pub attribute: &'static str,
    pub train_association: f64,
    pub test_association: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    /// `None` for the baseline.
    pub lambda: Option<f64>,
    pub dev_accuracy: f64,
    pub in_domain_accuracy: f64,
    pub out_of_domain_accuracy: f64,
    /// Fresh attacker on the independent probe corpora.
    pub attacker_accuracy: f64,
    pub majority_baseline: f64,
    /// Joint discriminator accuracy on the out-of-domain test set.
    pub discriminator_accuracy: Option<f64>,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub baseline: ArmResult,
    pub adversarial: Vec<ArmResult>,
    /// Index into `adversarial` chosen on dev.
    pub selected: usize,
}

impl ExperimentResult {
    pub fn selected_arm(&self) -> &ArmResult {
        &self.adversarial[self.selected]
    }
}

impl SyntheticExperiment {
    pub fn with_seed(mut self, seed_value: u64) -> Self {
        self.synth.seed = seed_value;
        self.train.seed = seed_value;
        self.attacker.seed = seed_value;
        self
    }

    fn model_spec(&self, vocab_size: usize, attribute: Option<&str>) -> ModelSpec {
        let spec = ModelSpec {
            embed_dim: self.embed_dim,
            conv_widths: self.conv_widths.clone(),
            conv_maps: self.conv_maps,
            disc_hidden: self.disc_hidden,
            n_outputs: self.synth.task_classes,
            ..ModelSpec::sentiment(vocab_size)
        };
        match attribute {
            Some(a) => spec.with_attribute(a, self.synth.attribute_arity),
            None => spec,
        }
    }

    /// Generates and encodes every split.
    pub fn prepare(&self) -> Result<SyntheticData> {
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(VeilError::Config(format!(
                "dev_fraction {} outside [0, 1)",
                self.dev_fraction
            )));
        }
        let spec = &self.synth;
        let attribute = attribute_field(spec.attribute_arity)?;
        let main = generate_synthetic(spec)?;
        let in_domain = generate_synthetic(&SynthSpec {
            n_train: 0,
            n_test: self.in_domain_test,
            flip_out_of_domain: false,
            seed: seed::derive(spec.seed, seed::ROLE_SYNTH, 101),
            ..spec.clone()
        })?;
        let probe_spec = SynthSpec {
            n_train: self.probe_train,
            n_test: self.probe_test,
            confound_strength: 0.0,
            flip_out_of_domain: false,
            seed: seed::derive(spec.seed, seed::ROLE_SYNTH, 102),
            ..spec.clone()
        };
        let probe = generate_synthetic(&probe_spec)?;

        let train_reviews = to_review_corpus(&main.train, spec, 0)?;
        let vocab = build_review_vocab(&train_reviews, 1);
        let width = self.conv_widths.iter().copied().max().unwrap_or(1);
        let encode = |records, split, s: &SynthSpec| -> Result<Vec<Instance>> {
            encode_reviews(&to_review_corpus(records, s, split)?, &vocab, width)
        };
        let mut all_train = encode_reviews(&train_reviews, &vocab, width)?;
        let mut order: Vec<usize> = (0..all_train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed::derive(
            spec.seed,
            seed::ROLE_SPLIT,
            1,
        )));
        let n_dev = ((all_train.len() as f64) * self.dev_fraction).round() as usize;
        let mut is_dev = vec![false; all_train.len()];
        for &i in &order[..n_dev.min(all_train.len())] {
            is_dev[i] = true;
        }
        let mut train_set = Vec::with_capacity(all_train.len() - n_dev);
        let mut dev = Vec::with_capacity(n_dev);
        for (i, inst) in all_train.drain(..).enumerate() {
            if is_dev[i] {
                dev.push(inst);
            } else {
                train_set.push(inst);
            }
        }
        Ok(SyntheticData {
            out_of_domain_test: encode(&main.test, 1, spec)?,
            in_domain_test: encode(&in_domain.test, 1, spec)?,
            probe_train: encode(&probe.train, 0, &probe_spec)?,
            probe_test: encode(&probe.test, 1, &probe_spec)?,
            train: train_set,
            dev,
            vocab,
            attribute,
            train_association: main.manifest.train_association,
            test_association: main.manifest.test_association,
        })
    }

    /// Trains and evaluates one arm; `lambda = None` is the baseline.
    pub fn run_arm(
        &self,
        data: &SyntheticData,
        lambda: Option<f64>,
    ) -> Result<(JointModel, ArmResult)> {
        let spec = self.model_spec(data.vocab.len(), lambda.map(|_| data.attribute));
        let model = JointModel::new(spec, self.train.seed)?;
        let mut cfg = TrainConfig {
            lambdas: Default::default(),
            ..self.train.clone()
        };
        if let Some(l) = lambda {
            cfg.lambdas.insert(data.attribute.to_string(), l);
        }
        let (model, history) = train(model, &data.train, &data.dev, &cfg)?;
        let leak = attack(
            &model,
            &data.probe_train,
            &data.probe_test,
            data.attribute,
            self.synth.attribute_arity,
            &self.attacker,
        )?;
        let discriminator_accuracy = match lambda {
            Some(_) => Some(discriminator_accuracy(
                &model,
                &data.out_of_domain_test,
                data.attribute,
            )?),
            None => None,
        };
        let result = ArmResult {
            lambda,
            dev_accuracy: task_accuracy(&model, &data.dev)?,
            in_domain_accuracy: task_accuracy(&model, &data.in_domain_test)?,
            out_of_domain_accuracy: task_accuracy(&model, &data.out_of_domain_test)?,
            attacker_accuracy: leak.attacker_accuracy,
            majority_baseline: leak.majority_baseline,
            discriminator_accuracy,
            history,
        };
        Ok((model, result))
    }

    /// Baseline plus one adversarial arm per λ, with dev-based selection.
    pub fn run(&self) -> Result<ExperimentResult> {
        if self.lambdas.is_empty() {
            return Err(VeilError::Config(
                "experiment needs at least one lambda".into(),
            ));
        }
        let data = self.prepare()?;
        let (_, baseline) = self.run_arm(&data, None)?;
        let adversarial = self
            .lambdas
            .iter()
            .map(|&l| self.run_arm(&data, Some(l)).map(|(_, r)| r))
            .collect::<Result<Vec<_>>>()?;
        let selected = select_lambda(&baseline, &adversarial, self.dev_tolerance);
        Ok(ExperimentResult {
            seed: self.synth.seed,
            baseline,
            adversarial,
            selected,
        })
    }
}

/// Largest λ whose dev accuracy stays within `tolerance` points of the
/// baseline; the best dev accuracy when none does.
pub fn select_lambda(baseline: &ArmResult, arms: &[ArmResult], tolerance: f64) -> usize {
    let ok = |a: &ArmResult| a.dev_accuracy >= baseline.dev_accuracy - tolerance;
    let by_lambda = |i: &usize| arms[*i].lambda.unwrap_or(0.0);
    let eligible: Vec<usize> = (0..arms.len()).filter(|&i| ok(&arms[i])).collect();
    if let Some(&i) = eligible
        .iter()
        .max_by(|a, b| by_lambda(a).total_cmp(&by_lambda(b)))
    {
        return i;
    }
    (0..arms.len())
        .max_by(|&a, &b| {
            arms[a]
                .dev_accuracy
                .total_cmp(&arms[b].dev_accuracy)
                .then(b.cmp(&a))
        })
        .unwrap_or(0)
}
