mod common;

use std::collections::BTreeMap;

use common::*;
use rand::Rng;
use veil::autodiff::{Mode, Tape};
use veil::eval::{discriminator_accuracy, task_accuracy};
use veil::experiment::SyntheticExperiment;
use veil::models::{Instance, JointModel, ModelSpec, Target};
use veil::training::{
    joint_loss, train, train_step, train_step_filtered, Optimizer, OptimizerKind, TrainConfig,
};
use veil::VeilError;

#[test]
fn zero_lambda_training_matches_a_model_without_discriminators() {
    for seed in 0..3 {
        assert!(zero_lambda_matches_plain(seed, 5), "seed {seed}");
    }
}

#[test]
fn zero_lambda_discriminators_still_learn() {
    let mut r = rng(10);
    let batch: Vec<Instance> = (0..4).map(|_| random_tagged(&mut r, 3, 4)).collect();
    let mut model = JointModel::new(tiny_tagger_spec(), 3).unwrap();
    let cfg = TrainConfig::default()
        .with_lambda("sex", 0.0)
        .with_lambda("age", 0.0);
    let mut opt = Optimizer::new(&cfg, &model.params);
    let before = model.params.by_name("disc.sex.w1").unwrap().clone();
    train_step(&mut model, &batch, &cfg, &mut opt, 0).unwrap();
    assert_ne!(model.params.by_name("disc.sex.w1").unwrap(), &before);
}

fn discriminator_ce(model: &JointModel, batch: &[Instance], cfg: &TrainConfig) -> f64 {
    let mut tape = Tape::with_params(&model.params, 0);
    let mut total = 0.0;
    for inst in batch {
        let loss = joint_loss(&mut tape, model, inst, cfg, Mode::Eval).unwrap();
        total += loss.components(&tape).adversarial.values().sum::<f64>();
    }
    total
}

#[test]
fn frozen_encoder_moves_only_discriminators_and_does_not_raise_their_loss() {
    let mut r = rng(11);
    let batch: Vec<Instance> = (0..8)
        .map(|_| {
            let len = r.gen_range(1..6);
            random_tagged(&mut r, len, 4)
        })
        .collect();
    let mut model = JointModel::new(tiny_tagger_spec(), 5).unwrap();
    let cfg = TrainConfig {
        optimizer: OptimizerKind::Sgd,
        learning_rate: 1e-3,
        dropout: 0.0,
        ..TrainConfig::default()
    }
    .with_lambda("sex", 0.5)
    .with_lambda("age", 0.5);
    let encoder = encoder_values(&model);
    let mut opt = Optimizer::new(&cfg, &model.params);
    let mut grads = model.params.zeros_like();
    let mut last = discriminator_ce(&model, &batch, &cfg);
    let start = model.params.by_name("disc.age.w2").unwrap().clone();
    for step in 0..10 {
        train_step_filtered(
            &mut model,
            &batch,
            &cfg,
            &mut opt,
            &mut grads,
            step,
            &JointModel::is_discriminator_param,
        )
        .unwrap();
        let ce = discriminator_ce(&model, &batch, &cfg);
        assert!(ce <= last + 1e-12, "step {step}: {ce} > {last}");
        last = ce;
    }
    assert_eq!(encoder_values(&model), encoder);
    assert_ne!(model.params.by_name("disc.age.w2").unwrap(), &start);
}

fn separable(r: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<Instance> {
    // class c is signalled by token 2 + c among noise tokens 10..20
    (0..n)
        .map(|_| {
            let c = r.gen_range(0..3);
            let mut tokens = vec![0, 0];
            tokens.extend((0..4).map(|_| r.gen_range(10..TINY_VOCAB)));
            let at = r.gen_range(2..tokens.len());
            tokens.insert(at, 2 + c);
            tokens.extend([0, 0]);
            Instance {
                tokens,
                target: Target::Class(c),
                attributes: BTreeMap::new(),
            }
        })
        .collect()
}

fn small_classifier() -> ModelSpec {
    ModelSpec {
        embed_dim: 8,
        conv_widths: vec![1, 2, 3],
        conv_maps: 8,
        disc_hidden: 8,
        n_outputs: 3,
        ..ModelSpec::sentiment(TINY_VOCAB)
    }
}

#[test]
fn linearly_separable_task_is_learned_within_twenty_epochs() {
    let mut r = rng(12);
    let (train_set, dev) = (separable(&mut r, 120), separable(&mut r, 40));
    let cfg = TrainConfig {
        max_epochs: 20,
        patience: 20,
        learning_rate: 1e-2,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let (model, history) = train(
        JointModel::new(small_classifier(), 1).unwrap(),
        &train_set,
        &dev,
        &cfg,
    )
    .unwrap();
    assert_eq!(task_accuracy(&model, &dev).unwrap(), 100.0);
    assert_eq!(history.best_dev_metric, 100.0);
    assert!(history.epochs.len() <= 20);
}

#[test]
fn training_is_deterministic_and_single_epoch_returns_that_snapshot() {
    let mut r = rng(13);
    let (train_set, dev) = (separable(&mut r, 40), separable(&mut r, 10));
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 3,
        ..TrainConfig::default()
    };
    let run = || {
        train(
            JointModel::new(small_classifier(), 2).unwrap(),
            &train_set,
            &dev,
            &cfg,
        )
        .unwrap()
    };
    let (m1, h1) = run();
    let (m2, h2) = run();
    assert_eq!(h1, h2);
    assert_eq!(h1.to_jsonl(), h2.to_jsonl());
    assert_eq!(m1.params.fingerprint(), m2.params.fingerprint());

    let one = TrainConfig {
        max_epochs: 1,
        patience: 1,
        ..cfg.clone()
    };
    let (_, h) = train(
        JointModel::new(small_classifier(), 2).unwrap(),
        &train_set,
        &dev,
        &one,
    )
    .unwrap();
    assert_eq!(h.epochs.len(), 1);
    assert_eq!(h.best_epoch, 1);
}

#[test]
fn pad_embedding_row_stays_zero() {
    let mut r = rng(14);
    let (train_set, dev) = (separable(&mut r, 40), separable(&mut r, 10));
    let cfg = TrainConfig {
        max_epochs: 2,
        patience: 2,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let (model, _) = train(
        JointModel::new(small_classifier(), 3).unwrap(),
        &train_set,
        &dev,
        &cfg,
    )
    .unwrap();
    let emb = model.params.by_name("emb").unwrap();
    assert!(emb.data()[..emb.cols()].iter().all(|&v| v == 0.0));
    assert!(emb.data()[emb.cols()..].iter().any(|&v| v != 0.0));
}

#[test]
fn empty_training_set_is_rejected() {
    let mut r = rng(15);
    let dev = separable(&mut r, 5);
    let err = train(
        JointModel::new(small_classifier(), 0).unwrap(),
        &[],
        &dev,
        &TrainConfig::default(),
    )
    .unwrap_err();
    assert!(matches!(err, VeilError::Data(_)));
}

#[test]
fn adversary_lowers_discriminator_accuracy_on_synthetic_confound_data() {
    let exp = SyntheticExperiment::default();
    let data = exp.prepare().unwrap();
    let attr = data.attribute;
    let spec = ModelSpec {
        embed_dim: exp.embed_dim,
        conv_widths: exp.conv_widths.clone(),
        conv_maps: exp.conv_maps,
        disc_hidden: exp.disc_hidden,
        n_outputs: exp.synth.task_classes,
        ..ModelSpec::sentiment(data.vocab.len())
    }
    .with_attribute(attr, 2);
    let trajectory = |lambda: f64| {
        let cfg = TrainConfig::default().with_lambda(attr, lambda);
        let mut model = JointModel::new(spec.clone(), 0).unwrap();
        let mut opt = Optimizer::new(&cfg, &model.params);
        let mut points = Vec::new();
        for (step, batch) in data
            .train
            .chunks(cfg.batch_size)
            .cycle()
            .take(200)
            .enumerate()
        {
            train_step(&mut model, batch, &cfg, &mut opt, step as u64).unwrap();
            if (step + 1) % 50 == 0 {
                points.push(discriminator_accuracy(&model, &data.dev, attr).unwrap());
            }
        }
        points
    };
    let detached = trajectory(0.0);
    let adversarial = trajectory(0.1);
    let last = |v: &[f64]| v[v.len() - 1];
    assert!(
        last(&adversarial) < last(&detached),
        "adversarial {adversarial:?} vs detached {detached:?}"
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(
        mean(&adversarial) < mean(&detached),
        "adversarial {adversarial:?} vs detached {detached:?}"
    );
}
