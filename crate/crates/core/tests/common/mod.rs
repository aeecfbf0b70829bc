#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use veil::autodiff::{Mode, Tape};
use veil::gradcheck::finite_difference_check_entries;
use veil::models::{Instance, JointModel, ModelSpec, Target};
use veil::tensor::Tensor;
use veil::training::{joint_loss, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, rand_vec(rng, rows * cols, scale)).unwrap()
}

pub const TINY_VOCAB: usize = 20;

pub fn tiny_tagger_spec() -> ModelSpec {
    ModelSpec {
        embed_dim: 5,
        hidden_total: 8,
        disc_hidden: 6,
        ..ModelSpec::tagger(TINY_VOCAB, 4)
    }
    .with_attribute("sex", 2)
    .with_attribute("age", 2)
}

pub fn tiny_sentiment_spec() -> ModelSpec {
    ModelSpec {
        embed_dim: 5,
        conv_widths: vec![1, 2],
        conv_maps: 4,
        disc_hidden: 6,
        ..ModelSpec::sentiment(TINY_VOCAB)
    }
    .with_attribute("sex", 2)
    .with_attribute("age", 2)
}

fn attributes(rng: &mut ChaCha8Rng) -> BTreeMap<String, usize> {
    [
        ("sex".to_string(), rng.gen_range(0..2)),
        ("age".to_string(), rng.gen_range(0..2)),
    ]
    .into()
}

/// A sentence of `len` non-PAD tokens with random tags.
pub fn random_tagged(rng: &mut ChaCha8Rng, len: usize, n_tags: usize) -> Instance {
    let tokens = (0..len).map(|_| rng.gen_range(2..TINY_VOCAB)).collect();
    let tags = (0..len).map(|_| rng.gen_range(0..n_tags)).collect();
    Instance {
        tokens,
        target: Target::Tags(tags),
        attributes: attributes(rng),
    }
}

/// Two real tokens between single PADs (4 ids, enough for width 2).
pub fn random_review(rng: &mut ChaCha8Rng) -> Instance {
    let tokens = vec![
        0,
        rng.gen_range(2..TINY_VOCAB),
        rng.gen_range(2..TINY_VOCAB),
        0,
    ];
    Instance {
        tokens,
        target: Target::Class(rng.gen_range(0..5)),
        attributes: attributes(rng),
    }
}

/// Perturbs every parameter slightly so zero-initialised biases do not sit
/// on relu kinks.
pub fn jitter(model: &mut JointModel, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id) == "emb" {
            let t = model.params.get_mut(id);
            let cols = t.cols();
            for v in &mut t.data_mut()[cols..] {
                *v += rng.gen_range(-0.1..0.1);
            }
        } else {
            for v in model.params.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
}

pub struct GradErrors {
    pub model: f64,
    pub discriminators: BTreeMap<String, f64>,
    pub checked: usize,
    pub worst: Vec<String>,
}

impl GradErrors {
    pub fn max(&self) -> f64 {
        self.discriminators
            .values()
            .fold(self.model, |a, &b| a.max(b))
    }
}

/// Analytic gradient of the joint objective against signed central
/// differences: `task − Σ λᵢ·CEᵢ` for model parameters and `+CEᵢ` for the
/// parameters of discriminator `i`. Dropout masks are fixed by `tape_seed`.
pub fn joint_gradient_errors(
    model: &JointModel,
    inst: &Instance,
    cfg: &TrainConfig,
    mode: Mode,
    tape_seed: u64,
) -> GradErrors {
    let mut grads = model.params.zeros_like();
    {
        let mut tape = Tape::with_params(&model.params, tape_seed);
        let loss = joint_loss(&mut tape, model, inst, cfg, mode).unwrap();
        tape.backward_into(loss.objective, &mut grads).unwrap();
    }
    let components = |p: &veil::params::ParamSet| {
        let mut tape = Tape::with_params(p, tape_seed);
        let loss = joint_loss(&mut tape, model, inst, cfg, mode).unwrap();
        loss.components(&tape)
    };
    let signed = |p: &veil::params::ParamSet| -> veil::Result<f64> {
        let c = components(p);
        Ok(c.task
            - c.adversarial
                .iter()
                .map(|(k, v)| cfg.lambdas[k] * v)
                .sum::<f64>())
    };
    let eps = 1e-3;
    // the PAD embedding row is a constant, not a parameter
    let not_pad = |n: &str, j: usize| n != "emb" || j >= model.spec.embed_dim;
    let m = finite_difference_check_entries(signed, &model.params, &grads, eps, |n, j| {
        !JointModel::is_discriminator_param(n) && not_pad(n, j)
    })
    .unwrap();
    let mut checked = m.checked;
    let mut worst = vec![format!("{:?}", m.worst)];
    let mut discriminators = BTreeMap::new();
    for name in model.attribute_names() {
        let prefix = format!("disc.{name}.");
        let ce = |p: &veil::params::ParamSet| -> veil::Result<f64> {
            Ok(components(p).adversarial[name])
        };
        let d = finite_difference_check_entries(ce, &model.params, &grads, eps, |n, _| {
            n.starts_with(&prefix)
        })
        .unwrap();
        checked += d.checked;
        worst.push(format!("{:?}", d.worst));
        discriminators.insert(name.to_string(), d.max_rel_error);
    }
    GradErrors {
        model: m.max_rel_error,
        discriminators,
        checked,
        worst,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-loop LSTM cell. `w: 4h×in`, `u: 4h×h`, `b: 4h`, gates i, f, g, o.
pub fn ref_lstm_step(
    w: &[f64],
    u: &[f64],
    b: &[f64],
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let hid = h.len();
    let inp = x.len();
    let mut z = vec![0.0; 4 * hid];
    for r in 0..4 * hid {
        let mut s = b[r];
        for j in 0..inp {
            s += w[r * inp + j] * x[j];
        }
        for j in 0..hid {
            s += u[r * hid + j] * h[j];
        }
        z[r] = s;
    }
    let mut h_new = vec![0.0; hid];
    let mut c_new = vec![0.0; hid];
    for k in 0..hid {
        let i = sigmoid(z[k]);
        let f = sigmoid(z[hid + k]);
        let g = z[2 * hid + k].tanh();
        let o = sigmoid(z[3 * hid + k]);
        c_new[k] = f * c[k] + i * g;
        h_new[k] = o * c_new[k].tanh();
    }
    (h_new, c_new)
}

pub struct RefLstm<'a> {
    pub w: &'a [f64],
    pub u: &'a [f64],
    pub b: &'a [f64],
    pub hidden: usize,
}

/// Scalar-loop BiLSTM: per-token `[h_i; h'_i]` and the sentence `[h_n; h'_1]`.
pub fn ref_bilstm(fwd: &RefLstm, bwd: &RefLstm, xs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = xs.len();
    let run = |p: &RefLstm, order: Vec<usize>| {
        let mut h = vec![0.0; p.hidden];
        let mut c = vec![0.0; p.hidden];
        let mut out = vec![Vec::new(); n];
        for t in order {
            let (h2, c2) = ref_lstm_step(p.w, p.u, p.b, &xs[t], &h, &c);
            h = h2;
            c = c2;
            out[t] = h.clone();
        }
        out
    };
    let f = run(fwd, (0..n).collect());
    let b = run(bwd, (0..n).rev().collect());
    let per_token = (0..n)
        .map(|t| [f[t].clone(), b[t].clone()].concat())
        .collect();
    let sentence = [f[n - 1].clone(), b[0].clone()].concat();
    (per_token, sentence)
}

/// Scalar-loop convolution + relu + max over time for one filter width.
pub fn ref_conv_maxpool(xs: &[Vec<f64>], w: &[f64], b: &[f64], width: usize) -> Vec<f64> {
    let d = xs[0].len();
    let maps = b.len();
    let mut out = vec![0.0; maps];
    for m in 0..maps {
        let mut best = f64::NEG_INFINITY;
        for t in 0..=xs.len() - width {
            let mut s = b[m];
            for k in 0..width {
                for j in 0..d {
                    s += w[m * width * d + k * d + j] * xs[t + k][j];
                }
            }
            best = best.max(s);
        }
        out[m] = best.max(0.0);
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn samples_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/samples")
}

/// Encoded sample corpus with every instance in both train and dev.
pub struct Sample {
    pub vocab: veil::data::vocab::Vocab,
    pub labels: Vec<String>,
    pub schema: veil::data::corpus::AttributeSchema,
    pub instances: Vec<Instance>,
    pub spec: ModelSpec,
}

pub fn tagging_sample() -> Sample {
    use veil::data::corpus::{parse_tagging_corpus, AttributeSchema};
    use veil::data::encode::{build_tagging_vocab, encode_tagged};
    let schema = AttributeSchema::tagging();
    let corpus = parse_tagging_corpus(&samples_dir().join("tagging.conll"), &schema).unwrap();
    let vocab = build_tagging_vocab(&corpus, 1);
    let instances = encode_tagged(&corpus, &vocab, &corpus.tagset, &schema).unwrap();
    let spec = ModelSpec {
        embed_dim: 8,
        hidden_total: 8,
        disc_hidden: 6,
        ..ModelSpec::tagger(vocab.len(), corpus.tagset.len())
    }
    .with_attribute("sex", 2)
    .with_attribute("age", 2);
    Sample {
        vocab,
        labels: corpus.tagset.clone(),
        schema,
        instances,
        spec,
    }
}

pub fn review_sample() -> Sample {
    use veil::data::corpus::parse_review_corpus;
    use veil::data::encode::{build_review_vocab, encode_reviews};
    let (corpus, _) = parse_review_corpus(&samples_dir().join("reviews.jsonl")).unwrap();
    let vocab = build_review_vocab(&corpus, 1);
    let spec = ModelSpec {
        embed_dim: 8,
        conv_widths: vec![2, 3],
        conv_maps: 6,
        disc_hidden: 6,
        ..ModelSpec::sentiment(vocab.len())
    }
    .with_attribute("sex", 2)
    .with_attribute("loc", 5);
    let instances = encode_reviews(&corpus, &vocab, spec.max_conv_width()).unwrap();
    Sample {
        vocab,
        labels: (1..=5).map(|r| r.to_string()).collect(),
        schema: corpus.schema(),
        instances,
        spec,
    }
}

/// Trains briefly on a sample and packs the result into a checkpoint.
pub fn train_sample(
    sample: &Sample,
    seed: u64,
) -> (veil::checkpoint::Checkpoint, veil::training::TrainHistory) {
    let mut cfg = TrainConfig {
        max_epochs: 2,
        patience: 2,
        seed,
        ..TrainConfig::default()
    };
    for name in sample.spec.attributes.keys() {
        cfg.lambdas.insert(name.clone(), 1e-3);
    }
    let model = JointModel::new(sample.spec.clone(), seed).unwrap();
    let (model, history) =
        veil::training::train(model, &sample.instances, &sample.instances, &cfg).unwrap();
    let checkpoint = veil::checkpoint::Checkpoint {
        model,
        config: cfg,
        vocab: sample.vocab.clone(),
        labels: sample.labels.clone(),
        schema: sample.schema.clone(),
    };
    (checkpoint, history)
}

/// Non-discriminator parameter values by name.
pub fn encoder_values(model: &JointModel) -> BTreeMap<String, Vec<f64>> {
    model
        .params
        .iter()
        .filter(|(_, n, _)| !JointModel::is_discriminator_param(n))
        .map(|(_, n, t)| (n.to_string(), t.data().to_vec()))
        .collect()
}

/// Trains a two-attribute tagger with λ = 0 and the same tagger without
/// discriminators for `steps` identical steps; true when every model
/// parameter ends bit-identical.
pub fn zero_lambda_matches_plain(seed: u64, steps: usize) -> bool {
    use veil::training::{train_step, Optimizer};
    let mut r = rng(seed);
    let data: Vec<Vec<Instance>> = (0..steps)
        .map(|_| {
            (0..4)
                .map(|_| {
                    let len = r.gen_range(1..5);
                    random_tagged(&mut r, len, 4)
                })
                .collect()
        })
        .collect();
    let adv_spec = tiny_tagger_spec();
    let plain_spec = ModelSpec {
        attributes: BTreeMap::new(),
        ..adv_spec.clone()
    };
    let mut adv = JointModel::new(adv_spec, seed).unwrap();
    let mut plain = JointModel::new(plain_spec, seed).unwrap();
    let base = TrainConfig {
        dropout: 0.3,
        learning_rate: 1e-2,
        seed,
        ..TrainConfig::default()
    };
    let adv_cfg = base.clone().with_lambda("sex", 0.0).with_lambda("age", 0.0);
    let mut adv_opt = Optimizer::new(&adv_cfg, &adv.params);
    let mut plain_opt = Optimizer::new(&base, &plain.params);
    for (step, batch) in data.iter().enumerate() {
        train_step(&mut adv, batch, &adv_cfg, &mut adv_opt, step as u64).unwrap();
        train_step(&mut plain, batch, &base, &mut plain_opt, step as u64).unwrap();
    }
    let (a, p) = (encoder_values(&adv), encoder_values(&plain));
    a.len() == p.len()
        && a.iter().all(|(name, values)| {
            p.get(name).is_some_and(|other| {
                values.len() == other.len()
                    && values
                        .iter()
                        .zip(other)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
        })
}

/// Confusion matrix `m[gold][pred]`.
pub fn confusion(pred: &[usize], gold: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &g) in pred.iter().zip(gold) {
        m[g][p] += 1;
    }
    m
}

/// Macro-F1 in percent from precision and recall per class.
#[allow(clippy::needless_range_loop)]
pub fn brute_macro_f1(pred: &[usize], gold: &[usize], k: usize) -> f64 {
    let m = confusion(pred, gold, k);
    let mut total = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let predicted: u64 = (0..k).map(|g| m[g][c]).sum();
        let actual: u64 = m[c].iter().sum();
        let precision = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
        total += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    100.0 * total / k as f64
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

/// Accuracy, macro-F1, majority and binary group Δ against brute-force
/// recomputation on `sets` random prediction sets. Returns the number of
/// mismatches.
pub fn metric_mismatches(seed: u64, sets: usize) -> usize {
    use veil::eval::{accuracy, group_report, macro_f1, majority_baseline};
    let mut r = rng(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let k = r.gen_range(2..7);
        let n = r.gen_range(1..60);
        // skewed predictions so that some classes go unpredicted
        let gold: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let pred: Vec<usize> = gold
            .iter()
            .map(|&g| {
                if r.gen_bool(0.6) {
                    g
                } else {
                    r.gen_range(0..k.min(3))
                }
            })
            .collect();
        let m = confusion(&pred, &gold, k);

        let diag: u64 = (0..k).map(|c| m[c][c]).sum();
        bad += usize::from(!close(
            accuracy(&pred, &gold).unwrap(),
            100.0 * diag as f64 / n as f64,
        ));
        bad += usize::from(!close(
            macro_f1(&pred, &gold, k).unwrap(),
            brute_macro_f1(&pred, &gold, k),
        ));
        let biggest = m.iter().map(|row| row.iter().sum::<u64>()).max().unwrap();
        bad += usize::from(!close(
            majority_baseline(&gold).unwrap(),
            100.0 * biggest as f64 / n as f64,
        ));

        let groups: Vec<usize> = (0..n).map(|_| r.gen_range(0..2)).collect();
        let outcomes: Vec<(usize, usize, usize)> = (0..n)
            .map(|i| (groups[i], usize::from(pred[i] == gold[i]), 1))
            .collect();
        let names = vec!["a".to_string(), "b".to_string()];
        let report = group_report("g", &names, &outcomes).unwrap();
        let acc = |g: usize| {
            let idx: Vec<usize> = (0..n).filter(|&i| groups[i] == g).collect();
            (!idx.is_empty()).then(|| {
                100.0 * idx.iter().filter(|&&i| pred[i] == gold[i]).count() as f64
                    / idx.len() as f64
            })
        };
        let want = match (acc(0), acc(1)) {
            (Some(a), Some(b)) => (a - b).abs(),
            _ => 0.0,
        };
        bad += usize::from(!close(report.delta, want));
        bad += usize::from(report.groups[0].accuracy.is_some() != acc(0).is_some());
    }
    bad
}
