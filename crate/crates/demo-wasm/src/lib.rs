//! Browser demo: preview the synthetic confound corpus, train one arm of the
//! experiment, and probe the gradient-reversal op. Every export takes plain
//! numbers and returns a JSON string.

use serde::Serialize;
use veil::autodiff::Tape;
use veil::data::synth::{generate_synthetic, SynthSpec};
use veil::experiment::{ArmResult, SyntheticExperiment};
use veil::tensor::Tensor;
use veil::Result;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
pub struct SampleRecord {
    pub split: &'static str,
    pub text: String,
    pub label: usize,
    pub attribute: usize,
}

#[derive(Serialize)]
pub struct CorpusPreview {
    pub train_association: f64,
    pub test_association: f64,
    pub samples: Vec<SampleRecord>,
}

/// Experiment settings small enough to train in a browser tab.
pub fn demo_experiment(rho: f64, flip: bool, seed: u64) -> SyntheticExperiment {
    let mut exp = SyntheticExperiment::default().with_seed(seed);
    exp.synth.confound_strength = rho;
    exp.synth.flip_out_of_domain = flip;
    exp.synth.n_train = 800;
    exp.synth.n_test = 400;
    exp.probe_train = 600;
    exp.probe_test = 400;
    exp.in_domain_test = 400;
    exp.conv_maps = 8;
    exp.disc_hidden = 16;
    exp.train.max_epochs = 8;
    exp.train.patience = 3;
    exp
}

pub fn preview(rho: f64, flip: bool, seed: u64, per_split: usize) -> Result<CorpusPreview> {
    let spec = SynthSpec {
        n_train: 400,
        n_test: 200,
        ..demo_experiment(rho, flip, seed).synth
    };
    let corpus = generate_synthetic(&spec)?;
    let take = |split: &'static str, records: &[veil::data::synth::SynthRecord]| {
        records
            .iter()
            .take(per_split)
            .map(|r| SampleRecord {
                split,
                text: r.tokens.join(" "),
                label: r.label,
                attribute: r.attribute,
            })
            .collect::<Vec<_>>()
    };
    let mut samples = take("train", &corpus.train);
    samples.extend(take("test", &corpus.test));
    Ok(CorpusPreview {
        train_association: corpus.manifest.train_association,
        test_association: corpus.manifest.test_association,
        samples,
    })
}

/// Trains one arm; `lambda <= 0` trains the baseline without a discriminator.
pub fn train_arm(rho: f64, flip: bool, lambda: f64, seed: u64) -> Result<ArmResult> {
    let exp = demo_experiment(rho, flip, seed);
    let data = exp.prepare()?;
    let (_, arm) = exp.run_arm(&data, (lambda > 0.0).then_some(lambda))?;
    Ok(arm)
}

#[derive(Debug, PartialEq, Serialize)]
pub struct ReversalProbe {
    pub forward: Vec<f64>,
    pub gradient: Vec<f64>,
}

/// Passes `x` through the reversal op, takes `loss = Σ upstream ⊙ y`, and
/// returns `y` and `∂loss/∂x`.
pub fn reversal(x: &[f64], upstream: &[f64], lambda: f64) -> Result<ReversalProbe> {
    let mut tape = Tape::new(0);
    let xv = tape.leaf(Tensor::row(x)?);
    let uv = tape.leaf(Tensor::row(upstream)?);
    let y = tape.grad_reverse(xv, lambda)?;
    let prod = tape.mul(y, uv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    let gradient = tape
        .grad(xv)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    Ok(ReversalProbe {
        forward: tape.value(y).data().to_vec(),
        gradient,
    })
}

fn json<T: Serialize>(r: Result<T>) -> std::result::Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = previewCorpus)]
pub fn preview_corpus(
    rho: f64,
    flip: bool,
    seed: u32,
    per_split: u32,
) -> std::result::Result<String, JsError> {
    json(preview(rho, flip, seed.into(), per_split as usize))
}

#[wasm_bindgen(js_name = trainArm)]
pub fn train_arm_js(
    rho: f64,
    flip: bool,
    lambda: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    json(train_arm(rho, flip, lambda, seed.into()))
}

#[wasm_bindgen(js_name = reversalProbe)]
pub fn reversal_probe(
    x: Vec<f64>,
    upstream: Vec<f64>,
    lambda: f64,
) -> std::result::Result<String, JsError> {
    json(reversal(&x, &upstream, lambda))
}
