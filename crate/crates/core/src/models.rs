//! Task models with per-attribute discriminator heads.
//!
//! Both models expose the same two outputs from a forward pass: task logits
//! and the representation `h` that discriminators (and attackers) consume.
//! `h` is always taken before dropout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Mode, Tape, Var};
use crate::error::{Result, VeilError};
use crate::layers::{
    bilstm_encode, conv_maxpool, ConvBank, EmbeddingTable, FeedForwardHead, LstmParams,
};
use crate::params::ParamSet;
use crate::seed;

/// Tag id for gold tags that never appeared in training; always scored wrong.
pub const UNSEEN_TAG: usize = usize::MAX;

/// Prefix of every discriminator parameter name.
pub const DISCRIMINATOR_PREFIX: &str = "disc.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Tags(Vec<usize>),
    Class(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub tokens: Vec<usize>,
    pub target: Target,
    /// Attribute name → class index.
    pub attributes: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Tagger,
    Sentiment,
}

impl std::str::FromStr for TaskKind {
    type Err = VeilError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tagger" => Ok(TaskKind::Tagger),
            "sentiment" => Ok(TaskKind::Sentiment),
            other => Err(VeilError::Config(format!(
                "unknown task `{other}` (tagger|sentiment)"
            ))),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Tagger => "tagger",
            TaskKind::Sentiment => "sentiment",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Width of the tagger's `[h_n; h'_1]`; each direction gets half.
    pub hidden_total: usize,
    pub conv_widths: Vec<usize>,
    pub conv_maps: usize,
    /// Tagset size (tagger) or number of rating classes (sentiment).
    pub n_outputs: usize,
    pub disc_hidden: usize,
    /// Protected attribute → arity. Empty for a baseline model.
    pub attributes: BTreeMap<String, usize>,
}

impl ModelSpec {
    pub fn tagger(vocab_size: usize, n_tags: usize) -> Self {
        ModelSpec {
            task: TaskKind::Tagger,
            vocab_size,
            embed_dim: 300,
            hidden_total: 300,
            conv_widths: vec![3, 4, 5],
            conv_maps: 100,
            n_outputs: n_tags,
            disc_hidden: 300,
            attributes: BTreeMap::new(),
        }
    }

    pub fn sentiment(vocab_size: usize) -> Self {
        ModelSpec {
            task: TaskKind::Sentiment,
            n_outputs: 5,
            ..Self::tagger(vocab_size, 5)
        }
    }

    pub fn with_attribute(mut self, name: &str, arity: usize) -> Self {
        self.attributes.insert(name.to_string(), arity);
        self
    }

    pub fn rep_dim(&self) -> usize {
        match self.task {
            TaskKind::Tagger => self.hidden_total,
            TaskKind::Sentiment => self.conv_widths.len() * self.conv_maps,
        }
    }

    pub fn max_conv_width(&self) -> usize {
        self.conv_widths.iter().copied().max().unwrap_or(1)
    }
}

/// BiLSTM tagger: per-token linear output over `[h_i; h'_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerModel {
    pub embedding: EmbeddingTable,
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub output: FeedForwardHead,
}

/// CNN classifier: conv + max-over-time `h`, linear output over ratings.
#[derive(Clone, Debug, PartialEq)]
pub struct SentimentModel {
    pub embedding: EmbeddingTable,
    pub conv: ConvBank,
    pub output: FeedForwardHead,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Network {
    Tagger(TaggerModel),
    Sentiment(SentimentModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointModel {
    pub spec: ModelSpec,
    pub params: ParamSet,
    pub network: Network,
    pub discriminators: BTreeMap<String, FeedForwardHead>,
}

pub struct ForwardOutput {
    /// One `1×K` row per token (tagger) or a single row (sentiment).
    pub logits: Vec<Var>,
    /// Pre-dropout representation consumed by discriminators.
    pub rep: Var,
}

fn name_index(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl JointModel {
    /// Builds a model with freshly initialised parameters. Encoder, task head
    /// and each discriminator draw from separate seeded streams, so adding a
    /// discriminator never changes the encoder's initial values.
    pub fn new(spec: ModelSpec, seed_value: u64) -> Result<Self> {
        if spec.vocab_size < 2 || spec.embed_dim == 0 || spec.n_outputs < 2 {
            return Err(VeilError::Config(format!(
                "model needs vocab >= 2, embed_dim > 0 and >= 2 outputs (got {}, {}, {})",
                spec.vocab_size, spec.embed_dim, spec.n_outputs
            )));
        }
        let mut params = ParamSet::new();
        let mut enc_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(seed_value, seed::ROLE_ENCODER_INIT, 0));
        let mut head_rng =
            ChaCha8Rng::seed_from_u64(seed::derive(seed_value, seed::ROLE_TASK_HEAD_INIT, 0));
        let embedding = EmbeddingTable::new(
            &mut params,
            "emb",
            spec.vocab_size,
            spec.embed_dim,
            &mut enc_rng,
        )?;
        let network = match spec.task {
            TaskKind::Tagger => {
                if spec.hidden_total < 2 || !spec.hidden_total.is_multiple_of(2) {
                    return Err(VeilError::Config(format!(
                        "hidden_total must be even and >= 2, got {}",
                        spec.hidden_total
                    )));
                }
                let half = spec.hidden_total / 2;
                let forward =
                    LstmParams::new(&mut params, "enc.fwd", spec.embed_dim, half, &mut enc_rng)?;
                let backward =
                    LstmParams::new(&mut params, "enc.bwd", spec.embed_dim, half, &mut enc_rng)?;
                let output = FeedForwardHead::new(
                    &mut params,
                    "task",
                    spec.hidden_total,
                    0,
                    spec.n_outputs,
                    &mut head_rng,
                )?;
                Network::Tagger(TaggerModel {
                    embedding,
                    forward,
                    backward,
                    output,
                })
            }
            TaskKind::Sentiment => {
                let conv = ConvBank::new(
                    &mut params,
                    "enc.conv",
                    spec.embed_dim,
                    &spec.conv_widths,
                    spec.conv_maps,
                    &mut enc_rng,
                )?;
                let output = FeedForwardHead::new(
                    &mut params,
                    "task",
                    conv.output_dim(),
                    0,
                    spec.n_outputs,
                    &mut head_rng,
                )?;
                Network::Sentiment(SentimentModel {
                    embedding,
                    conv,
                    output,
                })
            }
        };
        let rep_dim = spec.rep_dim();
        let mut discriminators = BTreeMap::new();
        for (name, &arity) in &spec.attributes {
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(
                seed_value,
                seed::ROLE_DISCRIMINATOR_INIT,
                name_index(name),
            ));
            let head = FeedForwardHead::new(
                &mut params,
                &format!("{DISCRIMINATOR_PREFIX}{name}"),
                rep_dim,
                spec.disc_hidden.max(1),
                arity,
                &mut rng,
            )?;
            discriminators.insert(name.clone(), head);
        }
        Ok(JointModel {
            spec,
            params,
            network,
            discriminators,
        })
    }

    /// Rebuilds layer handles for `spec` and adopts `params`, which must
    /// match the freshly built layout name for name and shape.
    pub fn from_params(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let mut model = JointModel::new(spec, 0)?;
        if model.params.len() != params.len() {
            return Err(VeilError::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in model.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(VeilError::Checkpoint(format!(
                    "parameter layout mismatch: expected {n1}{:?}, found {n2}{:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn task(&self) -> TaskKind {
        self.spec.task
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.discriminators.keys().map(String::as_str)
    }

    pub fn is_discriminator_param(name: &str) -> bool {
        name.starts_with(DISCRIMINATOR_PREFIX)
    }

    /// Records the task path on `tape`, which must borrow `self.params`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        inst: &Instance,
        mode: Mode,
        dropout: f64,
    ) -> Result<ForwardOutput> {
        if inst.tokens.is_empty() {
            return Err(VeilError::Data("empty token sequence".into()));
        }
        match &self.network {
            Network::Tagger(net) => tagger_forward(tape, net, inst, mode, dropout),
            Network::Sentiment(net) => sentiment_forward(tape, net, inst, mode, dropout),
        }
    }

    pub fn discriminator_logits(
        &self,
        tape: &mut Tape<'_>,
        attribute: &str,
        rep: Var,
    ) -> Result<Var> {
        let head = self.discriminators.get(attribute).ok_or_else(|| {
            VeilError::Config(format!("model has no discriminator for `{attribute}`"))
        })?;
        head.forward(tape, rep)
    }

    fn eval_tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params, 0)
    }

    /// Argmax task prediction in eval mode: one class per token for the
    /// tagger, a single class for the classifier. Ties pick the lowest class.
    pub fn predict(&self, inst: &Instance) -> Result<Vec<usize>> {
        let mut tape = self.eval_tape();
        let out = self.forward(&mut tape, inst, Mode::Eval, 0.0)?;
        Ok(out
            .logits
            .iter()
            .map(|&l| argmax(tape.value(l).data()))
            .collect())
    }

    /// The exact eval-mode vector the discriminators see.
    pub fn extract_representation(&self, inst: &Instance) -> Result<Vec<f64>> {
        let mut tape = self.eval_tape();
        let out = self.forward(&mut tape, inst, Mode::Eval, 0.0)?;
        Ok(tape.value(out.rep).data().to_vec())
    }

    /// Eval-mode prediction of the jointly trained discriminator.
    pub fn predict_attribute(&self, inst: &Instance, attribute: &str) -> Result<usize> {
        let mut tape = self.eval_tape();
        let out = self.forward(&mut tape, inst, Mode::Eval, 0.0)?;
        let logits = self.discriminator_logits(&mut tape, attribute, out.rep)?;
        Ok(argmax(tape.value(logits).data()))
    }
}

/// Embeds, runs the BiLSTM, applies dropout to each `[h_i; h'_i]` (train
/// mode) and the linear output per token.
pub fn tagger_forward(
    tape: &mut Tape<'_>,
    net: &TaggerModel,
    inst: &Instance,
    mode: Mode,
    dropout: f64,
) -> Result<ForwardOutput> {
    let xs = net.embedding.embed(tape, &inst.tokens)?;
    let enc = bilstm_encode(tape, &net.forward, &net.backward, xs)?;
    let mut logits = Vec::with_capacity(enc.per_token.len());
    for &row in &enc.per_token {
        let dropped = tape.dropout(row, dropout, mode)?;
        logits.push(net.output.forward(tape, dropped)?);
    }
    Ok(ForwardOutput {
        logits,
        rep: enc.sentence,
    })
}

/// Embeds, pools convolution features into `h`, applies dropout to `h`
/// (train mode) and the linear rating output.
pub fn sentiment_forward(
    tape: &mut Tape<'_>,
    net: &SentimentModel,
    inst: &Instance,
    mode: Mode,
    dropout: f64,
) -> Result<ForwardOutput> {
    let need = net.conv.max_width();
    if inst.tokens.len() < need {
        return Err(VeilError::Data(format!(
            "input of {} tokens is shorter than the widest filter ({need}); pad it first",
            inst.tokens.len()
        )));
    }
    let xs = net.embedding.embed(tape, &inst.tokens)?;
    let h = conv_maxpool(tape, &net.conv, xs)?;
    let dropped = tape.dropout(h, dropout, mode)?;
    let logits = net.output.forward(tape, dropped)?;
    Ok(ForwardOutput {
        logits: vec![logits],
        rep: h,
    })
}
