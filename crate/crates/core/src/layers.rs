//! Neural building blocks shared by the tagger and the classifier.
//!
//! Layers own no tensors themselves: each one registers its parameters in a
//! [`ParamSet`] at construction and keeps the [`ParamId`]s, and its forward
//! functions record onto a [`Tape`] that borrows the same set.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var, PAD_ID};
use crate::data::vocab::Vocab;
use crate::error::{Result, VeilError};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

/// Half-width of the uniform range for random word vectors.
pub const EMBEDDING_INIT_RANGE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// Uniform Glorot over a `fan_out × fan_in` weight.
    Glorot,
    Zeros,
    /// `1×4h` LSTM bias: forget slice 1.0, the rest 0.
    LstmBias,
    /// U(−0.25, 0.25) with an all-zero PAD row.
    Embedding,
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Initial values for a `rows × cols` parameter.
pub fn init_params(kind: InitKind, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    match kind {
        InitKind::Zeros => {}
        InitKind::Glorot => {
            let bound = glorot_bound(cols, rows);
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        InitKind::LstmBias => {
            assert!(
                cols.is_multiple_of(4),
                "LSTM bias width {cols} is not 4·hidden"
            );
            let h = cols / 4;
            for v in &mut t.data_mut()[h..2 * h] {
                *v = 1.0;
            }
        }
        InitKind::Embedding => {
            for v in &mut t.data_mut()[cols..] {
                *v = rng.gen_range(-EMBEDDING_INIT_RANGE..=EMBEDDING_INIT_RANGE);
            }
        }
    }
    t
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab_size: usize,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        vocab_size: usize,
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(VeilError::Config(format!(
                "embedding table needs PAD and UNK rows and a positive dim, got {vocab_size}x{dim}"
            )));
        }
        let id = params.insert(name, init_params(InitKind::Embedding, vocab_size, dim, rng))?;
        Ok(EmbeddingTable {
            id,
            vocab_size,
            dim,
        })
    }

    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        let table = tape.param(self.id);
        tape.embed(table, ids)
    }
}

/// Reads whitespace-separated `token v1 … vd` lines and overwrites the rows
/// of tokens present in `vocab`. Returns how many rows were replaced.
pub fn load_embeddings(path: &Path, vocab: &Vocab, table: &mut Tensor) -> Result<usize> {
    let file = File::open(path).map_err(|e| VeilError::io(path, e))?;
    let dim = table.cols();
    let mut loaded = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| VeilError::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<f64> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| VeilError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("bad float: {e}"),
            })?;
        if values.len() != dim {
            return Err(VeilError::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("expected {dim} values, found {}", values.len()),
            });
        }
        if let Some(id) = vocab.get(token) {
            if id == PAD_ID {
                continue;
            }
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
            loaded += 1;
        }
    }
    Ok(loaded)
}

/// One LSTM direction. Gates are stacked in the order input, forget, cell,
/// output: `W: 4h×in`, `U: 4h×h`, `b: 1×4h`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let w = params.insert(
            format!("{prefix}.w"),
            init_params(InitKind::Glorot, 4 * hidden, input_dim, rng),
        )?;
        let u = params.insert(
            format!("{prefix}.u"),
            init_params(InitKind::Glorot, 4 * hidden, hidden, rng),
        )?;
        let b = params.insert(
            format!("{prefix}.b"),
            init_params(InitKind::LstmBias, 1, 4 * hidden, rng),
        )?;
        Ok(LstmParams {
            w,
            u,
            b,
            input_dim,
            hidden,
        })
    }
}

/// One recurrence step on an input row that has already been projected
/// (`x·Wᵀ + b`, width `4h`).
fn lstm_step_projected(
    tape: &mut Tape<'_>,
    p: &LstmParams,
    x_proj: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let u = tape.param(p.u);
    let rec = tape.linear(h_prev, u, None)?;
    let gates = tape.add(x_proj, rec)?;
    let h = p.hidden;
    let i_pre = tape.slice_cols(gates, 0, h)?;
    let f_pre = tape.slice_cols(gates, h, h)?;
    let g_pre = tape.slice_cols(gates, 2 * h, h)?;
    let o_pre = tape.slice_cols(gates, 3 * h, h)?;
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h_new = tape.mul(o, tc)?;
    Ok((h_new, c))
}

/// `i,f,o = σ(·)`, `g = tanh(·)`, `c = f⊙c_prev + i⊙g`, `h = o⊙tanh(c)`.
pub fn lstm_step(
    tape: &mut Tape<'_>,
    p: &LstmParams,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let x_proj = tape.linear(x_t, w, Some(b))?;
    lstm_step_projected(tape, p, x_proj, h_prev, c_prev)
}

/// Runs one direction over the rows of `xs` in the given order and returns
/// the hidden state after each consumed row.
fn lstm_run(
    tape: &mut Tape<'_>,
    p: &LstmParams,
    xs: Var,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Var>> {
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let proj = tape.linear(xs, w, Some(b))?;
    let mut h = tape.leaf(Tensor::zeros(1, p.hidden));
    let mut c = tape.leaf(Tensor::zeros(1, p.hidden));
    let mut states = Vec::new();
    for t in order {
        let x_t = tape.row(proj, t)?;
        (h, c) = lstm_step_projected(tape, p, x_t, h, c)?;
        states.push(h);
    }
    Ok(states)
}

#[derive(Clone, Debug)]
pub struct BiLstmOutput {
    /// Row `i` is `[h_i; h'_i]`, width `2h`.
    pub per_token: Vec<Var>,
    /// `[h_n; h'_1]`: both directions after consuming the whole sentence.
    pub sentence: Var,
}

/// Bidirectional encoding of `xs: n×d` with zero initial states.
pub fn bilstm_encode(
    tape: &mut Tape<'_>,
    fwd: &LstmParams,
    bwd: &LstmParams,
    xs: Var,
) -> Result<BiLstmOutput> {
    let n = tape.value(xs).rows();
    if n == 0 {
        return Err(VeilError::dim("bilstm_encode", "empty sequence"));
    }
    let forward = lstm_run(tape, fwd, xs, 0..n)?;
    let mut backward = lstm_run(tape, bwd, xs, (0..n).rev())?;
    backward.reverse();
    let per_token = forward
        .iter()
        .zip(&backward)
        .map(|(&h, &hb)| tape.concat(h, hb))
        .collect::<Result<Vec<_>>>()?;
    let sentence = tape.concat(forward[n - 1], backward[0])?;
    Ok(BiLstmOutput {
        per_token,
        sentence,
    })
}

/// Filters of several widths, each followed by relu and max over time.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBank {
    pub widths: Vec<usize>,
    pub maps: usize,
    /// `(weight maps×(width·d), bias 1×maps)` per width.
    pub filters: Vec<(ParamId, ParamId)>,
    pub input_dim: usize,
}

impl ConvBank {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        widths: &[usize],
        maps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || maps == 0 {
            return Err(VeilError::Config(format!(
                "bad conv bank: widths {widths:?}, maps {maps}"
            )));
        }
        let mut filters = Vec::with_capacity(widths.len());
        for &w in widths {
            let wt = params.insert(
                format!("{prefix}.w{w}"),
                init_params(InitKind::Glorot, maps, w * input_dim, rng),
            )?;
            let b = params.insert(
                format!("{prefix}.b{w}"),
                init_params(InitKind::Zeros, 1, maps, rng),
            )?;
            filters.push((wt, b));
        }
        Ok(ConvBank {
            widths: widths.to_vec(),
            maps,
            filters,
            input_dim,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.widths.len() * self.maps
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }
}

/// Pooled features `1×(widths·maps)`, grouped by width in bank order.
pub fn conv_maxpool(tape: &mut Tape<'_>, bank: &ConvBank, xs: Var) -> Result<Var> {
    let mut out: Option<Var> = None;
    for (&width, &(w, b)) in bank.widths.iter().zip(&bank.filters) {
        let wv = tape.param(w);
        let bv = tape.param(b);
        let pooled = tape.conv_maxpool(xs, wv, bv, width)?;
        out = Some(match out {
            None => pooled,
            Some(prev) => tape.concat(prev, pooled)?,
        });
    }
    Ok(out.expect("bank has at least one width"))
}

/// `W₂·relu(W₁h + b₁) + b₂`, or just `W₂h + b₂` when there is no hidden layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardHead {
    pub hidden: Option<(ParamId, ParamId)>,
    pub out: (ParamId, ParamId),
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub arity: usize,
}

impl FeedForwardHead {
    /// `hidden_dim == 0` builds a purely linear head.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        arity: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || arity < 2 {
            return Err(VeilError::Config(format!(
                "head `{prefix}` needs input dim > 0 and at least two classes"
            )));
        }
        let hidden = if hidden_dim > 0 {
            let w1 = params.insert(
                format!("{prefix}.w1"),
                init_params(InitKind::Glorot, hidden_dim, input_dim, rng),
            )?;
            let b1 = params.insert(
                format!("{prefix}.b1"),
                init_params(InitKind::Zeros, 1, hidden_dim, rng),
            )?;
            Some((w1, b1))
        } else {
            None
        };
        let last_in = if hidden_dim > 0 {
            hidden_dim
        } else {
            input_dim
        };
        let w2 = params.insert(
            format!("{prefix}.w2"),
            init_params(InitKind::Glorot, arity, last_in, rng),
        )?;
        let b2 = params.insert(
            format!("{prefix}.b2"),
            init_params(InitKind::Zeros, 1, arity, rng),
        )?;
        Ok(FeedForwardHead {
            hidden,
            out: (w2, b2),
            input_dim,
            hidden_dim,
            arity,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, h: Var) -> Result<Var> {
        let width = tape.value(h).cols();
        if width != self.input_dim {
            return Err(VeilError::dim(
                "feedforward",
                format!("input width {width}, head expects {}", self.input_dim),
            ));
        }
        let mut x = h;
        if let Some((w1, b1)) = self.hidden {
            let w = tape.param(w1);
            let b = tape.param(b1);
            let pre = tape.linear(x, w, Some(b))?;
            x = tape.relu(pre);
        }
        let w = tape.param(self.out.0);
        let b = tape.param(self.out.1);
        tape.linear(x, w, Some(b))
    }
}
