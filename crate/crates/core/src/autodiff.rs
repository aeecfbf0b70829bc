//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output value. [`Tape::backward`] walks the nodes in reverse creation
//! order and pushes gradients to parents. Since a [`Var`] can only refer to
//! nodes created before it, the recorded graph is acyclic and creation order
//! is a valid topological order.
//!
//! Model parameters live outside the tape in a [`ParamSet`]. The tape
//! borrows them (no copies of large tables) and [`Tape::backward_into`]
//! accumulates their gradients straight into a [`Grads`] buffer.
//!
//! ```
//! use veil::autodiff::Tape;
//! use veil::tensor::Tensor;
//!
//! let mut tape = Tape::new(0);
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
//! ```

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VeilError};
use crate::params::{Grads, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Embedding row that never receives gradient.
pub const PAD_ID: usize = 0;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pointwise operations accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

impl std::str::FromStr for ElemKind {
    type Err = VeilError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "add" => ElemKind::Add,
            "mul" => ElemKind::Mul,
            "tanh" => ElemKind::Tanh,
            "sigmoid" => ElemKind::Sigmoid,
            "relu" => ElemKind::Relu,
            other => {
                return Err(VeilError::Config(format!(
                    "unknown elementwise kind `{other}`"
                )))
            }
        })
    }
}

/// Tag identifying what produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    Linear,
    Add,
    Mul,
    AddBias,
    Tanh,
    Sigmoid,
    Relu,
    Concat,
    SliceCols,
    Row,
    Sum,
    SumAll,
    Scale,
    SoftmaxCrossEntropy,
    GradReverse,
    Dropout,
    Embed,
    ConvMaxPool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
    },
    Row {
        a: Var,
        row: usize,
    },
    Sum(Var),
    SumAll(Vec<Var>),
    Scale(Var, f64),
    SoftmaxCe {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    GradReverse {
        a: Var,
        lambda: f64,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    ConvMaxPool {
        x: Var,
        w: Var,
        b: Var,
        width: usize,
        argmax: Vec<usize>,
        best: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat(..) => OpKind::Concat,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Row { .. } => OpKind::Row,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAll(_) => OpKind::SumAll,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxCe { .. } => OpKind::SoftmaxCrossEntropy,
            Op::GradReverse { .. } => OpKind::GradReverse,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Embed { .. } => OpKind::Embed,
            Op::ConvMaxPool { .. } => OpKind::ConvMaxPool,
        }
    }
}

#[derive(Debug)]
enum Value {
    Owned(Tensor),
    Param(usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Value,
    shape: Vec<usize>,
}

fn resolve<'a>(nodes: &'a [Node], params: Option<&'a ParamSet>, v: Var) -> &'a Tensor {
    match &nodes[v.0].value {
        Value::Owned(t) => t,
        Value::Param(id) => params
            .expect("param node without a parameter set")
            .get(ParamId(*id)),
    }
}

/// Gradient destinations during one backward pass.
struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
    params: Option<&'a mut Grads>,
}

impl Sink<'_> {
    fn slot(&mut self, v: Var) -> &mut [f64] {
        if let (Value::Param(id), Some(pg)) = (&self.nodes[v.0].value, self.params.as_deref_mut()) {
            return pg.slot_mut(*id);
        }
        let shape = &self.nodes[v.0].shape;
        self.grads[v.0]
            .get_or_insert_with(|| {
                Tensor::new(shape.clone(), vec![0.0; shape.iter().product()]).unwrap()
            })
            .data_mut()
    }
}

/// Numerically stable softmax of one row of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: Option<&'p ParamSet>,
    rng: ChaCha8Rng,
}

impl Tape<'static> {
    /// A tape without model parameters; `seed` drives stochastic ops.
    pub fn new(seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p ParamSet, seed: u64) -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Some(params),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
            shape,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let params = self.params.expect("tape has no parameter set");
        let shape = params.get(id).shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Param(id.0),
            shape,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        resolve(&self.nodes, self.params, v)
    }

    /// Gradient slot of a node after [`Tape::backward`]. Parameter nodes
    /// report `None` after [`Tape::backward_into`], whose gradients live in
    /// the caller's [`Grads`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// λ of a gradient-reversal node; `None` for every other node.
    pub fn reversal_scale(&self, v: Var) -> Option<f64> {
        match self.nodes[v.0].op {
            Op::GradReverse { lambda, .. } => Some(lambda),
            _ => None,
        }
    }

    /// Softmax probabilities recorded by a cross-entropy node.
    pub fn softmax_probs(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(VeilError::dim(
                op,
                format!("expected rank 2, got shape {:?}", t.shape()),
            ));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(VeilError::dim(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), t))
    }

    /// `x·wᵀ + b` for `x: m×in`, `w: out×in`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.rank2("linear", x)?;
        let (n, k2) = self.rank2("linear", w)?;
        if k != k2 {
            return Err(VeilError::dim(
                "linear",
                format!(
                    "input {:?} vs weight {:?}",
                    self.value(x).shape(),
                    self.value(w).shape()
                ),
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [1, n] {
                return Err(VeilError::dim(
                    "linear",
                    format!("bias {:?} vs output width {n}", self.value(b).shape()),
                ));
            }
        }
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let xr = &xv[i * k..(i + 1) * k];
            for o in 0..n {
                let wr = &wv[o * k..(o + 1) * k];
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                out[i * n + o] = acc;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::Linear { x, w, b }, t))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(VeilError::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(a);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(op, t)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a `1×n` bias row to every row of an `m×n` tensor.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.rank2("add_bias", a)?;
        if self.value(b).shape() != [1, n] {
            return Err(VeilError::dim(
                "add_bias",
                format!(
                    "{:?} + bias {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..m * n).map(|i| av[i] + bv[i % n]).collect();
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(Op::AddBias(a, b), t))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn elementwise(&mut self, kind: ElemKind, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind, b) {
            (ElemKind::Add, Some(b)) => self.add(a, b),
            (ElemKind::Mul, Some(b)) => self.mul(a, b),
            (ElemKind::Tanh, None) => Ok(self.tanh(a)),
            (ElemKind::Sigmoid, None) => Ok(self.sigmoid(a)),
            (ElemKind::Relu, None) => Ok(self.relu(a)),
            (kind, _) => Err(VeilError::Config(format!(
                "elementwise {kind:?}: wrong number of operands"
            ))),
        }
    }

    /// Joins two single-row tensors side by side.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, _) = self.rank2("concat", a)?;
        let (rb, _) = self.rank2("concat", b)?;
        if ra != 1 || rb != 1 {
            return Err(VeilError::dim(
                "concat",
                format!(
                    "expected single rows, got {:?} and {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let t = Tensor::matrix(1, data.len(), data)?;
        Ok(self.push(Op::Concat(a, b), t))
    }

    /// Columns `start..start+len` of every row.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rank2("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(VeilError::dim(
                "slice_cols",
                format!("{start}+{len} outside {n} columns"),
            ));
        }
        let av = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let t = Tensor::matrix(m, len, data)?;
        Ok(self.push(Op::SliceCols { a, start }, t))
    }

    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let (m, _) = self.rank2("row", a)?;
        if row >= m {
            return Err(VeilError::dim("row", format!("row {row} of {m}")));
        }
        let t = Tensor::row(self.value(a).row_slice(row))?;
        Ok(self.push(Op::Row { a, row }, t))
    }

    /// Sum of all entries as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Sum of several scalar nodes.
    pub fn sum_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &x in xs {
            s += self
                .value(x)
                .item()
                .ok_or_else(|| VeilError::dim("sum_all", "operands must be scalars"))?;
        }
        Ok(self.push(Op::SumAll(xs.to_vec()), Tensor::scalar(s)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// `−log softmax(logits)[target]` for a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (m, k) = self.rank2("softmax_cross_entropy", logits)?;
        if m != 1 {
            return Err(VeilError::dim(
                "softmax_cross_entropy",
                format!("expected 1xK logits, got {m}x{k}"),
            ));
        }
        if target >= k {
            return Err(VeilError::Config(format!(
                "target class {target} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits).data();
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = lv.iter().map(|&l| (l - max).exp()).sum();
        let log_z = max + z.ln();
        let loss = log_z - lv[target];
        let probs = lv.iter().map(|&l| (l - log_z).exp()).collect();
        Ok(self.push(
            Op::SoftmaxCe {
                logits,
                target,
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Identity forward; backward multiplies the incoming gradient by `−λ`.
    /// With `λ = 0` nothing flows back, which detaches the branch.
    pub fn grad_reverse(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(VeilError::Config(format!(
                "gradient reversal scale must be finite and >= 0, got {lambda}"
            )));
        }
        let t = self.value(a).clone();
        Ok(self.push(Op::GradReverse { a, lambda }, t))
    }

    /// Inverted dropout. Eval mode and `rate = 0` return `a` unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(VeilError::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(Op::Dropout { a, mask }, t))
    }

    /// Row lookup `table[ids]` producing an `n×d` tensor.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.rank2("embed", table)?;
        if ids.is_empty() {
            return Err(VeilError::dim("embed", "empty id sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(VeilError::Data(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(tv.row_slice(i));
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            t,
        ))
    }

    /// Valid 1-D convolution of `width`-token windows over `x: n×d` with
    /// filters `w: maps×(width·d)` and bias `b: 1×maps`, then relu and max
    /// over time. Ties pick the lowest window index.
    pub fn conv_maxpool(&mut self, x: Var, w: Var, b: Var, width: usize) -> Result<Var> {
        let (n, d) = self.rank2("conv_maxpool", x)?;
        let (maps, wd) = self.rank2("conv_maxpool", w)?;
        if width == 0 || wd != width * d {
            return Err(VeilError::dim(
                "conv_maxpool",
                format!(
                    "filter {:?} does not match width {width} over {d}-dim input",
                    self.value(w).shape()
                ),
            ));
        }
        if self.value(b).shape() != [1, maps] {
            return Err(VeilError::dim(
                "conv_maxpool",
                format!("bias {:?} for {maps} maps", self.value(b).shape()),
            ));
        }
        if n < width {
            return Err(VeilError::dim(
                "conv_maxpool",
                format!("{n} tokens shorter than filter width {width}"),
            ));
        }
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let windows = n - width + 1;
        let mut argmax = vec![0; maps];
        let mut best = vec![f64::NEG_INFINITY; maps];
        for m in 0..maps {
            let filt = &wv[m * wd..(m + 1) * wd];
            for t in 0..windows {
                let window = &xv[t * d..t * d + wd];
                let mut s = bv[m];
                for (a, c) in window.iter().zip(filt) {
                    s += a * c;
                }
                if s > best[m] {
                    best[m] = s;
                    argmax[m] = t;
                }
            }
        }
        let out = best
            .iter()
            .map(|&s| if s > 0.0 { s } else { 0.0 })
            .collect();
        let t = Tensor::matrix(1, maps, out)?;
        Ok(self.push(
            Op::ConvMaxPool {
                x,
                w,
                b,
                width,
                argmax,
                best,
            },
            t,
        ))
    }

    /// Backpropagates from a scalar node. Every gradient, parameters
    /// included, lands in the tape's own node slots.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.run_backward(loss, None)
    }

    /// Backpropagates from a scalar node, adding parameter gradients into
    /// `grads` (aligned with the tape's [`ParamSet`]).
    pub fn backward_into(&mut self, loss: Var, grads: &mut Grads) -> Result<()> {
        if let Some(p) = self.params {
            if p.len() != grads.len() {
                return Err(VeilError::dim(
                    "backward",
                    format!(
                        "{} gradient buffers for {} parameters",
                        grads.len(),
                        p.len()
                    ),
                ));
            }
        }
        self.run_backward(loss, Some(grads))
    }

    fn run_backward(&mut self, loss: Var, param_grads: Option<&mut Grads>) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(VeilError::dim(
                "backward",
                "loss does not belong to this tape",
            ));
        }
        if self.value(loss).item().is_none() {
            return Err(VeilError::dim(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.value(loss).shape()
                ),
            ));
        }
        // Interior slots restart from zero; leaf slots keep accumulating.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        let params = self.params;
        let nodes = &self.nodes;
        let mut sink = Sink {
            nodes,
            grads: &mut self.grads,
            params: param_grads,
        };
        sink.slot(loss)[0] += 1.0;
        for i in (0..=loss.0).rev() {
            let Some(g) = sink.grads[i].take() else {
                continue;
            };
            let val = |v: Var| resolve(nodes, params, v);
            let gd = g.data();
            match &nodes[i].op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let da = sink.slot(*a);
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gd[r * n + j] * bv.data()[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                    let db = sink.slot(*b);
                    for r in 0..m {
                        for p in 0..k {
                            let x = av.data()[r * k + p];
                            for j in 0..n {
                                db[p * n + j] += x * gd[r * n + j];
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                    let dx = sink.slot(*x);
                    for r in 0..m {
                        for o in 0..n {
                            let go = gd[r * n + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv.data()[o * k..(o + 1) * k];
                            for (d, c) in dx[r * k..(r + 1) * k].iter_mut().zip(wr) {
                                *d += go * c;
                            }
                        }
                    }
                    let dw = sink.slot(*w);
                    for r in 0..m {
                        let xr = &xv.data()[r * k..(r + 1) * k];
                        for o in 0..n {
                            let go = gd[r * n + o];
                            if go == 0.0 {
                                continue;
                            }
                            for (d, a) in dw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                *d += go * a;
                            }
                        }
                    }
                    if let Some(b) = b {
                        let db = sink.slot(*b);
                        for r in 0..m {
                            for o in 0..n {
                                db[o] += gd[r * n + o];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        for (d, x) in sink.slot(v).iter_mut().zip(gd) {
                            *d += x;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a).data(), val(*b).data());
                    for (j, d) in sink.slot(*a).iter_mut().enumerate() {
                        *d += gd[j] * bv[j];
                    }
                    for (j, d) in sink.slot(*b).iter_mut().enumerate() {
                        *d += gd[j] * av[j];
                    }
                }
                Op::AddBias(a, b) => {
                    for (d, x) in sink.slot(*a).iter_mut().zip(gd) {
                        *d += x;
                    }
                    let db = sink.slot(*b);
                    let n = db.len();
                    for (j, x) in gd.iter().enumerate() {
                        db[j % n] += x;
                    }
                }
                Op::Tanh(a) => {
                    let y = nodes[i].value_owned();
                    for (j, d) in sink.slot(*a).iter_mut().enumerate() {
                        *d += gd[j] * (1.0 - y[j] * y[j]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = nodes[i].value_owned();
                    for (j, d) in sink.slot(*a).iter_mut().enumerate() {
                        *d += gd[j] * y[j] * (1.0 - y[j]);
                    }
                }
                Op::Relu(a) => {
                    let x = val(*a).data();
                    for (j, d) in sink.slot(*a).iter_mut().enumerate() {
                        if x[j] > 0.0 {
                            *d += gd[j];
                        }
                    }
                }
                Op::Concat(a, b) => {
                    let p = val(*a).len();
                    for (d, x) in sink.slot(*a).iter_mut().zip(&gd[..p]) {
                        *d += x;
                    }
                    for (d, x) in sink.slot(*b).iter_mut().zip(&gd[p..]) {
                        *d += x;
                    }
                }
                Op::SliceCols { a, start } => {
                    let n = val(*a).cols();
                    let len = g.cols();
                    let da = sink.slot(*a);
                    for r in 0..g.rows() {
                        for c in 0..len {
                            da[r * n + start + c] += gd[r * len + c];
                        }
                    }
                }
                Op::Row { a, row } => {
                    let n = gd.len();
                    for (d, x) in sink.slot(*a)[row * n..(row + 1) * n].iter_mut().zip(gd) {
                        *d += x;
                    }
                }
                Op::Sum(a) => {
                    for d in sink.slot(*a).iter_mut() {
                        *d += gd[0];
                    }
                }
                Op::SumAll(xs) => {
                    for &x in xs {
                        sink.slot(x)[0] += gd[0];
                    }
                }
                Op::Scale(a, c) => {
                    for (d, x) in sink.slot(*a).iter_mut().zip(gd) {
                        *d += c * x;
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    target,
                    probs,
                } => {
                    let dl = sink.slot(*logits);
                    for (j, d) in dl.iter_mut().enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += gd[0] * (probs[j] - onehot);
                    }
                }
                Op::GradReverse { a, lambda } => {
                    if *lambda != 0.0 {
                        for (d, x) in sink.slot(*a).iter_mut().zip(gd) {
                            *d += -lambda * x;
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    for (j, d) in sink.slot(*a).iter_mut().enumerate() {
                        *d += gd[j] * mask[j];
                    }
                }
                Op::Embed { table, ids } => {
                    let dim = g.cols();
                    let dt = sink.slot(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        if id == PAD_ID {
                            continue;
                        }
                        for (d, x) in dt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&gd[r * dim..(r + 1) * dim])
                        {
                            *d += x;
                        }
                    }
                }
                Op::ConvMaxPool {
                    x,
                    w,
                    b,
                    width,
                    argmax,
                    best,
                } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let d = xv.cols();
                    let wd = width * d;
                    let active: Vec<usize> = (0..best.len())
                        .filter(|&m| best[m] > 0.0 && gd[m] != 0.0)
                        .collect();
                    {
                        let db = sink.slot(*b);
                        for &m in &active {
                            db[m] += gd[m];
                        }
                    }
                    {
                        let dw = sink.slot(*w);
                        for &m in &active {
                            let t = argmax[m];
                            let window = &xv.data()[t * d..t * d + wd];
                            for (dd, a) in dw[m * wd..(m + 1) * wd].iter_mut().zip(window) {
                                *dd += gd[m] * a;
                            }
                        }
                    }
                    let dx = sink.slot(*x);
                    for &m in &active {
                        let t = argmax[m];
                        let filt = &wv.data()[m * wd..(m + 1) * wd];
                        for (dd, c) in dx[t * d..t * d + wd].iter_mut().zip(filt) {
                            *dd += gd[m] * c;
                        }
                    }
                }
            }
            sink.grads[i] = Some(g);
        }
        Ok(())
    }
}

impl Node {
    fn value_owned(&self) -> &[f64] {
        match &self.value {
            Value::Owned(t) => t.data(),
            Value::Param(_) => unreachable!("activation nodes own their values"),
        }
    }
}
