//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes;
//! `backward` walks it in reverse and accumulates gradients for every
//! parameter leaf. Embedding rows enter the graph individually so their
//! gradients stay sparse until a whole batch is folded together.
//!
//! Tapes are cheap, single-threaded and transient: build one per utterance,
//! differentiate, throw it away.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::crf;
use crate::tensor::{log_sum_exp, Tensor};

pub type ParamId = usize;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

enum Op {
    Const,
    Param(ParamId),
    /// One row of an embedding matrix; gradient tracked sparsely.
    EmbedRow {
        param: ParamId,
        row: usize,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    /// a: m×n plus b: 1×n broadcast over rows.
    AddRowBroadcast(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    MaxPoolRows(Var, Vec<usize>),
    LogSoftmaxRow(Var),
    Pick(Var, usize),
    /// Inverted-dropout mask (entries 0 or 1/(1-p)), fixed at node creation.
    Dropout(Var, Vec<f64>),
    CrfLogLikelihood {
        emissions: Var,
        transitions: Var,
        tags: Vec<usize>,
    },
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Value {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradients for a set of parameters: dense per-parameter tensors plus
/// sparse embedding rows keyed by (parameter, row).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub dense: Vec<Option<Tensor>>,
    pub rows: BTreeMap<(ParamId, usize), Vec<f64>>,
}

impl Gradients {
    pub fn empty(num_params: usize) -> Self {
        Gradients {
            dense: (0..num_params).map(|_| None).collect(),
            rows: BTreeMap::new(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (slot, grad) in self.dense.iter_mut().zip(&other.dense) {
            if let Some(g) = grad {
                match slot {
                    Some(acc) => acc.add_scaled(g, 1.0),
                    None => *slot = Some(g.clone()),
                }
            }
        }
        for (key, row) in &other.rows {
            match self.rows.get_mut(key) {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                None => {
                    self.rows.insert(*key, row.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.dense.iter_mut().flatten() {
            for v in &mut slot.data {
                *v *= factor;
            }
        }
        for row in self.rows.values_mut() {
            for v in row {
                *v *= factor;
            }
        }
    }

    /// Fold sparse embedding rows into dense tensors. `shape_of` maps a
    /// parameter id to its (rows, cols).
    pub fn densify(&mut self, shape_of: impl Fn(ParamId) -> (usize, usize)) {
        let rows = std::mem::take(&mut self.rows);
        for ((param, row), grad_row) in rows {
            let slot = &mut self.dense[param];
            if slot.is_none() {
                let (r, c) = shape_of(param);
                *slot = Some(Tensor::zeros(r, c));
            }
            let tensor = slot.as_mut().unwrap();
            for (a, b) in tensor.row_mut(row).iter_mut().zip(&grad_row) {
                *a += b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.dense
            .iter()
            .flatten()
            .all(Tensor::is_finite)
            && self.rows.values().all(|r| r.iter().all(|v| v.is_finite()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
    embed_cache: HashMap<(ParamId, usize), Var>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const)
    }

    /// Parameter leaf; repeated requests for the same id share one node.
    pub fn param(&mut self, id: ParamId, value: Arc<Tensor>) -> Var {
        if let Some(&var) = self.param_cache.get(&id) {
            return var;
        }
        self.nodes.push(Node {
            value: Value::Shared(value),
            op: Op::Param(id),
        });
        let var = Var(self.nodes.len() - 1);
        self.param_cache.insert(id, var);
        var
    }

    /// A single row of an embedding-style parameter as a 1×n leaf.
    pub fn embed_row(&mut self, id: ParamId, table: &Tensor, row: usize) -> Var {
        if let Some(&var) = self.embed_cache.get(&(id, row)) {
            return var;
        }
        let value = Tensor::row_vector(table.row(row).to_vec());
        let var = self.push(value, Op::EmbedRow { param: id, row });
        self.embed_cache.insert((id, row), var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "add shape mismatch");
        let mut value = ta.clone();
        value.add_scaled(tb, 1.0);
        self.push(value, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows, 1);
        assert_eq!(ta.cols, tb.cols);
        let mut value = ta.clone();
        for r in 0..value.rows {
            for (v, &w) in value.row_mut(r).iter_mut().zip(&tb.data) {
                *v += w;
            }
        }
        self.push(value, Op::AddRowBroadcast(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "sub shape mismatch");
        let mut value = ta.clone();
        value.add_scaled(tb, -1.0);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|x| x * factor).collect(),
        );
        self.push(value, Op::Scale(a, factor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect(),
        );
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_vec(ta.rows, ta.cols, ta.data.iter().map(|x| x.tanh()).collect());
        self.push(value, Op::Tanh(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let value = Tensor::from_vec(
            ta.rows,
            ta.cols,
            ta.data.iter().map(|&x| gelu_scalar(x)).collect(),
        );
        self.push(value, Op::Gelu(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for r in 0..ta.rows {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let value = Tensor::from_vec(ta.rows, ta.cols + tb.cols, data);
        self.push(value, Op::ConcatCols(a, b))
    }

    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        assert!(!rows.is_empty());
        let cols = self.value(rows[0]).cols;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in &rows {
            let t = self.value(r);
            assert_eq!(t.rows, 1);
            assert_eq!(t.cols, cols);
            data.extend_from_slice(&t.data);
        }
        let value = Tensor::from_vec(rows.len(), cols, data);
        self.push(value, Op::StackRows(rows))
    }

    /// Per-column max over rows -> 1×n. The first maximal row wins ties.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut best = vec![f64::NEG_INFINITY; ta.cols];
        let mut arg = vec![0usize; ta.cols];
        for r in 0..ta.rows {
            for (c, &v) in ta.row(r).iter().enumerate() {
                if v > best[c] {
                    best[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(Tensor::row_vector(best), Op::MaxPoolRows(a, arg))
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, 1);
        let lse = log_sum_exp(&ta.data);
        let value = Tensor::row_vector(ta.data.iter().map(|x| x - lse).collect());
        self.push(value, Op::LogSoftmaxRow(a))
    }

    /// Extract one entry of a 1×n vector as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.rows, 1);
        let value = Tensor::scalar(ta.data[index]);
        self.push(value, Op::Pick(a, index))
    }

    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.numel(), mask.len());
        let data = ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(value, Op::Dropout(a, mask))
    }

    /// log P(tags) under a linear-chain CRF as a scalar node. The backward
    /// pass uses forward–backward marginals.
    pub fn crf_log_likelihood(&mut self, emissions: Var, transitions: Var, tags: Vec<usize>) -> Var {
        let value = crf::log_likelihood(self.value(transitions), self.value(emissions), &tags)
            .expect("crf shapes checked by caller");
        self.push(
            Tensor::scalar(value),
            Op::CrfLogLikelihood {
                emissions,
                transitions,
                tags,
            },
        )
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// parameter leaf reachable from it.
    pub fn backward(&self, root: Var, num_params: usize) -> Gradients {
        assert_eq!(self.value(root).numel(), 1, "backward needs a scalar root");
        let mut node_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        node_grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients::empty(num_params);

        for idx in (0..self.nodes.len()).rev() {
            let grad = match node_grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => match &mut out.dense[*id] {
                    Some(acc) => acc.add_scaled(&grad, 1.0),
                    slot @ None => *slot = Some(grad),
                },
                Op::EmbedRow { param, row } => {
                    let entry = out
                        .rows
                        .entry((*param, *row))
                        .or_insert_with(|| vec![0.0; grad.numel()]);
                    for (a, b) in entry.iter_mut().zip(&grad.data) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = self.value(*b).matmul_transpose_other(&grad);
                    let db = self.value(*a).matmul_transpose_self(&grad);
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, *a, grad.clone());
                    accumulate(&mut node_grads, *b, grad);
                }
                Op::AddRowBroadcast(a, b) => {
                    let cols = grad.cols;
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..grad.rows {
                        for (acc, &g) in db.data.iter_mut().zip(grad.row(r)) {
                            *acc += g;
                        }
                    }
                    accumulate(&mut node_grads, *a, grad);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Sub(a, b) => {
                    let mut db = grad.clone();
                    for v in &mut db.data {
                        *v = -*v;
                    }
                    accumulate(&mut node_grads, *a, grad);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect(),
                    );
                    let db = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Scale(a, factor) => {
                    let mut da = grad;
                    for v in &mut da.data {
                        *v *= factor;
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let value = node.value.tensor();
                    let da = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data
                            .iter()
                            .zip(&value.data)
                            .map(|(g, s)| g * s * (1.0 - s))
                            .collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Tanh(a) => {
                    let value = node.value.tensor();
                    let da = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data
                            .iter()
                            .zip(&value.data)
                            .map(|(g, t)| g * (1.0 - t * t))
                            .collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Gelu(a) => {
                    let input = self.value(*a);
                    let da = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data
                            .iter()
                            .zip(&input.data)
                            .map(|(g, &x)| g * gelu_derivative(x))
                            .collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols;
                    let cb = self.value(*b).cols;
                    let mut da = Tensor::zeros(grad.rows, ca);
                    let mut db = Tensor::zeros(grad.rows, cb);
                    for r in 0..grad.rows {
                        da.row_mut(r).copy_from_slice(&grad.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&grad.row(r)[ca..]);
                    }
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::StackRows(rows) => {
                    for (r, &var) in rows.iter().enumerate() {
                        accumulate(
                            &mut node_grads,
                            var,
                            Tensor::row_vector(grad.row(r).to_vec()),
                        );
                    }
                }
                Op::MaxPoolRows(a, arg) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for (c, (&r, &g)) in arg.iter().zip(&grad.data).enumerate() {
                        da.set(r, c, g);
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::LogSoftmaxRow(a) => {
                    let value = node.value.tensor();
                    let grad_sum: f64 = grad.data.iter().sum();
                    let da = Tensor::row_vector(
                        grad.data
                            .iter()
                            .zip(&value.data)
                            .map(|(g, y)| g - y.exp() * grad_sum)
                            .collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Pick(a, index) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(1, ta.cols);
                    da.data[*index] = grad.data[0];
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Dropout(a, mask) => {
                    let da = Tensor::from_vec(
                        grad.rows,
                        grad.cols,
                        grad.data.iter().zip(mask).map(|(g, m)| g * m).collect(),
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::CrfLogLikelihood {
                    emissions,
                    transitions,
                    tags,
                } => {
                    let g = grad.data[0];
                    let (mut de, mut dt) = crf::log_likelihood_grads(
                        self.value(*transitions),
                        self.value(*emissions),
                        tags,
                    )
                    .expect("crf shapes checked at forward time");
                    for v in &mut de.data {
                        *v *= g;
                    }
                    for v in &mut dt.data {
                        *v *= g;
                    }
                    accumulate(&mut node_grads, *emissions, de);
                    accumulate(&mut node_grads, *transitions, dt);
                }
            }
        }
        out
    }
}

fn accumulate(node_grads: &mut [Option<Tensor>], var: Var, grad: Tensor) {
    match &mut node_grads[var.0] {
        Some(acc) => acc.add_scaled(&grad, 1.0),
        slot @ None => *slot = Some(grad),
    }
}
