//! Tape-style reverse-mode differentiation over dense 2-D values.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s during a forward
//! pass. Parameters are read by reference from a [`ParamStore`]; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates
//! `∂loss/∂param` into a [`Gradients`] buffer.
//!
//! Each forward pass builds a fresh graph. Graphs are cheap, single-threaded
//! and borrow the parameters immutably, so independent evaluation passes may
//! run in parallel over the same store.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// An operation whose forward value is computed by the caller and whose
/// vector-Jacobian product is supplied here.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to every input, given the upstream gradient
    /// `grad` of the output. Returned vectors must match input lengths.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

/// Weighted row selection: output row `i` is `Σ w · src[r]` over `groups[i]`.
pub type RowGroups = Vec<Vec<(usize, f64)>>;

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogSumExp(Var),
    Dropout(Var, Vec<f64>),
    Mse(Var, Var),
    CrossEntropy(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Combine(Var, RowGroups),
    Sum(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: vec![a.rows(), a.cols()],
        right: vec![b.rows(), b.cols()],
    }
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("shape computed from operands")
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode graph: dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamStore, rng: ChaCha8Rng) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            dropout_rng: Some(rng),
        }
    }

    /// Switches dropout on (`Some`) or off (`None`) for subsequent operations.
    pub fn set_dropout_rng(&mut self, rng: Option<ChaCha8Rng>) {
        self.dropout_rng = rng;
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("non-param node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input. Gradients never flow into constants.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A parameter read from the store; trainable parameters receive gradients.
    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (dims(ta), dims(tb));
        if k != k2 {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(mat(m, n, out), Op::MatMulNt(a, b), ng))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1×n` row `row` to every row of `a: m×n`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = dims(ta);
        if dims(tr) != (1, n) {
            return Err(shape_err("add_row", ta, tr));
        }
        let rd = tr.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(rd).map(|(x, y)| x + y))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(mat(m, n, data), Op::AddRow(a, row), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| x + c, Op::AddConst(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        let mut data = Vec::with_capacity(m * n);
        for r in ta.data().chunks(n) {
            data.extend(softmax(r));
        }
        let ng = self.ng(a);
        self.push(mat(m, n, data), Op::Softmax(a), ng)
    }

    /// Row-wise log-sum-exp, `m×n → m×1`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = dims(ta);
        let data = ta.data().chunks(n).map(logsumexp).collect();
        let ng = self.ng(a);
        self.push(mat(m, 1, data), Op::LogSumExp(a), ng)
    }

    /// Inverted dropout. Identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 || self.dropout_rng.is_none() {
            return Ok(a);
        }
        let n = self.value(a).len();
        let rng = self.dropout_rng.as_mut().expect("training graph");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let ta = self.value(a);
        let data = ta.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(value, Op::Dropout(a, mask), ng))
    }

    /// Mean squared error over all components, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if dims(ta) != dims(tb) {
            return Err(shape_err("mse", ta, tb));
        }
        let n = ta.len() as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), ng))
    }

    /// `−log softmax(logits)[target]` for a `1×k` row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        if t.rows() != 1 || target >= t.cols() {
            return Err(Error::Invalid(format!(
                "cross_entropy target {target} for logits of shape {:?}",
                t.shape()
            )));
        }
        let v = logsumexp(t.data()) - t.data()[target];
        let ng = self.ng(logits);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy(logits, target), ng))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).rows();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            n += t.cols();
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(m, n, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != n {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let m = data.len() / n.max(1);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(mat(m, n, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims(t);
        if start + len > m || len == 0 {
            return Err(Error::Invalid(format!("row slice {start}+{len} of {m} rows")));
        }
        let data = t.data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(mat(len, n, data), Op::SliceRows(a, start), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = dims(t);
        if start + len > n || len == 0 {
            return Err(Error::Invalid(format!("column slice {start}+{len} of {n} columns")));
        }
        let data = t
            .data()
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let ng = self.ng(a);
        Ok(self.push(mat(m, len, data), Op::SliceCols(a, start), ng))
    }

    /// Builds a matrix whose row `i` is the weighted sum of `src` rows listed in
    /// `groups[i]`. An empty group yields a zero row. Used for embedding lookup.
    pub fn combine_rows(&mut self, src: Var, groups: RowGroups) -> Result<Var> {
        let t = self.value(src);
        let (m, n) = dims(t);
        let mut data = vec![0.0; groups.len() * n];
        for (i, group) in groups.iter().enumerate() {
            let out = &mut data[i * n..(i + 1) * n];
            for &(r, w) in group {
                if r >= m {
                    return Err(Error::Invalid(format!("row {r} out of range for {m} rows")));
                }
                for (o, x) in out.iter_mut().zip(t.row_slice(r)) {
                    *o += w * x;
                }
            }
        }
        let ng = self.ng(src);
        let rows = groups.len();
        Ok(self.push(mat(rows, n, data), Op::Combine(src, groups), ng))
    }

    /// Sum of all components, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    /// Records an operation whose value was computed outside the graph.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Var {
        let ng = inputs.iter().any(|&v| self.ng(v));
        self.push(value, Op::Custom(op, inputs.to_vec()), ng)
    }

    /// Accumulates `∂loss/∂param` into `grads` for every trainable parameter
    /// reachable from `loss`. Repeated calls accumulate.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) -> Result<()> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut node_grads: Vec<Option<Vec<f64>>> = Vec::new();
        node_grads.resize_with(loss.0 + 1, || None);
        if !self.ng(loss) {
            return Ok(());
        }
        if let Op::Param(id) = self.nodes[loss.0].op {
            grads.buffer(id, 1)[0] += 1.0;
            return Ok(());
        }
        node_grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let out = node.value.as_ref();
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (_, n)) = (dims(ta), dims(tb));
                    if let Some(da) = self.target(&mut node_grads, grads, *a) {
                        let bd = tb.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(db) = self.target(&mut node_grads, grads, *b) {
                        let ad = ta.data();
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                }
                Op::MatMulNt(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let ((m, k), (n, _)) = (dims(ta), dims(tb));
                    if let Some(da) = self.target(&mut node_grads, grads, *a) {
                        let bd = tb.data();
                        for i in 0..m {
                            let drow = &mut da[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (d, bv) in drow.iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                    *d += gv * bv;
                                }
                            }
                        }
                    }
                    if let Some(db) = self.target(&mut node_grads, grads, *b) {
                        let ad = ta.data();
                        for i in 0..m {
                            let arow = &ad[i * k..(i + 1) * k];
                            for j in 0..n {
                                let gv = g[i * n + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(arow) {
                                    *d += gv * av;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(d) = self.target(&mut node_grads, grads, v) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = self.target(&mut node_grads, grads, *b) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(tb.data()) {
                            *d += g * y;
                        }
                    }
                    if let Some(d) = self.target(&mut node_grads, grads, *b) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(ta.data()) {
                            *d += g * x;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = self.target(&mut node_grads, grads, *row) {
                        let n = d.len();
                        for grow in g.chunks(n) {
                            add_into(d, grow);
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g);
                    }
                }
                Op::AddConst(a) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        add_into(d, &g);
                    }
                }
                Op::Tanh(a) => {
                    let y = out.expect("value").data();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = out.expect("value").data();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(y) {
                            *d += g * y * (1.0 - y);
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(x) {
                            if *x > 0.0 {
                                *d += g;
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let y = out.expect("value");
                    let n = y.cols();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((drow, grow), yrow) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.data().chunks(n)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                            for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += y * (g - dot);
                            }
                        }
                    }
                }
                Op::LogSumExp(a) => {
                    let x = self.value(*a);
                    let lse = out.expect("value").data();
                    let n = x.cols();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for (r, (drow, xrow)) in d.chunks_mut(n).zip(x.data().chunks(n)).enumerate() {
                            for (d, x) in drow.iter_mut().zip(xrow) {
                                *d += g[r] * (x - lse[r]).exp();
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                            *d += g * m;
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let c = 2.0 * g[0] / ta.len() as f64;
                    let diff: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| c * (x - y)).collect();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        add_into(d, &diff);
                    }
                    if let Some(d) = self.target(&mut node_grads, grads, *b) {
                        d.iter_mut().zip(&diff).for_each(|(d, x)| *d -= x);
                    }
                }
                Op::CrossEntropy(a, target) => {
                    let p = softmax(self.value(*a).data());
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for (j, (d, p)) in d.iter_mut().zip(p).enumerate() {
                            let onehot = if j == *target { 1.0 } else { 0.0 };
                            *d += g[0] * (p - onehot);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let n = out.expect("value").cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if let Some(d) = self.target(&mut node_grads, grads, p) {
                            for (drow, grow) in d.chunks_mut(w).zip(g.chunks(n)) {
                                add_into(drow, &grow[offset..offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.value(p).len();
                        if let Some(d) = self.target(&mut node_grads, grads, p) {
                            add_into(d, &g[offset..offset + len]);
                        }
                        offset += len;
                    }
                }
                Op::SliceRows(a, start) => {
                    let n = self.value(*a).cols();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        add_into(&mut d[start * n..start * n + g.len()], &g);
                    }
                }
                Op::SliceCols(a, start) => {
                    let n = self.value(*a).cols();
                    let w = out.expect("value").cols();
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        for (drow, grow) in d.chunks_mut(n).zip(g.chunks(w)) {
                            add_into(&mut drow[*start..start + w], grow);
                        }
                    }
                }
                Op::Combine(src, groups) => {
                    let n = self.value(*src).cols();
                    if let Some(d) = self.target(&mut node_grads, grads, *src) {
                        for (i, group) in groups.iter().enumerate() {
                            let grow = &g[i * n..(i + 1) * n];
                            for &(r, w) in group {
                                for (d, g) in d[r * n..(r + 1) * n].iter_mut().zip(grow) {
                                    *d += w * g;
                                }
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(d) = self.target(&mut node_grads, grads, *a) {
                        d.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Custom(op, inputs) => {
                    let tensors: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&tensors, out.expect("value"), &g);
                    for (&v, din) in inputs.iter().zip(dins) {
                        if let Some(d) = self.target(&mut node_grads, grads, v) {
                            add_into(d, &din);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient buffer that contributions to `v` should be added into, or
    /// `None` when `v` does not need a gradient.
    fn target<'b>(
        &self,
        node_grads: &'b mut [Option<Vec<f64>>],
        grads: &'b mut Gradients,
        v: Var,
    ) -> Option<&'b mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let len = self.value(v).len();
        match node.op {
            Op::Param(id) => Some(grads.buffer(id, len)),
            _ => Some(node_grads[v.0].get_or_insert_with(|| vec![0.0; len])),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax of one row.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Overflow-safe `log Σ exp(x)`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone(), true).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        for x in p {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn logsumexp_does_not_overflow() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn mse_of_equal_inputs_is_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::row(vec![1.0, 2.0]));
        let b = g.constant(Tensor::row(vec![1.0, 2.0]));
        let l = g.mse(a, b).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn square_has_gradient_two_x() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x).unwrap();
        let mut grads = Gradients::new(&store);
        g.backward(y, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[6.0]);
    }

    #[test]
    fn mse_gradient_uses_mean_convention() {
        let (store, ids) = store_with(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let zero = g.constant(Tensor::row(vec![0.0, 0.0]));
        let l = g.mse(x, zero).unwrap();
        let mut grads = Gradients::new(&store);
        g.backward(l, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(2.0)), ("unused", Tensor::row(vec![1.0, 1.0]))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.scale(x, 4.0);
        let mut grads = Gradients::new(&store);
        g.backward(y, &mut grads).unwrap();
        assert_eq!(grads.dense(ids[1], &store), vec![0.0, 0.0]);
        assert!(grads.get(ids[1]).is_none());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x).unwrap();
        let mut grads = Gradients::new(&store);
        g.backward(y, &mut grads).unwrap();
        g.backward(y, &mut grads).unwrap();
        assert_eq!(grads.get(ids[0]).unwrap(), &[12.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, ids) = store_with(&[("x", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.tanh(x);
        let mut grads = Gradients::new(&store);
        assert!(matches!(g.backward(y, &mut grads), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn dropout_is_identity_in_eval_and_at_zero() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(a, 0.5).unwrap(), a);
        let mut g = Graph::training(&store, ChaCha8Rng::seed_from_u64(1));
        let a = g.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(a, 0.0).unwrap(), a);
        assert!(g.dropout(a, 1.0).is_err());
    }

    #[test]
    fn dropout_scales_kept_units() {
        let store = ParamStore::new();
        let mut g = Graph::training(&store, ChaCha8Rng::seed_from_u64(7));
        let a = g.constant(Tensor::row(vec![1.0; 64]));
        let d = g.dropout(a, 0.25).unwrap();
        for &x in g.value(d).data() {
            assert!(x == 0.0 || (x - 1.0 / 0.75).abs() < 1e-12);
        }
    }
}
