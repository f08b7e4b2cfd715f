//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation as a node. Parameters live outside the
//! graph in a [`ParamStore`] and are referenced by [`ParamId`], so building a
//! graph never copies weights. Calling [`Graph::backward`] walks the nodes in
//! reverse creation order, which is always a valid topological order.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a parameter is for; decides which training stage may update it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Base,
    Lora,
    Tan,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Base => "base",
            ParamKind::Lora => "lora",
            ParamKind::Tan => "tan",
        }
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    kinds: Vec<ParamKind>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new tensor. Panics on duplicate names, which would be a
    /// construction bug rather than a runtime condition.
    pub fn add(&mut self, name: impl Into<String>, value: Mat, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.kinds.push(kind);
        self.trainable.push(false);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        assert_eq!(self.values[id.0].dim(), value.dim(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, on: bool) {
        self.trainable[id.0] = on;
    }

    pub fn freeze_all(&mut self) {
        self.trainable.iter_mut().for_each(|t| *t = false);
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.ids().filter(|&id| self.trainable[id.0]).collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.values[id.0].len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm(Var),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    Mean(Var),
    Mse(Var, Var),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
enum Value {
    Owned(Mat),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
    /// Per-row reciprocal standard deviation for layer norm.
    aux: Option<Vec<f64>>,
}

/// A recorded computation. Borrowed parameters stay in their store.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    params: Vec<Option<Mat>>,
    vars: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn var(&self, v: Var) -> Option<&Mat> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(512) }
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

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m.view(),
            Value::Param(id) => self.params.get(*id).view(),
        }
    }

    pub fn to_mat(&self, v: Var) -> Mat {
        self.value(v).to_owned()
    }

    /// Reads a 1×1 node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn push(&mut self, value: Mat, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad, aux: None });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Input, needs_grad: false, aux: None });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is tracked and reported by [`Gradients::var`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Input, needs_grad: true, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.params.is_trainable(id);
        self.nodes.push(Node { value: Value::Param(id), op: Op::Param(id), needs_grad, aux: None });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`, the layout used by every linear layer (weights are out × in).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) - &self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) * &self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// Adds a 1×c row to every row of an n×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = &self.value(a) + &self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let v = &self.value(a) * &self.value(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    /// Multiplies every entry of `a` by the 1×1 node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance, no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (n, c) = x.dim();
        let mut out = Mat::zeros((n, c));
        let mut inv = Vec::with_capacity(n);
        for (r, row) in x.rows().into_iter().enumerate() {
            let mean = row.sum() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            inv.push(istd);
            for (o, v) in out.row_mut(r).iter_mut().zip(row.iter()) {
                *o = (v - mean) * istd;
            }
        }
        let var = self.push(out, Op::LayerNorm(a), &[a]);
        self.nodes[var.0].aux = Some(inv);
        var
    }

    /// Columns `start..start + len`.
    pub fn cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Cols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if parts.len() == 1 {
            return parts[0];
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = m.sum() / m.len() as f64;
        self.push(Mat::from_elem((1, 1), v), Op::Mean(a), &[a])
    }

    /// Rows of `table` picked by `rows` (repeats allowed).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), rows);
        self.push(v, Op::GatherRows(table, rows.to_vec()), &[table])
    }

    /// Mean squared error between `pred` and `target`, summed in row-major order.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let v = mse(self.value(pred), self.value(target));
        self.push(Mat::from_elem((1, 1), v), Op::Mse(pred, target), &[pred, target])
    }

    /// Back-propagates from the 1×1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Option<Mat>> = vec![None; self.params.len()];
        grads[root.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Input => {
                    grads[idx] = Some(g);
                }
                Op::Param(id) => {
                    accumulate(&mut pgrads[id.0], g);
                }
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads[a.0], g.dot(&self.value(*b)));
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], g.t().dot(&self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], -g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        accumulate(&mut grads[a.0], &g * &self.value(*b));
                    }
                    if ng(*b) {
                        accumulate(&mut grads[b.0], &g * &self.value(*a));
                    }
                }
                Op::AddRow(a, r) => {
                    if ng(*r) {
                        accumulate(&mut grads[r.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if ng(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::MulRow(a, r) => {
                    if ng(*r) {
                        let gr = (&g * &self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[r.0], gr);
                    }
                    if ng(*a) {
                        accumulate(&mut grads[a.0], &g * &self.value(*r));
                    }
                }
                Op::MulScalar(a, s) => {
                    if ng(*s) {
                        let gs = (&g * &self.value(*a)).sum();
                        accumulate(&mut grads[s.0], Mat::from_elem((1, 1), gs));
                    }
                    if ng(*a) {
                        let k = self.scalar(*s);
                        accumulate(&mut grads[a.0], g.mapv(|x| x * k));
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads[a.0], g.mapv(|x| x * k));
                }
                Op::Silu(a) => {
                    let mut d = g;
                    d.zip_mut_with(&self.value(*a), |gv, &x| {
                        let sg = sigmoid(x);
                        *gv *= sg * (1.0 + x * (1.0 - sg));
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(idx));
                    let mut d = g;
                    d.zip_mut_with(&y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(idx));
                    let mut d = &g * &y;
                    for (mut drow, (grow, yrow)) in d.rows_mut().into_iter().zip(g.rows().into_iter().zip(y.rows())) {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * dot);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNorm(a) => {
                    let y = self.value(Var(idx));
                    let inv = node.aux.as_ref().expect("layer norm aux");
                    let (n, c) = y.dim();
                    let mut d = Mat::zeros((n, c));
                    for r in 0..n {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mg = gr.sum() / c as f64;
                        let mgy = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            d[[r, j]] = inv[r] * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Cols(a, start) => {
                    let (n, c) = self.shape(*a);
                    let len = g.ncols();
                    let mut d = Mat::zeros((n, c));
                    d.slice_mut(s![.., *start..*start + len]).assign(&g);
                    accumulate(&mut grads[a.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        if ng(*p) {
                            accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        }
                        off += w;
                    }
                }
                Op::Mean(a) => {
                    let (n, c) = self.shape(*a);
                    let k = g[[0, 0]] / (n * c) as f64;
                    accumulate(&mut grads[a.0], Mat::from_elem((n, c), k));
                }
                Op::GatherRows(t, rows) => {
                    let mut d = Mat::zeros(self.shape(*t));
                    for (r, &src) in rows.iter().enumerate() {
                        let mut dst = d.row_mut(src);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads[t.0], d);
                }
                Op::Mse(p, t) => {
                    let k = 2.0 * g[[0, 0]] / self.value(*p).len() as f64;
                    let diff = (&self.value(*p) - &self.value(*t)).mapv(|x| x * k);
                    if ng(*t) {
                        accumulate(&mut grads[t.0], -diff.clone());
                    }
                    if ng(*p) {
                        accumulate(&mut grads[p.0], diff);
                    }
                }
            }
        }
        Gradients { params: pgrads, vars: grads }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(x: ArrayView2<'_, f64>) -> Mat {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean of squared differences, accumulated in row-major order.
pub fn mse(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc / a.len() as f64
}
