//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse once and
//! returns [`Gradients`] for every leaf that asked for one. Parameters live
//! in a [`ParamStore`] outside the tape and are shared into it by reference
//! count, so building a tape never copies weights.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tensor::{matmul_nt_into, matmul_tn_into, Tensor};
use crate::error::{Error, Result};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
    /// Frozen parameters enter tapes as constants and never receive gradients.
    pub frozen: bool,
}

/// Named, ordered collection of trainable tensors. Every store, including
/// each clone, carries its own identity so two stores can share one tape.
#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    uid: u64,
}

fn next_store_uid() -> u64 {
    static NEXT: AtomicU64 = AtomicU64::new(0);
    NEXT.fetch_add(1, Ordering::Relaxed)
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            uid: next_store_uid(),
        }
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            index: self.index.clone(),
            uid: next_store_uid(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            frozen: false,
        });
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Mutable access; clones the tensor only if a live tape still shares it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = &self.params[id.0].value;
        if cur.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.params[id.0].name,
                cur.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Relu(usize),
    Softmax(usize, Axis),
    LogSoftmax(usize, Axis),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Sum(usize),
    Mean(usize),
    Pick(usize, Vec<(usize, usize)>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation for one backward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<HashMap<(u64, ParamId), usize>>,
    grad_enabled: bool,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
            grad_enabled: true,
            consumed: Cell::new(false),
        }
    }

    /// A tape that evaluates without recording any gradient information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad, None)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var<'_> {
        let needs_grad = needs_grad && self.grad_enabled;
        let op = if needs_grad { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Shares a stored parameter into the tape. Repeated calls return the
    /// same node, so gradients from every use accumulate on one leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.uid, id);
        if let Some(&node) = self.param_nodes.borrow().get(&key) {
            return Var { tape: self, id: node };
        }
        let p = store.param(id);
        let var = self.push_arc(Arc::clone(&p.value), Op::Leaf, !p.frozen, Some(id));
        self.param_nodes.borrow_mut().insert(key, var.id);
        var
    }

    /// Like [`Tape::param`] but always as a constant, regardless of the
    /// frozen flag. Used to hold one model fixed while training another.
    pub fn param_const(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.param_nodes.borrow().get(&(store.uid, id)) {
            if !self.needs(node) {
                return Var { tape: self, id: node };
            }
        }
        let p = store.param(id);
        self.push_arc(Arc::clone(&p.value), Op::Leaf, false, None)
    }

    /// Row lookup into an embedding table; out-of-range ids are an index error.
    pub fn gather<'a>(&'a self, table: Var<'a>, ids: &[usize]) -> Result<Var<'a>> {
        let t = table.value();
        let d = t.cols();
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::Index(format!(
                "row {bad} out of range for table with {} rows",
                t.rows()
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row_slice(i));
        }
        let value = Tensor::new(ids.len(), d, out)?;
        Ok(self.push(value, Op::Gather(table.id, ids.to_vec()), table.needs_grad()))
    }

    pub fn concat_cols<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows();
        if vals.iter().any(|v| v.rows() != rows) {
            return Err(Error::Dimension("concat_cols with differing row counts".into()));
        }
        let cols: usize = vals.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row_slice(r));
            }
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(self.push(
            Tensor::new(rows, cols, out)?,
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    pub fn concat_rows<'a>(&'a self, parts: &[Var<'a>]) -> Result<Var<'a>> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].cols();
        if vals.iter().any(|v| v.cols() != cols) {
            return Err(Error::Dimension("concat_rows with differing column counts".into()));
        }
        let rows: usize = vals.iter().map(|v| v.rows()).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for v in &vals {
            out.extend_from_slice(v.data());
        }
        let needs = parts.iter().any(|p| p.needs_grad());
        Ok(self.push(
            Tensor::new(rows, cols, out)?,
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            needs,
        ))
    }

    /// Runs the reverse pass from a scalar `loss`. A tape supports exactly
    /// one backward pass.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if self.consumed.replace(true) {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if !self.grad_enabled {
            return Err(Error::Contract("backward on an inference tape".into()));
        }
        let nodes = self.nodes.borrow();
        let loss_val = &nodes[loss.id].value;
        if loss_val.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_val.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut by_param = HashMap::new();
        let mut by_node = HashMap::new();
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &nodes[id];
            if !node.needs_grad || !matches!(node.op, Op::Leaf) {
                continue;
            }
            let [r, c] = node.value.shape();
            let t = Tensor::new(r, c, g)?;
            if let Some(pid) = node.param {
                by_param.insert(pid, t);
            } else {
                by_node.insert(id, t);
            }
        }
        Ok(Gradients { by_param, by_node })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if needs(a) {
                let ga = accumulate(grads, a, m * k);
                matmul_nt_into(g, bv.data(), ga, m, n, k);
            }
            if needs(b) {
                let gb = accumulate(grads, b, k * n);
                matmul_tn_into(av.data(), g, gb, m, k, n);
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            let ga = accumulate(grads, a, r * c);
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] += g[i * c + j];
                }
            }
        }
        &Op::Add(a, b) => {
            for x in [a, b] {
                if needs(x) {
                    add_into(accumulate(grads, x, g.len()), g, 1.0);
                }
            }
        }
        &Op::Sub(a, b) => {
            if needs(a) {
                add_into(accumulate(grads, a, g.len()), g, 1.0);
            }
            if needs(b) {
                add_into(accumulate(grads, b, g.len()), g, -1.0);
            }
        }
        &Op::AddRow(a, row) => {
            if needs(a) {
                add_into(accumulate(grads, a, g.len()), g, 1.0);
            }
            if needs(row) {
                let n = out.cols();
                let gr = accumulate(grads, row, n);
                for chunk in g.chunks(n) {
                    add_into(gr, chunk, 1.0);
                }
            }
        }
        &Op::Mul(a, b) => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if needs(a) {
                let ga = accumulate(grads, a, g.len());
                for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                    *o += gi * bi;
                }
            }
            if needs(b) {
                let gb = accumulate(grads, b, g.len());
                for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(av.data()) {
                    *o += gi * ai;
                }
            }
        }
        &Op::Affine(a, scale) => {
            add_into(accumulate(grads, a, g.len()), g, scale);
        }
        &Op::Tanh(a) => {
            let ga = accumulate(grads, a, g.len());
            for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                *o += gi * (1.0 - y * y);
            }
        }
        &Op::Relu(a) => {
            let av = &nodes[a].value;
            let ga = accumulate(grads, a, g.len());
            for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                if x > 0.0 {
                    *o += gi;
                }
            }
        }
        &Op::Softmax(a, axis) => {
            let ga = accumulate(grads, a, g.len());
            for_each_lane(out.rows(), out.cols(), axis, |idx| {
                let dot: f64 = idx.iter().map(|&i| g[i] * out.data()[i]).sum();
                for &i in idx {
                    ga[i] += out.data()[i] * (g[i] - dot);
                }
            });
        }
        &Op::LogSoftmax(a, axis) => {
            let ga = accumulate(grads, a, g.len());
            for_each_lane(out.rows(), out.cols(), axis, |idx| {
                let total: f64 = idx.iter().map(|&i| g[i]).sum();
                for &i in idx {
                    ga[i] += g[i] - out.data()[i].exp() * total;
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let (r, c) = (out.rows(), out.cols());
            let gain_v = &nodes[*gain].value;
            if needs(*gain) {
                let gg = accumulate(grads, *gain, c);
                for i in 0..r {
                    for j in 0..c {
                        gg[j] += g[i * c + j] * normalized[i * c + j];
                    }
                }
            }
            if needs(*bias) {
                let gb = accumulate(grads, *bias, c);
                for chunk in g.chunks(c) {
                    add_into(gb, chunk, 1.0);
                }
            }
            if needs(*x) {
                let gx = accumulate(grads, *x, r * c);
                let inv_c = 1.0 / c as f64;
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dxhat: Vec<f64> = row
                        .clone()
                        .map(|k| g[k] * gain_v.data()[k - i * c])
                        .collect();
                    let mean_d: f64 = dxhat.iter().sum::<f64>() * inv_c;
                    let mean_dx: f64 = dxhat
                        .iter()
                        .zip(&normalized[row.clone()])
                        .map(|(d, xh)| d * xh)
                        .sum::<f64>()
                        * inv_c;
                    for (j, k) in row.enumerate() {
                        gx[k] += inv_std[i] * (dxhat[j] - mean_d - normalized[k] * mean_dx);
                    }
                }
            }
        }
        Op::Gather(table, ids) => {
            let d = out.cols();
            let t = &nodes[*table].value;
            let gt = accumulate(grads, *table, t.len());
            for (r, &row) in ids.iter().enumerate() {
                add_into(&mut gt[row * d..(row + 1) * d], &g[r * d..(r + 1) * d], 1.0);
            }
        }
        Op::ConcatCols(parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if needs(p) {
                    let gp = accumulate(grads, p, rows * w);
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * w..(r + 1) * w],
                            &g[r * total + offset..r * total + offset + w],
                            1.0,
                        );
                    }
                }
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                if needs(p) {
                    add_into(accumulate(grads, p, len), &g[offset..offset + len], 1.0);
                }
                offset += len;
            }
        }
        &Op::SliceRows(a, start) => {
            let c = out.cols();
            let len = nodes[a].value.len();
            let ga = accumulate(grads, a, len);
            add_into(&mut ga[start * c..start * c + g.len()], g, 1.0);
        }
        &Op::SliceCols(a, start) => {
            let src = &nodes[a].value;
            let (r, w, c) = (out.rows(), out.cols(), src.cols());
            let ga = accumulate(grads, a, src.len());
            for i in 0..r {
                add_into(
                    &mut ga[i * c + start..i * c + start + w],
                    &g[i * w..(i + 1) * w],
                    1.0,
                );
            }
        }
        &Op::Sum(a) => {
            let len = nodes[a].value.len();
            let ga = accumulate(grads, a, len);
            for o in ga.iter_mut() {
                *o += g[0];
            }
        }
        &Op::Mean(a) => {
            let len = nodes[a].value.len();
            let ga = accumulate(grads, a, len);
            let s = g[0] / len as f64;
            for o in ga.iter_mut() {
                *o += s;
            }
        }
        Op::Pick(a, idx) => {
            let src = &nodes[*a].value;
            let c = src.cols();
            let ga = accumulate(grads, *a, src.len());
            for (k, &(r, col)) in idx.iter().enumerate() {
                ga[r * c + col] += g[k];
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Calls `f` with the flat indices of each softmax lane.
fn for_each_lane(rows: usize, cols: usize, axis: Axis, mut f: impl FnMut(&[usize])) {
    match axis {
        Axis::Cols => {
            let mut idx: Vec<usize> = Vec::with_capacity(cols);
            for r in 0..rows {
                idx.clear();
                idx.extend(r * cols..(r + 1) * cols);
                f(&idx);
            }
        }
        Axis::Rows => {
            let mut idx: Vec<usize> = Vec::with_capacity(rows);
            for c in 0..cols {
                idx.clear();
                idx.extend((0..rows).map(|r| r * cols + c));
                f(&idx);
            }
        }
    }
}

fn softmax_lanes(x: &Tensor, axis: Axis, log: bool) -> Result<Tensor> {
    if !x.is_finite() {
        return Err(Error::Numeric("non-finite softmax input".into()));
    }
    let mut out = vec![0.0; x.len()];
    let data = x.data();
    for_each_lane(x.rows(), x.cols(), axis, |idx| {
        let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = idx.iter().map(|&i| (data[i] - max).exp()).sum();
        let log_total = total.ln();
        for &i in idx {
            out[i] = if log {
                data[i] - max - log_total
            } else {
                (data[i] - max).exp() / total
            };
        }
    });
    Tensor::new(x.rows(), x.cols(), out)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.needs(self.id)
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.needs_grad())
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.needs_grad() || other.needs_grad();
        self.tape.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::Dimension(format!("{what}: {a:?} vs {b:?}")));
        }
        Ok(())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    /// `self · otherᵀ` without materializing the transpose on the tape.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        let t = other.transpose();
        self.matmul(t)
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(a.rows(), a.cols(), data)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(a.rows(), a.cols(), data)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(a.rows(), a.cols(), data)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 × n` row to every row of `self`.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), row.value());
        if b.rows() != 1 || b.cols() != a.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {:?} + {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = a.cols();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b.data()[i % n])
            .collect();
        let v = Tensor::new(a.rows(), n, data)?;
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Elementwise `scale · x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let v = self.value().map(|x| scale * x + shift);
        self.unary(v, Op::Affine(self.id, scale))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Logistic function expressed through `tanh`.
    pub fn sigmoid(self) -> Var<'t> {
        self.scale(0.5).tanh().affine(0.5, 0.5)
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn softmax(self, axis: Axis) -> Result<Var<'t>> {
        let v = softmax_lanes(&self.value(), axis, false)?;
        Ok(self.unary(v, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: Axis) -> Result<Var<'t>> {
        let v = softmax_lanes(&self.value(), axis, true)?;
        Ok(self.unary(v, Op::LogSoftmax(self.id, axis)))
    }

    /// Row-wise layer normalization with learned `gain` and `bias` rows.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let (gv, bv) = (gain.value(), bias.value());
        if gv.shape() != [1, c] || bv.shape() != [1, c] {
            return Err(Error::Dimension("layer_norm gain/bias must be 1 x cols".into()));
        }
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row_slice(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                normalized[i * c + j] = xh;
                out[i * c + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let needs = self.needs_grad() || gain.needs_grad() || bias.needs_grad();
        let op = Op::LayerNorm {
            x: self.id,
            gain: gain.id,
            bias: bias.id,
            normalized,
            inv_std,
        };
        Ok(self.tape.push(Tensor::new(r, c, out)?, op, needs))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start + len > x.rows() {
            return Err(Error::Index(format!(
                "rows {start}..{} of {}",
                start + len,
                x.rows()
            )));
        }
        let c = x.cols();
        let v = Tensor::new(len, c, x.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        if start + len > x.cols() {
            return Err(Error::Index(format!(
                "cols {start}..{} of {}",
                start + len,
                x.cols()
            )));
        }
        let mut data = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            data.extend_from_slice(&x.row_slice(r)[start..start + len]);
        }
        let v = Tensor::new(x.rows(), len, data)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        Ok(self.unary(v, Op::Mean(self.id)))
    }

    /// Selects entries at `(row, col)` into a `1 × k` row.
    pub fn pick(self, idx: &[(usize, usize)]) -> Result<Var<'t>> {
        let x = self.value();
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= x.rows() || c >= x.cols() {
                return Err(Error::Index(format!(
                    "pick ({r},{c}) from {:?}",
                    x.shape()
                )));
            }
            data.push(x.get(r, c));
        }
        let v = Tensor::row(data);
        Ok(self.unary(v, Op::Pick(self.id, idx.to_vec())))
    }

    /// Mean squared difference against a constant target of the same shape.
    pub fn mse(self, target: &Tensor) -> Result<Var<'t>> {
        let t = self.tape.constant(target.clone());
        let d = self.sub(t)?;
        d.mul(d)?.mean()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.by_node.get(&var.id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    /// Merges `other` into `self` by addition.
    pub fn accumulate(&mut self, other: Gradients) {
        for (k, v) in other.by_param {
            match self.by_param.get_mut(&k) {
                Some(cur) => {
                    for (a, b) in cur.data_mut().iter_mut().zip(v.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.by_param.insert(k, v);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.by_param.values_mut() {
            for x in v.data_mut() {
                *x *= s;
            }
        }
    }

    /// L2 norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        let mut keys: Vec<_> = self.by_param.keys().copied().collect();
        keys.sort();
        keys.iter()
            .flat_map(|k| self.by_param[k].data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let loss = x.sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn square_at_three() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let loss = x.mul(x).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn second_backward_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn non_scalar_loss_is_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::row(vec![0.0, 0.0, 0.0]));
        let s = x.softmax(Axis::Cols).unwrap().value();
        for &p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::row(vec![1f64.ln(), 3f64.ln()]));
        let s = x.softmax(Axis::Cols).unwrap().value();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let tape = Tape::inference();
        let x = tape.constant(Tensor::row(vec![0.0, f64::NAN]));
        assert!(matches!(x.softmax(Axis::Cols), Err(Error::Numeric(_))));
    }

    #[test]
    fn gather_lookup_and_scatter() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let row = tape.gather(table, &[1]).unwrap();
        assert_eq!(row.value().data(), &[3.0, 4.0]);

        let twice = tape.gather(table, &[0, 0]).unwrap();
        let weights = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![10.0, 20.0]]).unwrap());
        let loss = twice.mul(weights).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(table).unwrap().data(), &[11.0, 22.0, 0.0, 0.0]);
    }

    #[test]
    fn gather_empty_and_out_of_range() {
        let tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(2, 3));
        assert_eq!(tape.gather(table, &[]).unwrap().shape(), [0, 3]);
        assert!(matches!(tape.gather(table, &[2]), Err(Error::Index(_))));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(2.0));
        let f = store.insert("f", Tensor::scalar(5.0));
        store.set_frozen(f, true);
        let tape = Tape::new();
        let loss = tape
            .param(&store, w)
            .mul(tape.param(&store, f))
            .unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().data(), &[5.0]);
        assert!(g.param(f).is_none());
    }

    #[test]
    fn param_reuse_accumulates() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::scalar(3.0));
        let tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        let loss = a.mul(b).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn stores_sharing_ids_stay_distinct() {
        let mut a = ParamStore::new();
        let wa = a.insert("w", Tensor::scalar(1.0));
        let mut b = a.clone();
        b.set(wa, Tensor::scalar(4.0)).unwrap();
        for tape in [Tape::new(), Tape::inference()] {
            assert_eq!(tape.param(&a, wa).item().unwrap(), 1.0);
            assert_eq!(tape.param_const(&b, wa).item().unwrap(), 4.0);
            assert_eq!(tape.param(&b, wa).item().unwrap(), 4.0);
        }
    }
}
