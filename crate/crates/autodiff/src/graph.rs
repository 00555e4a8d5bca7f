//! Define-then-run computation graphs with reverse-mode gradients.
//!
//! Nodes are appended in topological order, so a forward pass is a single sweep
//! over the node list and a backward pass is the reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use crate::array::{log_softmax_row, matmul_acc, matmul_nt_acc, matmul_tn_acc, Array};
use crate::error::{AutodiffError, Result};

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub usize);

/// A user-supplied elementwise function with its derivative.
///
/// Lets callers add nonlinearities without touching the core op set; the
/// gradient checker treats it like any other op.
#[derive(Clone, Copy)]
pub struct ElementwiseFn {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

impl std::fmt::Debug for ElementwiseFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ElementwiseFn({})", self.name)
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    Input(String),
    Constant(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    /// Adds a `[c]` vector to every row of an `[r, c]` matrix.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Selects rows of a 2-D table (embedding lookup).
    Gather(NodeId, Vec<usize>),
    /// Concatenates along the last axis; scalars stack into a vector.
    Concat(Vec<NodeId>),
    LogSoftmax(NodeId),
    /// Row-wise softmax of a square matrix restricted to columns `<= row`.
    CausalSoftmax(NodeId),
    /// Picks `(row, col)` elements of a 2-D array into a vector.
    Pick(NodeId, Vec<(usize, usize)>),
    Sum(NodeId),
    Mean(NodeId),
    Gelu(NodeId),
    /// Row-wise `x / sqrt(mean(x^2) + eps)` without a learned gain.
    RmsNorm(NodeId),
    /// `ln(1 + e^x)`, so `-ln sigmoid(z) == softplus(-z)`.
    Softplus(NodeId),
    Map(NodeId, ElementwiseFn),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Gather(..) => "gather",
            Op::Concat(..) => "concat",
            Op::LogSoftmax(..) => "log_softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::Pick(..) => "pick",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Gelu(..) => "gelu",
            Op::RmsNorm(..) => "rms_norm",
            Op::Softplus(..) => "softplus",
            Op::Map(_, f) => f.name,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Array>,
}

/// Named input arrays for a forward pass.
pub trait Bindings {
    fn lookup(&self, name: &str) -> Option<&Array>;
}

impl Bindings for HashMap<String, Array> {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.get(name)
    }
}

impl Bindings for BTreeMap<String, Array> {
    fn lookup(&self, name: &str) -> Option<&Array> {
        self.get(name)
    }
}

/// Gradients of a scalar root with respect to every named input.
pub type Gradients = BTreeMap<String, Array>;

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    grads: Vec<Option<Array>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op, value: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Declares a named input. Declaring the same name twice returns the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(a, k))
    }

    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Shift(a, c))
    }

    pub fn add_row(&mut self, m: NodeId, v: NodeId) -> NodeId {
        self.push(Op::AddRow(m, v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn gather(&mut self, table: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::Gather(table, indices))
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(Op::Concat(parts))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::CausalSoftmax(a))
    }

    pub fn pick(&mut self, a: NodeId, at: Vec<(usize, usize)>) -> NodeId {
        self.push(Op::Pick(a, at))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn rms_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::RmsNorm(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softplus(a))
    }

    pub fn map(&mut self, a: NodeId, f: ElementwiseFn) -> NodeId {
        self.push(Op::Map(a, f))
    }

    /// `a * a`, expressed through `mul` so fan-out accumulation is exercised.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    /// Sum of a list of same-shape nodes, left to right.
    pub fn add_all(&mut self, terms: &[NodeId]) -> Option<NodeId> {
        let (&first, rest) = terms.split_first()?;
        Some(rest.iter().fold(first, |acc, &t| self.add(acc, t)))
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn value(&self, id: NodeId) -> Result<&Array> {
        self.nodes
            .get(id.0)
            .and_then(|n| n.value.as_ref())
            .ok_or(AutodiffError::NotEvaluated(id))
    }

    /// Gradient of the last backward root with respect to `id`, if it was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Evaluates every node up to and including `root` and returns the root value.
    pub fn forward(&mut self, root: NodeId, inputs: &dyn Bindings) -> Result<&Array> {
        for i in 0..=root.0 {
            let value = self.eval_node(NodeId(i), inputs)?;
            if !value.all_finite() {
                return Err(AutodiffError::NonFinite {
                    node: NodeId(i),
                    op: self.nodes[i].op.name(),
                });
            }
            self.nodes[i].value = Some(value);
        }
        self.grads.clear();
        self.value(root)
    }

    fn val(&self, id: NodeId) -> Result<&Array> {
        self.value(id)
    }

    fn eval_node(&self, id: NodeId, inputs: &dyn Bindings) -> Result<Array> {
        let op = &self.nodes[id.0].op;
        let name = op.name();
        let out = match op {
            Op::Input(key) => inputs
                .lookup(key)
                .cloned()
                .ok_or_else(|| AutodiffError::UnboundInput(key.clone()))?,
            Op::Constant(a) => a.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                same_shape(name, a, b)?;
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Array::new(a.shape().to_vec(), data)?
            }
            Op::Scale(a, k) => self.val(*a)?.map(|v| v * k),
            Op::Shift(a, c) => self.val(*a)?.map(|v| v + c),
            Op::AddRow(m, v) => {
                let (m, v) = (self.val(*m)?, self.val(*v)?);
                if m.shape().len() != 2 || v.shape() != [m.cols()] {
                    return Err(mismatch(name, &[m, v]));
                }
                let mut out = m.clone();
                let c = m.cols();
                for row in out.data_mut().chunks_mut(c) {
                    for (o, b) in row.iter_mut().zip(v.data()) {
                        *o += b;
                    }
                }
                out
            }
            Op::MatMul(a, b) => {
                let (a, b) = (self.val(*a)?, self.val(*b)?);
                if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(mismatch(name, &[a, b]));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let mut out = Array::zeros(&[m, n]);
                matmul_acc(a.data(), b.data(), out.data_mut(), m, k, n);
                out
            }
            Op::Transpose(a) => {
                let a = self.val(*a)?;
                require_2d(name, a)?;
                transpose(a)
            }
            Op::Gather(t, idx) => {
                let t = self.val(*t)?;
                require_2d(name, t)?;
                if idx.is_empty() {
                    return Err(mismatch(name, &[t]));
                }
                let (rows, c) = (t.rows(), t.cols());
                let mut data = Vec::with_capacity(idx.len() * c);
                for &r in idx {
                    if r >= rows {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: name,
                            index: r,
                            bound: rows,
                        });
                    }
                    data.extend_from_slice(t.row(r));
                }
                Array::new(vec![idx.len(), c], data)?
            }
            Op::Concat(parts) => {
                let arrays = parts
                    .iter()
                    .map(|&p| self.val(p))
                    .collect::<Result<Vec<_>>>()?;
                concat(name, &arrays)?
            }
            Op::LogSoftmax(a) => {
                let a = self.val(*a)?;
                let c = a.cols();
                let mut out = Array::zeros(a.shape());
                for (src, dst) in a.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
                    log_softmax_row(src, dst);
                }
                out
            }
            Op::CausalSoftmax(a) => {
                let a = self.val(*a)?;
                if a.shape().len() != 2 || a.shape()[0] != a.shape()[1] {
                    return Err(mismatch(name, &[a]));
                }
                let n = a.rows();
                let mut out = Array::zeros(a.shape());
                for i in 0..n {
                    let src = &a.row(i)[..=i];
                    let dst = &mut out.data_mut()[i * n..i * n + i + 1];
                    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = (s - max).exp();
                        z += *d;
                    }
                    for d in dst.iter_mut() {
                        *d /= z;
                    }
                }
                out
            }
            Op::Pick(a, at) => {
                let a = self.val(*a)?;
                require_2d(name, a)?;
                if at.is_empty() {
                    return Err(mismatch(name, &[a]));
                }
                let mut data = Vec::with_capacity(at.len());
                for &(r, c) in at {
                    if r >= a.rows() || c >= a.cols() {
                        return Err(AutodiffError::IndexOutOfRange {
                            op: name,
                            index: r.max(c),
                            bound: if r >= a.rows() { a.rows() } else { a.cols() },
                        });
                    }
                    data.push(a.get2(r, c));
                }
                Array::vector(data)
            }
            Op::Sum(a) => Array::scalar(self.val(*a)?.data().iter().sum()),
            Op::Mean(a) => {
                let a = self.val(*a)?;
                Array::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
            }
            Op::Gelu(a) => self.val(*a)?.map(gelu),
            Op::RmsNorm(a) => {
                let a = self.val(*a)?;
                let c = a.cols();
                let mut out = a.clone();
                for row in out.data_mut().chunks_mut(c) {
                    let r = rms(row);
                    for v in row.iter_mut() {
                        *v /= r;
                    }
                }
                out
            }
            Op::Softplus(a) => self.val(*a)?.map(softplus),
            Op::Map(a, f) => self.val(*a)?.map(f.f),
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar root. Returns the gradient for every declared
    /// input; inputs the root does not depend on get zeros.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        let root_value = self.value(root)?;
        if root_value.len() != 1 {
            return Err(AutodiffError::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array::full(root_value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(NodeId(i), &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut out = Gradients::new();
        for (name, &id) in &self.inputs {
            let g = match grads.get(id.0).and_then(Option::as_ref) {
                Some(g) => g.clone(),
                None => match self.nodes[id.0].value.as_ref() {
                    Some(v) => Array::zeros(v.shape()),
                    None => continue,
                },
            };
            out.insert(name.clone(), g);
        }
        self.grads = grads;
        Ok(out)
    }

    fn propagate(&self, id: NodeId, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let node = &self.nodes[id.0];
        let out = node.value.as_ref().ok_or(AutodiffError::NotEvaluated(id))?;
        match &node.op {
            Op::Input(_) | Op::Constant(_) => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone(), self)?;
                accumulate(grads, *b, g.clone(), self)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone(), self)?;
                accumulate(grads, *b, g.map(|v| -v), self)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                accumulate(grads, *a, zip_map(g, bv, |x, y| x * y), self)?;
                accumulate(grads, *b, zip_map(g, av, |x, y| x * y), self)?;
            }
            Op::Scale(a, k) => accumulate(grads, *a, g.map(|v| v * k), self)?,
            Op::Shift(a, _) => accumulate(grads, *a, g.clone(), self)?,
            Op::AddRow(m, v) => {
                let c = g.cols();
                let mut gv = Array::zeros(&[c]);
                for row in g.data().chunks(c) {
                    for (o, x) in gv.data_mut().iter_mut().zip(row) {
                        *o += x;
                    }
                }
                accumulate(grads, *m, g.clone(), self)?;
                accumulate(grads, *v, gv, self)?;
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a)?, self.val(*b)?);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = Array::zeros(av.shape());
                matmul_nt_acc(g.data(), bv.data(), ga.data_mut(), m, n, k);
                let mut gb = Array::zeros(bv.shape());
                matmul_tn_acc(av.data(), g.data(), gb.data_mut(), m, k, n);
                accumulate(grads, *a, ga, self)?;
                accumulate(grads, *b, gb, self)?;
            }
            Op::Transpose(a) => accumulate(grads, *a, transpose(g), self)?,
            Op::Gather(t, idx) => {
                let tv = self.val(*t)?;
                let c = tv.cols();
                let mut gt = Array::zeros(tv.shape());
                for (row, &r) in g.data().chunks(c).zip(idx) {
                    for (o, x) in gt.data_mut()[r * c..(r + 1) * c].iter_mut().zip(row) {
                        *o += x;
                    }
                }
                accumulate(grads, *t, gt, self)?;
            }
            Op::Concat(parts) => {
                let rows = g.len() / g.cols();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p)?;
                    let c = if pv.shape().is_empty() { 1 } else { pv.cols() };
                    let mut gp = Array::zeros(pv.shape());
                    for r in 0..rows {
                        gp.data_mut()[r * c..(r + 1) * c]
                            .copy_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                    accumulate(grads, p, gp, self)?;
                }
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Array::zeros(out.shape());
                for ((y, gy), dst) in out
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(ga.data_mut().chunks_mut(c))
                {
                    let total: f64 = gy.iter().sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(gy) {
                        *d = gv - yv.exp() * total;
                    }
                }
                accumulate(grads, *a, ga, self)?;
            }
            Op::CausalSoftmax(a) => {
                let n = out.rows();
                let mut ga = Array::zeros(out.shape());
                for i in 0..n {
                    let p = &out.row(i)[..=i];
                    let gy = &g.row(i)[..=i];
                    let dot: f64 = p.iter().zip(gy).map(|(x, y)| x * y).sum();
                    let dst = &mut ga.data_mut()[i * n..i * n + i + 1];
                    for ((d, &pv), &gv) in dst.iter_mut().zip(p).zip(gy) {
                        *d = pv * (gv - dot);
                    }
                }
                accumulate(grads, *a, ga, self)?;
            }
            Op::Pick(a, at) => {
                let av = self.val(*a)?;
                let mut ga = Array::zeros(av.shape());
                let c = av.cols();
                for (&(r, col), &gv) in at.iter().zip(g.data()) {
                    ga.data_mut()[r * c + col] += gv;
                }
                accumulate(grads, *a, ga, self)?;
            }
            Op::Sum(a) => {
                let av = self.val(*a)?;
                accumulate(grads, *a, Array::full(av.shape(), g.item()), self)?;
            }
            Op::Mean(a) => {
                let av = self.val(*a)?;
                let k = g.item() / av.len() as f64;
                accumulate(grads, *a, Array::full(av.shape(), k), self)?;
            }
            Op::Gelu(a) => {
                let av = self.val(*a)?;
                accumulate(grads, *a, zip_map(g, av, |gv, x| gv * gelu_grad(x)), self)?;
            }
            Op::RmsNorm(a) => {
                let av = self.val(*a)?;
                let c = av.cols();
                let mut ga = Array::zeros(av.shape());
                for ((x, y), (gy, dst)) in av
                    .data()
                    .chunks(c)
                    .zip(out.data().chunks(c))
                    .zip(g.data().chunks(c).zip(ga.data_mut().chunks_mut(c)))
                {
                    let r = rms(x);
                    let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = (gv - yv * dot) / r;
                    }
                }
                accumulate(grads, *a, ga, self)?;
            }
            Op::Softplus(a) => {
                let av = self.val(*a)?;
                accumulate(grads, *a, zip_map(g, av, |gv, x| gv * sigmoid(x)), self)?;
            }
            Op::Map(a, f) => {
                let av = self.val(*a)?;
                let df = f.df;
                accumulate(grads, *a, zip_map(g, av, |gv, x| gv * df(x)), self)?;
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Array>], id: NodeId, g: Array, graph: &Graph) -> Result<()> {
    // Inputs to a node always precede it, so the slot exists.
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            let v = graph.value(id)?;
            debug_assert_eq!(v.shape(), g.shape());
            *slot = Some(g);
        }
    }
    Ok(())
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Array::new(a.shape().to_vec(), data).expect("same shape")
}

fn mismatch(op: &'static str, arrays: &[&Array]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        shapes: arrays.iter().map(|a| a.shape().to_vec()).collect(),
    }
}

fn same_shape(op: &'static str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(mismatch(op, &[a, b]));
    }
    Ok(())
}

fn require_2d(op: &'static str, a: &Array) -> Result<()> {
    if a.shape().len() != 2 {
        return Err(mismatch(op, &[a]));
    }
    Ok(())
}

fn transpose(a: &Array) -> Array {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data()[i * c + j];
        }
    }
    Array::new(vec![c, r], data).expect("transpose keeps element count")
}

fn concat(op: &'static str, arrays: &[&Array]) -> Result<Array> {
    if arrays.is_empty() {
        return Err(AutodiffError::ShapeMismatch { op, shapes: vec![] });
    }
    if arrays.iter().all(|a| a.shape().is_empty()) {
        return Ok(Array::vector(arrays.iter().map(|a| a.item()).collect()));
    }
    let lead = &arrays[0].shape()[..arrays[0].shape().len() - 1];
    if arrays
        .iter()
        .any(|a| a.shape().is_empty() || &a.shape()[..a.shape().len() - 1] != lead)
    {
        return Err(mismatch(op, arrays));
    }
    let rows: usize = lead.iter().product();
    let total: usize = arrays.iter().map(|a| a.cols()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for a in arrays {
            let c = a.cols();
            data.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Array::new(shape, data)
}

fn rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    (ms + RMS_EPS).sqrt()
}

const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_K * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let inner = c * (x + GELU_K * x * x * x);
    let t = inner.tanh();
    let dinner = c * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise RMS normalization outside the graph (same epsilon as the op).
pub fn rms_norm_row(row: &mut [f64]) {
    let r = rms(row);
    for v in row.iter_mut() {
        *v /= r;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Array)]) -> BTreeMap<String, Array> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn square_value_and_gradient() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.square(x);
        let inputs = bind(&[("x", Array::scalar(3.0))]);
        assert_eq!(g.forward(y, &inputs).unwrap().item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut g = Graph::new();
        let i = g.constant(Array::identity(3));
        let a = g.input("a");
        let p = g.matmul(i, a);
        let data: Vec<f64> = (0..9).map(|v| v as f64 * 0.7 - 2.0).collect();
        let av = Array::new(vec![3, 3], data).unwrap();
        let inputs = bind(&[("a", av.clone())]);
        assert_eq!(g.forward(p, &inputs).unwrap(), &av);
    }

    #[test]
    fn log_softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let z = g.input("z");
        let l = g.log_softmax(z);
        let inputs = bind(&[("z", Array::vector(vec![0.0; 3]))]);
        for &v in g.forward(l, &inputs).unwrap().data() {
            assert!((v + 3f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_pick_gradient_is_onehot_minus_softmax() {
        let z = vec![0.3, -1.2, 2.0, 0.5];
        let k = 2;
        let mut g = Graph::new();
        let zi = g.input("z");
        let l = g.log_softmax(zi);
        let p = g.pick(l, vec![(0, k)]);
        let s = g.sum(p);
        let inputs = bind(&[("z", Array::new(vec![1, 4], z.clone()).unwrap())]);
        g.forward(s, &inputs).unwrap();
        let grads = g.backward(s).unwrap();
        let max = z.iter().copied().fold(f64::MIN, f64::max);
        let zsum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        for (j, &gj) in grads["z"].data().iter().enumerate() {
            let softmax = (z[j] - max).exp() / zsum;
            let onehot = if j == k { 1.0 } else { 0.0 };
            assert!((gj - (onehot - softmax)).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_gradient_accumulates_exactly() {
        // d(f + f)/dx == 2 df/dx with f = x * w
        let xv = Array::vector(vec![0.25, -1.5, 3.0]);
        let wv = Array::vector(vec![1.1, 0.2, -0.7]);
        let inputs = bind(&[("x", xv), ("w", wv)]);

        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let f = g.mul(x, w);
        let fs = g.sum(f);
        g.forward(fs, &inputs).unwrap();
        let single = g.backward(fs).unwrap();

        let mut g2 = Graph::new();
        let x = g2.input("x");
        let w = g2.input("w");
        let f = g2.mul(x, w);
        let fs = g2.sum(f);
        let twice = g2.add(fs, fs);
        g2.forward(twice, &inputs).unwrap();
        let double = g2.backward(twice).unwrap();

        for (a, b) in single["x"].data().iter().zip(double["x"].data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let c = g.matmul(a, b);
        let inputs = bind(&[
            ("a", Array::zeros(&[2, 3])),
            ("b", Array::zeros(&[2, 3])),
        ]);
        let err = g.forward(c, &inputs).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::ShapeMismatch {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
    }

    #[test]
    fn non_finite_intermediate_names_the_node() {
        fn ln(x: f64) -> f64 {
            x.ln()
        }
        fn dln(x: f64) -> f64 {
            1.0 / x
        }
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.map(x, ElementwiseFn { name: "ln", f: ln, df: dln });
        let s = g.sum(y);
        let inputs = bind(&[("x", Array::vector(vec![1.0, 0.0]))]);
        let err = g.forward(s, &inputs).unwrap_err();
        assert_eq!(err, AutodiffError::NonFinite { node: y, op: "ln" });
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 2.0);
        let inputs = bind(&[("x", Array::vector(vec![1.0, 2.0]))]);
        g.forward(y, &inputs).unwrap();
        assert_eq!(g.backward(y).unwrap_err(), AutodiffError::NotScalar(vec![2]));
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x");
        let err = g.forward(x, &BTreeMap::new()).unwrap_err();
        assert_eq!(err, AutodiffError::UnboundInput("x".into()));
    }

    #[test]
    fn causal_softmax_rows_are_normalized_and_masked() {
        let mut g = Graph::new();
        let s = g.input("s");
        let p = g.causal_softmax(s);
        let data: Vec<f64> = (0..16).map(|v| (v as f64).sin() * 3.0).collect();
        let inputs = bind(&[("s", Array::new(vec![4, 4], data).unwrap())]);
        let out = g.forward(p, &inputs).unwrap().clone();
        for i in 0..4 {
            let row = out.row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn scalars_concat_into_a_vector() {
        let mut g = Graph::new();
        let a = g.scalar(1.0);
        let b = g.scalar(2.0);
        let c = g.concat(vec![a, b]);
        let v = g.forward(c, &BTreeMap::new()).unwrap();
        assert_eq!(v.shape(), &[2]);
        assert_eq!(v.data(), &[1.0, 2.0]);
    }
}
