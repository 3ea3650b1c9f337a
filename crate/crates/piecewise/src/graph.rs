//! Define-then-run reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an ordered list of primitive nodes; the list order is the
//! topological evaluation order, and node inputs always precede the node.
//! Leaves are named slots bound to tensors at evaluation time; everything
//! else is computed. [`Graph::evaluate`] produces a [`Forward`] holding every
//! node value, and [`Forward::backward`] walks the list in reverse to
//! produce exact gradients of a scalar node with respect to every leaf —
//! parameters and inputs alike.
//!
//! Builder misuse (shape mismatches between nodes, duplicate leaf names,
//! non-scalar backward roots) panics: those are programming errors, not data
//! conditions. Evaluation-time problems (unbound leaves, wrongly shaped
//! bindings, non-finite intermediates) surface as [`Error`]s.
//!
//! Determinism: every reduction in this module is a sequential loop with a
//! fixed accumulation order, and the optional matrix-multiply parallelism in
//! [`Tensor::matmul`] partitions disjoint output rows without changing any
//! per-element accumulation order. Identical graphs and bindings therefore
//! yield bit-identical values and gradients at any worker count; forcing one
//! worker (deterministic mode) is available but not required for
//! reproducibility.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::PROB_EPS;
use std::collections::HashMap;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: String },
    Constant(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Add a `1xd` row vector to every row of an `nxd` matrix.
    AddRowVec(NodeId, NodeId),
    /// Multiply every row of an `nxd` matrix elementwise by a `1xd` row.
    MulRowVec(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    AddConst(NodeId, f64),
    MulConst(NodeId, f64),
    Clamp(NodeId, f64, f64),
    /// Row-wise log-softmax, stabilized by max subtraction.
    LogSoftmax(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// `nxd -> nx1`, sum over each row.
    SumRows(NodeId),
    /// `nxd -> 1xd`, sum over each column.
    SumCols(NodeId),
    /// `nxd -> 1xd`, mean over each column.
    MeanCols(NodeId),
    /// `nxd -> nx1`, max over each row; ties resolve to the lowest column.
    MaxRows(NodeId),
    /// `nxn -> 1xn`, the main diagonal.
    DiagPart(NodeId),
    Reshape(NodeId),
    /// Normalize each column to sum 1; columns whose sum falls below
    /// [`PROB_EPS`] become uniform `1/n` and pass no gradient.
    NormalizeCols(NodeId),
    /// Identity forward; passes no gradient.
    StopGradient(NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Constant(_) => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowVec(..) => "add_row_vec",
            Op::MulRowVec(..) => "mul_row_vec",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::AddConst(..) => "add_const",
            Op::MulConst(..) => "mul_const",
            Op::Clamp(..) => "clamp",
            Op::LogSoftmax(..) => "log_softmax",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::MeanCols(..) => "mean_cols",
            Op::MaxRows(..) => "max_rows",
            Op::DiagPart(..) => "diag_part",
            Op::Reshape(..) => "reshape",
            Op::NormalizeCols(..) => "normalize_cols",
            Op::StopGradient(..) => "stop_gradient",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: [usize; 2],
}

/// A static computation graph; build once, evaluate many times.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: HashMap<String, NodeId>,
}

/// Leaf-name to tensor map supplied at evaluation time.
#[derive(Debug, Default, Clone)]
pub struct Bindings {
    map: HashMap<String, Tensor>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }
}

/// Gradients of one scalar node with respect to every leaf of a graph.
///
/// Every leaf appears exactly once; leaves the output does not depend on map
/// to zero tensors of the leaf's shape.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: HashMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, leaf: &str) -> Option<&Tensor> {
        self.grads.get(leaf)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn insert(&mut self, leaf: impl Into<String>, grad: Tensor) {
        self.grads.insert(leaf.into(), grad);
    }

    pub(crate) fn empty() -> GradientMap {
        GradientMap { grads: HashMap::new() }
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id.0].shape
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(|s| s.as_str())
    }

    fn push(&mut self, op: Op, shape: [usize; 2]) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> [usize; 2] {
        assert!(id.0 < self.nodes.len(), "node id from another graph");
        self.nodes[id.0].shape
    }

    /// Declares a named leaf of fixed shape. Names must be unique.
    pub fn leaf(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        let name = name.into();
        assert!(
            !self.leaves.contains_key(&name),
            "duplicate leaf name {name:?}"
        );
        let id = self.push(Op::Leaf { name: name.clone() }, [rows, cols]);
        self.leaves.insert(name, id);
        id
    }

    /// Node of a previously declared leaf.
    pub fn leaf_node(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape();
        self.push(Op::Constant(value), shape)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> [usize; 2] {
        let (sa, sb) = (self.check(a), self.check(b));
        assert_eq!(sa, sb, "{what}: shapes {sa:?} vs {sb:?}");
        sa
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "add");
        self.push(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "sub");
        self.push(Op::Sub(a, b), s)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "mul");
        self.push(Op::Mul(a, b), s)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape(a, b, "div");
        self.push(Op::Div(a, b), s)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Neg(a), s)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.check(a), self.check(b));
        assert_eq!(
            sa[1], sb[0],
            "matmul: inner dimensions {sa:?} * {sb:?}"
        );
        self.push(Op::MatMul(a, b), [sa[0], sb[1]])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Transpose(a), [s[1], s[0]])
    }

    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (sa, sv) = (self.check(a), self.check(v));
        assert!(
            sv[0] == 1 && sv[1] == sa[1],
            "add_row_vec: matrix {sa:?} with row {sv:?}"
        );
        self.push(Op::AddRowVec(a, v), sa)
    }

    pub fn mul_row_vec(&mut self, a: NodeId, v: NodeId) -> NodeId {
        let (sa, sv) = (self.check(a), self.check(v));
        assert!(
            sv[0] == 1 && sv[1] == sa[1],
            "mul_row_vec: matrix {sa:?} with row {sv:?}"
        );
        self.push(Op::MulRowVec(a, v), sa)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Relu(a), s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Log(a), s)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::Sqrt(a), s)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.check(a);
        self.push(Op::AddConst(a, c), s)
    }

    pub fn mul_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let s = self.check(a);
        self.push(Op::MulConst(a, c), s)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "clamp: lo {lo} must be below hi {hi}");
        let s = self.check(a);
        self.push(Op::Clamp(a, lo, hi), s)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert!(s[1] >= 1, "log_softmax needs at least one column");
        self.push(Op::LogSoftmax(a), s)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.check(a);
        self.push(Op::SumAll(a), [1, 1])
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert!(s[0] * s[1] > 0, "mean_all of empty tensor");
        self.push(Op::MeanAll(a), [1, 1])
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::SumRows(a), [s[0], 1])
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::SumCols(a), [1, s[1]])
    }

    pub fn mean_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert!(s[0] > 0, "mean_cols of empty tensor");
        self.push(Op::MeanCols(a), [1, s[1]])
    }

    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert!(s[1] >= 1, "max_rows needs at least one column");
        self.push(Op::MaxRows(a), [s[0], 1])
    }

    pub fn diag_part(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert_eq!(s[0], s[1], "diag_part of non-square {s:?}");
        self.push(Op::DiagPart(a), [1, s[0]])
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let s = self.check(a);
        assert_eq!(
            s[0] * s[1],
            rows * cols,
            "reshape {s:?} to [{rows}, {cols}]"
        );
        self.push(Op::Reshape(a), [rows, cols])
    }

    pub fn normalize_cols(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        assert!(s[0] > 0, "normalize_cols of empty tensor");
        self.push(Op::NormalizeCols(a), s)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let s = self.check(a);
        self.push(Op::StopGradient(a), s)
    }

    /// Runs the forward pass. Every leaf must be bound with a tensor of the
    /// declared shape; every node value must come out finite.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<Forward<'_>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let value = self.forward_node(idx, node, &values, bindings)?;
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
        }
        Ok(Forward {
            graph: self,
            values,
        })
    }

    fn forward_node(
        &self,
        idx: usize,
        node: &Node,
        values: &[Tensor],
        bindings: &Bindings,
    ) -> Result<Tensor> {
        let v = |id: NodeId| &values[id.0];
        let out = match &node.op {
            Op::Leaf { name } => {
                let t = bindings.get(name).ok_or_else(|| {
                    Error::contract(format!("leaf {name:?} is not bound"))
                })?;
                if t.shape() != node.shape {
                    return Err(Error::shape(
                        format!("binding for leaf {name:?} (node {idx})"),
                        format!("declared {:?}, bound {:?}", node.shape, t.shape()),
                    ));
                }
                t.clone()
            }
            Op::Constant(t) => t.clone(),
            Op::Add(a, b) => v(*a).zip_map(v(*b), |x, y| x + y),
            Op::Sub(a, b) => v(*a).zip_map(v(*b), |x, y| x - y),
            Op::Mul(a, b) => v(*a).zip_map(v(*b), |x, y| x * y),
            Op::Div(a, b) => v(*a).zip_map(v(*b), |x, y| x / y),
            Op::Neg(a) => v(*a).map(|x| -x),
            Op::MatMul(a, b) => v(*a).matmul(v(*b)),
            Op::Transpose(a) => v(*a).transpose(),
            Op::AddRowVec(a, r) => {
                let (a, r) = (v(*a), v(*r));
                let mut out = a.clone();
                let row = r.data();
                for chunk in out.data_mut().chunks_exact_mut(row.len()) {
                    for (o, &rv) in chunk.iter_mut().zip(row) {
                        *o += rv;
                    }
                }
                out
            }
            Op::MulRowVec(a, r) => {
                let (a, r) = (v(*a), v(*r));
                let mut out = a.clone();
                let row = r.data();
                for chunk in out.data_mut().chunks_exact_mut(row.len()) {
                    for (o, &rv) in chunk.iter_mut().zip(row) {
                        *o *= rv;
                    }
                }
                out
            }
            Op::Relu(a) => v(*a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Exp(a) => v(*a).map(f64::exp),
            Op::Log(a) => v(*a).map(f64::ln),
            Op::Sqrt(a) => v(*a).map(f64::sqrt),
            Op::AddConst(a, c) => {
                let c = *c;
                v(*a).map(|x| x + c)
            }
            Op::MulConst(a, c) => {
                let c = *c;
                v(*a).map(|x| x * c)
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                v(*a).map(|x| x.clamp(lo, hi))
            }
            Op::LogSoftmax(a) => {
                let a = v(*a);
                let mut out = a.clone();
                for row in out.data_mut().chunks_exact_mut(a.cols()) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max
                        + row
                            .iter()
                            .map(|&x| (x - max).exp())
                            .sum::<f64>()
                            .ln();
                    for x in row.iter_mut() {
                        *x -= lse;
                    }
                }
                out
            }
            Op::SumAll(a) => Tensor::raw(1, 1, vec![v(*a).data().iter().sum()]),
            Op::MeanAll(a) => {
                let a = v(*a);
                let sum: f64 = a.data().iter().sum();
                Tensor::raw(1, 1, vec![sum / a.len() as f64])
            }
            Op::SumRows(a) => {
                let a = v(*a);
                let data = a
                    .data()
                    .chunks_exact(a.cols())
                    .map(|row| row.iter().sum())
                    .collect();
                Tensor::raw(a.rows(), 1, data)
            }
            Op::SumCols(a) => {
                let a = v(*a);
                let mut out = vec![0.0; a.cols()];
                for row in a.data().chunks_exact(a.cols()) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                Tensor::raw(1, a.cols(), out)
            }
            Op::MeanCols(a) => {
                let a = v(*a);
                let n = a.rows() as f64;
                let mut out = vec![0.0; a.cols()];
                for row in a.data().chunks_exact(a.cols()) {
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                for o in out.iter_mut() {
                    *o /= n;
                }
                Tensor::raw(1, a.cols(), out)
            }
            Op::MaxRows(a) => {
                let a = v(*a);
                let data = a
                    .data()
                    .chunks_exact(a.cols())
                    .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect();
                Tensor::raw(a.rows(), 1, data)
            }
            Op::DiagPart(a) => {
                let a = v(*a);
                let data = (0..a.rows()).map(|i| a.get(i, i)).collect();
                Tensor::raw(1, a.rows(), data)
            }
            Op::Reshape(a) => {
                Tensor::raw(node.shape[0], node.shape[1], v(*a).data().to_vec())
            }
            Op::NormalizeCols(a) => {
                let a = v(*a);
                let sums = column_sums(a);
                let n = a.rows();
                let uniform = 1.0 / n as f64;
                let mut out = a.clone();
                for i in 0..n {
                    for j in 0..a.cols() {
                        let v = if sums[j] < PROB_EPS {
                            uniform
                        } else {
                            a.get(i, j) / sums[j]
                        };
                        out.set(i, j, v);
                    }
                }
                out
            }
            Op::StopGradient(a) => v(*a).clone(),
        };
        debug_assert_eq!(out.shape(), node.shape, "op {} shape", node.op.name());
        Ok(out)
    }
}

fn column_sums(a: &Tensor) -> Vec<f64> {
    let mut sums = vec![0.0; a.cols()];
    for row in a.data().chunks_exact(a.cols()) {
        for (s, &x) in sums.iter_mut().zip(row) {
            *s += x;
        }
    }
    sums
}

/// The result of a forward pass: one value per node.
#[derive(Debug)]
pub struct Forward<'g> {
    graph: &'g Graph,
    values: Vec<Tensor>,
}

impl<'g> Forward<'g> {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).scalar_value()
    }

    /// Reverse pass from a scalar node. Returns one gradient per leaf;
    /// leaves the output does not reach get zero gradients.
    pub fn backward(&self, output: NodeId) -> Result<GradientMap> {
        let nodes = &self.graph.nodes;
        if nodes[output.0].shape != [1, 1] {
            return Err(Error::contract(format!(
                "backward needs a scalar output, got shape {:?}",
                nodes[output.0].shape
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adjoints[output.0] = Some(Tensor::scalar(1.0));

        let mut grads = GradientMap::empty();
        for idx in (0..=output.0).rev() {
            let Some(adj) = adjoints[idx].take() else {
                continue;
            };
            match &nodes[idx].op {
                Op::Leaf { name } => {
                    if !adj.all_finite() {
                        return Err(Error::NonFinite {
                            node: idx,
                            op: "leaf gradient",
                        });
                    }
                    grads.insert(name.clone(), adj);
                    continue;
                }
                op => self.backward_node(idx, op, &adj, &mut adjoints),
            }
        }
        // Unreached leaves still appear, with zero gradients.
        for (name, id) in &self.graph.leaves {
            if grads.get(name).is_none() {
                let s = nodes[id.0].shape;
                grads.insert(name.clone(), Tensor::zeros(s[0], s[1]));
            }
        }
        Ok(grads)
    }

    fn accumulate(adjoints: &mut [Option<Tensor>], id: NodeId, contribution: Tensor) {
        match &mut adjoints[id.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(
        &self,
        idx: usize,
        op: &Op,
        adj: &Tensor,
        adjoints: &mut [Option<Tensor>],
    ) {
        let v = |id: NodeId| &self.values[id.0];
        let push = |id: NodeId, t: Tensor, adjoints: &mut [Option<Tensor>]| {
            Self::accumulate(adjoints, id, t)
        };
        match op {
            Op::Leaf { .. } | Op::Constant(_) | Op::StopGradient(_) => {
                // Leaves are handled by the caller; constants and
                // stop-gradients absorb their adjoint.
            }
            Op::Add(a, b) => {
                push(*a, adj.clone(), adjoints);
                push(*b, adj.clone(), adjoints);
            }
            Op::Sub(a, b) => {
                push(*a, adj.clone(), adjoints);
                push(*b, adj.map(|g| -g), adjoints);
            }
            Op::Mul(a, b) => {
                push(*a, adj.zip_map(v(*b), |g, y| g * y), adjoints);
                push(*b, adj.zip_map(v(*a), |g, x| g * x), adjoints);
            }
            Op::Div(a, b) => {
                let bv = v(*b);
                push(*a, adj.zip_map(bv, |g, y| g / y), adjoints);
                let out = v(NodeId(idx));
                let gb = adj
                    .zip_map(out, |g, o| g * o)
                    .zip_map(bv, |go, y| -go / y);
                push(*b, gb, adjoints);
            }
            Op::Neg(a) => push(*a, adj.map(|g| -g), adjoints),
            Op::MatMul(a, b) => {
                let bt = v(*b).transpose();
                push(*a, adj.matmul(&bt), adjoints);
                let at = v(*a).transpose();
                push(*b, at.matmul(adj), adjoints);
            }
            Op::Transpose(a) => push(*a, adj.transpose(), adjoints),
            Op::AddRowVec(a, r) => {
                push(*a, adj.clone(), adjoints);
                push(*r, sum_cols_of(adj), adjoints);
            }
            Op::MulRowVec(a, r) => {
                let rv = v(*r).data();
                let mut ga = adj.clone();
                for chunk in ga.data_mut().chunks_exact_mut(rv.len()) {
                    for (g, &s) in chunk.iter_mut().zip(rv) {
                        *g *= s;
                    }
                }
                push(*a, ga, adjoints);
                let av = v(*a);
                let mut gr = vec![0.0; rv.len()];
                for (grow, arow) in adj
                    .data()
                    .chunks_exact(rv.len())
                    .zip(av.data().chunks_exact(rv.len()))
                {
                    for ((g, &gv), &xv) in gr.iter_mut().zip(grow).zip(arow) {
                        *g += gv * xv;
                    }
                }
                push(*r, Tensor::raw(1, rv.len(), gr), adjoints);
            }
            Op::Relu(a) => {
                // Subgradient 0 at the kink.
                push(
                    *a,
                    adj.zip_map(v(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
                    adjoints,
                );
            }
            Op::Exp(a) => {
                push(*a, adj.zip_map(v(NodeId(idx)), |g, o| g * o), adjoints)
            }
            Op::Log(a) => push(*a, adj.zip_map(v(*a), |g, x| g / x), adjoints),
            Op::Sqrt(a) => {
                push(
                    *a,
                    adj.zip_map(v(NodeId(idx)), |g, o| g / (2.0 * o)),
                    adjoints,
                );
            }
            Op::AddConst(a, _) => push(*a, adj.clone(), adjoints),
            Op::MulConst(a, c) => {
                let c = *c;
                push(*a, adj.map(|g| g * c), adjoints);
            }
            Op::Clamp(a, lo, hi) => {
                // Zero subgradient at and beyond the clamp boundaries.
                let (lo, hi) = (*lo, *hi);
                push(
                    *a,
                    adj.zip_map(v(*a), |g, x| if x > lo && x < hi { g } else { 0.0 }),
                    adjoints,
                );
            }
            Op::LogSoftmax(a) => {
                let out = v(NodeId(idx));
                let cols = out.cols();
                let mut ga = adj.clone();
                for (grow, orow) in ga
                    .data_mut()
                    .chunks_exact_mut(cols)
                    .zip(out.data().chunks_exact(cols))
                {
                    let gsum: f64 = grow.iter().sum();
                    for (g, &o) in grow.iter_mut().zip(orow) {
                        *g -= o.exp() * gsum;
                    }
                }
                push(*a, ga, adjoints);
            }
            Op::SumAll(a) => {
                let s = v(*a).shape();
                push(*a, Tensor::full(s[0], s[1], adj.scalar_value()), adjoints);
            }
            Op::MeanAll(a) => {
                let s = v(*a).shape();
                let g = adj.scalar_value() / (s[0] * s[1]) as f64;
                push(*a, Tensor::full(s[0], s[1], g), adjoints);
            }
            Op::SumRows(a) => {
                let av = v(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for (i, chunk) in ga.data_mut().chunks_exact_mut(av.cols()).enumerate() {
                    chunk.fill(adj.data()[i]);
                }
                push(*a, ga, adjoints);
            }
            Op::SumCols(a) => {
                let av = v(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for chunk in ga.data_mut().chunks_exact_mut(av.cols()) {
                    chunk.copy_from_slice(adj.data());
                }
                push(*a, ga, adjoints);
            }
            Op::MeanCols(a) => {
                let av = v(*a);
                let n = av.rows() as f64;
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for chunk in ga.data_mut().chunks_exact_mut(av.cols()) {
                    for (g, &gv) in chunk.iter_mut().zip(adj.data()) {
                        *g = gv / n;
                    }
                }
                push(*a, ga, adjoints);
            }
            Op::MaxRows(a) => {
                let av = v(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for i in 0..av.rows() {
                    let row = av.row(i);
                    let mut best = 0usize;
                    for (j, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = j;
                        }
                    }
                    ga.set(i, best, adj.data()[i]);
                }
                push(*a, ga, adjoints);
            }
            Op::DiagPart(a) => {
                let n = v(*a).rows();
                let mut ga = Tensor::zeros(n, n);
                for j in 0..n {
                    ga.set(j, j, adj.data()[j]);
                }
                push(*a, ga, adjoints);
            }
            Op::Reshape(a) => {
                let s = v(*a).shape();
                push(*a, Tensor::raw(s[0], s[1], adj.data().to_vec()), adjoints);
            }
            Op::NormalizeCols(a) => {
                let av = v(*a);
                let out = v(NodeId(idx));
                let sums = column_sums(av);
                let (n, d) = (av.rows(), av.cols());
                // For a live column j with sum s: d out_ij / d a_kj =
                // (delta_ik - out_ij) / s, so the adjoint of a_kj is
                // (g_kj - sum_i g_ij out_ij) / s. Uniform-fallback columns
                // pass no gradient.
                let mut dots = vec![0.0; d];
                for i in 0..n {
                    for j in 0..d {
                        dots[j] += adj.get(i, j) * out.get(i, j);
                    }
                }
                let mut ga = Tensor::zeros(n, d);
                for k in 0..n {
                    for j in 0..d {
                        if sums[j] >= PROB_EPS {
                            ga.set(k, j, (adj.get(k, j) - dots[j]) / sums[j]);
                        }
                    }
                }
                push(*a, ga, adjoints);
            }
        }
    }
}

fn sum_cols_of(t: &Tensor) -> Tensor {
    let mut out = vec![0.0; t.cols()];
    for row in t.data().chunks_exact(t.cols()) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::raw(1, t.cols(), out)
}

/// Outcome of comparing analytic gradients against central finite
/// differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Per-leaf maximum relative error, sorted by leaf name.
    pub per_leaf: Vec<(String, f64)>,
    /// Largest relative error over all leaves and components.
    pub max_rel_err: f64,
    /// Tolerance the report was judged against.
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Compares [`Forward::backward`] gradients of `output` against central
/// finite differences of step `step`, leaf by leaf and component by
/// component. Relative error uses the denominator `max(|ad|, |fd|, 1)` so
/// near-zero gradients compare absolutely.
pub fn gradient_check(
    graph: &Graph,
    output: NodeId,
    bindings: &Bindings,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let forward = graph.evaluate(bindings)?;
    let grads = forward.backward(output)?;
    gradient_check_against(graph, output, bindings, &grads, step, tol)
}

/// Same comparison as [`gradient_check`], but against a caller-supplied
/// gradient map — useful for testing the checker itself with deliberately
/// corrupted gradients.
pub fn gradient_check_against(
    graph: &Graph,
    output: NodeId,
    bindings: &Bindings,
    grads: &GradientMap,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut names: Vec<String> = graph.leaf_names().map(String::from).collect();
    names.sort();
    let mut work = bindings.clone();
    let mut per_leaf = Vec::with_capacity(names.len());
    let mut max_rel_err: f64 = 0.0;
    for name in names {
        let len = bindings
            .get(&name)
            .ok_or_else(|| Error::contract(format!("leaf {name:?} is not bound")))?
            .len();
        let analytic = grads
            .get(&name)
            .ok_or_else(|| Error::contract(format!("no gradient for leaf {name:?}")))?
            .clone();
        let mut leaf_err: f64 = 0.0;
        for i in 0..len {
            let base = bindings.get(&name).unwrap().data()[i];
            let fd = {
                work.get_mut(&name).unwrap().data_mut()[i] = base + step;
                let up = graph.evaluate(&work)?.scalar(output);
                work.get_mut(&name).unwrap().data_mut()[i] = base - step;
                let down = graph.evaluate(&work)?.scalar(output);
                work.get_mut(&name).unwrap().data_mut()[i] = base;
                (up - down) / (2.0 * step)
            };
            let ad = analytic.data()[i];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            leaf_err = leaf_err.max(rel);
        }
        max_rel_err = max_rel_err.max(leaf_err);
        per_leaf.push((name, leaf_err));
    }
    Ok(GradCheckReport {
        per_leaf,
        max_rel_err,
        tol,
    })
}
