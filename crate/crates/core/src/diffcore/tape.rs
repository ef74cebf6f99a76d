//! A reverse-mode tape over a closed set of matrix primitives.
//!
//! Nodes hold dense `f64` matrices. Every primitive records its inputs and
//! forward value; [`Tape::backward`] walks the tape once in reverse. The set
//! is deliberately small: it is exactly what the adapter and the four heads
//! need, which keeps exhaustive gradient testing feasible.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{FslError, Result};

pub type Matrix = Array2<f64>;

/// Norms below this are treated as zero vectors by the cosine primitive.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Param,
    Constant,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxNll { logits: NodeId, groups: Vec<usize>, targets: Vec<usize>, floor: f64 },
    SqDist { a: NodeId, b: NodeId },
    Cosine { a: NodeId, b: NodeId },
    Mean(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `param`; `None` if the node is not a parameter leaf.
    pub fn get(&self, param: NodeId) -> Option<&Matrix> {
        self.grads.get(param.0).and_then(Option::as_ref)
    }
}

fn shape_err(op: &'static str, detail: String) -> FslError {
    FslError::ShapeMismatch { op, detail }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(sum(exp(values))) over the selected entries; `-inf` if none selected.
fn log_sum_exp<I: Iterator<Item = f64> + Clone>(values: I) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn row_norms(m: ArrayView2<f64>) -> Vec<f64> {
    m.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn normalized(m: ArrayView2<f64>, norms: &[f64]) -> Matrix {
    let mut out = m.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms) {
        row /= n;
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// The single entry of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, op: Op, value: Matrix) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Param, value)
    }

    /// A leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let av = self.value(a);
        let bv = self.value(b);
        let av = if ta { av.t() } else { av.view() };
        let bv = if tb { bv.t() } else { bv.view() };
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", format!("{:?} x {:?}", av.dim(), bv.dim())));
        }
        let value = av.dot(&bv);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, b, false, false)
    }

    /// Elementwise sum; `b` may also be a `1 x cols` row or a `1 x 1`
    /// scalar, broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ok = bv.dim() == av.dim() || bv.dim() == (1, av.ncols()) || bv.dim() == (1, 1);
        if !ok {
            return Err(shape_err("add", format!("{:?} + {:?}", av.dim(), bv.dim())));
        }
        let value = av + &bv.broadcast(av.dim()).expect("checked above");
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a) * k;
        self.push(Op::Scale { a, k }, value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).mapv(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    /// Per-row negative log-likelihood of a softmax over `logits` (n x m),
    /// output `n x 1`. Column `j` contributes its probability mass to class
    /// `groups[j]`; row `i`'s loss is `-ln(max(mass of targets[i], floor))`.
    /// With `groups = 0..m` this is the ordinary softmax cross-entropy.
    pub fn softmax_nll(
        &mut self,
        logits: NodeId,
        groups: Vec<usize>,
        targets: Vec<usize>,
        floor: f64,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if groups.len() != lv.ncols() || targets.len() != lv.nrows() {
            return Err(shape_err(
                "softmax_nll",
                format!("logits {:?}, {} groups, {} targets", lv.dim(), groups.len(), targets.len()),
            ));
        }
        let cap = -floor.ln();
        let mut value = Matrix::zeros((lv.nrows(), 1));
        for (i, row) in lv.rows().into_iter().enumerate() {
            let t = targets[i];
            let all = log_sum_exp(row.iter().copied());
            let own = log_sum_exp(row.iter().zip(&groups).filter(|(_, &g)| g == t).map(|(&v, _)| v));
            value[[i, 0]] = (all - own).min(cap);
        }
        Ok(self.push(Op::SoftmaxNll { logits, groups, targets, floor }, value))
    }

    /// Pairwise squared Euclidean distances between rows: `(n x k, m x k) -> n x m`.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err("sq_dist", format!("{:?} vs {:?}", av.dim(), bv.dim())));
        }
        let mut value = Matrix::zeros((av.nrows(), bv.nrows()));
        for (i, ra) in av.rows().into_iter().enumerate() {
            for (j, rb) in bv.rows().into_iter().enumerate() {
                value[[i, j]] = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        Ok(self.push(Op::SqDist { a, b }, value))
    }

    /// Pairwise cosine similarities between rows: `(n x k, m x k) -> n x m`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err("cosine", format!("{:?} vs {:?}", av.dim(), bv.dim())));
        }
        let (na, nb) = (row_norms(av.view()), row_norms(bv.view()));
        if na.iter().chain(&nb).any(|&n| !(n >= NORM_FLOOR)) {
            return Err(FslError::DegenerateVector);
        }
        let value = normalized(av.view(), &na).dot(&normalized(bv.view(), &nb).t());
        Ok(self.push(Op::Cosine { a, b }, value))
    }

    /// Mean of all entries, as a `1 x 1` node.
    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Matrix::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Sign pattern (-1, 0, +1) of every ReLU input, in tape order. Used to
    /// detect finite-difference steps that cross a kink.
    pub fn relu_signs(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                out.extend(self.value(a).iter().map(|&x| {
                    if x > 0.0 {
                        1
                    } else if x < 0.0 {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if out.dim() != (1, 1) {
            let (rows, cols) = out.dim();
            return Err(FslError::NonScalarOutput { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        adj[output.0] = Some(Matrix::ones((1, 1)));

        fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
            match &mut adj[id.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Param => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Constant => {}
                &Op::MatMul { a, b, ta, tb } => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let a_eff = if ta { av.t() } else { av.view() };
                    let b_eff = if tb { bv.t() } else { bv.view() };
                    let ga_eff = g.dot(&b_eff.t());
                    let gb_eff = a_eff.t().dot(&g);
                    accumulate(&mut adj, a, if ta { ga_eff.reversed_axes() } else { ga_eff });
                    accumulate(&mut adj, b, if tb { gb_eff.reversed_axes() } else { gb_eff });
                }
                &Op::Add { a, b } => {
                    let bdim = self.value(b).dim();
                    let gb = if bdim == g.dim() {
                        g.clone()
                    } else if bdim.1 == g.ncols() {
                        g.sum_axis(Axis(0)).insert_axis(Axis(0))
                    } else {
                        Matrix::from_elem((1, 1), g.sum())
                    };
                    accumulate(&mut adj, a, g);
                    accumulate(&mut adj, b, gb);
                }
                &Op::Scale { a, k } => accumulate(&mut adj, a, g * k),
                &Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(a)).for_each(|gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut adj, a, ga);
                }
                &Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gi, &s| *gi *= s * (1.0 - s));
                    accumulate(&mut adj, a, ga);
                }
                Op::SoftmaxNll { logits, groups, targets, floor } => {
                    let lv = self.value(*logits);
                    let cap = -floor.ln();
                    let mut gl = Matrix::zeros(lv.dim());
                    for (i, row) in lv.rows().into_iter().enumerate() {
                        if node.value[[i, 0]] >= cap {
                            continue; // floored: flat
                        }
                        let t = targets[i];
                        let all = log_sum_exp(row.iter().copied());
                        let own = log_sum_exp(row.iter().zip(groups).filter(|(_, &c)| c == t).map(|(&v, _)| v));
                        for (j, &v) in row.iter().enumerate() {
                            let mut d = (v - all).exp();
                            if groups[j] == t {
                                d -= (v - own).exp();
                            }
                            gl[[i, j]] = g[[i, 0]] * d;
                        }
                    }
                    accumulate(&mut adj, *logits, gl);
                }
                &Op::SqDist { a, b } => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let ga = (av * &row_sum - g.dot(bv)) * 2.0;
                    let gb = (bv * &col_sum - g.t().dot(av)) * 2.0;
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                &Op::Cosine { a, b } => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let (na, nb) = (row_norms(av.view()), row_norms(bv.view()));
                    let (ah, bh) = (normalized(av.view(), &na), normalized(bv.view(), &nb));
                    let gc = &g * &node.value;
                    let ra = gc.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let rb = gc.sum_axis(Axis(0)).insert_axis(Axis(1));
                    let mut ga = g.dot(&bh) - &ah * &ra;
                    let mut gb = g.t().dot(&ah) - &bh * &rb;
                    for (mut row, n) in ga.rows_mut().into_iter().zip(&na) {
                        row /= *n;
                    }
                    for (mut row, n) in gb.rows_mut().into_iter().zip(&nb) {
                        row /= *n;
                    }
                    accumulate(&mut adj, a, ga);
                    accumulate(&mut adj, b, gb);
                }
                &Op::Mean(a) => {
                    let dim = self.value(a).dim();
                    let n = (dim.0 * dim.1) as f64;
                    accumulate(&mut adj, a, Matrix::from_elem(dim, g[[0, 0]] / n));
                }
            }
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Param => Some(adj[i].take().unwrap_or_else(|| Matrix::zeros(n.value.dim()))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }
}
