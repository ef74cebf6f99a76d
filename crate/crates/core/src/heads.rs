//! The four few-shot heads.
//!
//! Each head has two routes: plain scoring functions used for inference
//! ([`proto_scores`], [`simpleshot_scores`], [`relation_scores`],
//! [`matching_scores`]) and a loss graph on the [`Tape`] used for training
//! ([`episode_loss`]). Both run after the linear adapter.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::tape::NORM_FLOOR;
use crate::diffcore::{sigmoid, Matrix, NodeId, Tape};
use crate::episodic::Episode;
use crate::error::{FslError, Result};

/// Floor inside the logarithm of the matching loss.
pub const MATCHING_LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadKind {
    #[serde(rename = "protonet")]
    ProtoNet,
    #[serde(rename = "simpleshot")]
    SimpleShot,
    #[serde(rename = "relationnet")]
    RelationNet,
    #[serde(rename = "matchingnet")]
    MatchingNet,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] =
        [HeadKind::ProtoNet, HeadKind::SimpleShot, HeadKind::RelationNet, HeadKind::MatchingNet];

    pub fn id(self) -> &'static str {
        match self {
            HeadKind::ProtoNet => "protonet",
            HeadKind::SimpleShot => "simpleshot",
            HeadKind::RelationNet => "relationnet",
            HeadKind::MatchingNet => "matchingnet",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for HeadKind {
    type Err = FslError;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.id() == s)
            .ok_or_else(|| FslError::InvalidConfig(format!("unknown head `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadOptions {
    /// Subtract the support mean before cosine similarities
    /// (SimpleShot and matching heads).
    pub centering: bool,
}

impl Default for HeadOptions {
    fn default() -> Self {
        Self { centering: true }
    }
}

/// Linear map `x -> x W + b` applied to every support and query vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `D x d`
    pub weight: Matrix,
    /// `1 x d`
    pub bias: Matrix,
}

impl AdapterParams {
    /// Padded or truncated identity, zero bias.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        let mut weight = Matrix::zeros((input_dim, output_dim));
        for i in 0..input_dim.min(output_dim) {
            weight[[i, i]] = 1.0;
        }
        Self { weight, bias: Matrix::zeros((1, output_dim)) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.ncols() != self.input_dim() {
            return Err(FslError::DimensionMismatch { expected: self.input_dim(), found: x.ncols() });
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }
}

/// Two-layer relation module: `sigmoid(w2^T relu(W1^T [p; q] + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationParams {
    /// `2d x h`
    pub w1: Matrix,
    /// `1 x h`
    pub b1: Matrix,
    /// `h x 1`
    pub w2: Matrix,
    /// `1 x 1`
    pub b2: Matrix,
}

impl RelationParams {
    /// Hidden units compute `relu(p_j - q_j)` and `relu(q_j - p_j)`, and the
    /// output is `sigmoid(-|p - q|_1 / d)`: a working L1 similarity from the
    /// first episode on, which training then reshapes.
    pub fn difference_detector(dim: usize) -> Self {
        let h = 2 * dim;
        let mut w1 = Matrix::zeros((2 * dim, h));
        for j in 0..dim {
            w1[[j, j]] = 1.0;
            w1[[dim + j, j]] = -1.0;
            w1[[j, dim + j]] = -1.0;
            w1[[dim + j, dim + j]] = 1.0;
        }
        Self {
            w1,
            b1: Matrix::zeros((1, h)),
            w2: Matrix::from_elem((h, 1), -1.0 / dim as f64),
            b2: Matrix::zeros((1, 1)),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation.
    pub fn random<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut uni = |rows, cols, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-a..a))
        };
        Self {
            w1: uni(2 * dim, hidden, 2 * dim),
            b1: uni(1, hidden, 2 * dim),
            w2: uni(hidden, 1, hidden),
            b2: uni(1, 1, hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows() / 2
    }

    pub fn score(&self, prototype: &[f64], query: &[f64]) -> f64 {
        let d = self.input_dim();
        let top = self.w1.slice(s![..d, ..]);
        let bottom = self.w1.slice(s![d.., ..]);
        let p = ndarray::ArrayView1::from(prototype);
        let q = ndarray::ArrayView1::from(query);
        let hidden = (p.dot(&top) + q.dot(&bottom) + self.b1.row(0)).mapv(|x| x.max(0.0));
        sigmoid(hidden.dot(&self.w2.column(0)) + self.b2[[0, 0]])
    }
}

/// Per-query class scores and the argmax prediction (ties go to the lowest class).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScores {
    /// `queries x way`
    pub scores: Matrix,
    pub predictions: Vec<usize>,
}

impl EpisodeScores {
    pub fn from_scores(scores: Matrix) -> Self {
        let predictions = scores
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect();
        Self { scores, predictions }
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let hits = self.predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len() as f64
    }
}

/// Class means of the support rows; row `c` is the prototype of class `c`.
pub fn compute_prototypes(support: &Matrix, labels: &[usize], way: usize) -> Result<Matrix> {
    if labels.len() != support.nrows() {
        return Err(FslError::ShapeMismatch {
            op: "compute_prototypes",
            detail: format!("{} rows, {} labels", support.nrows(), labels.len()),
        });
    }
    let mut protos = Matrix::zeros((way, support.ncols()));
    let mut counts = vec![0usize; way];
    for (row, &c) in support.rows().into_iter().zip(labels) {
        if c >= way {
            return Err(FslError::ShapeMismatch {
                op: "compute_prototypes",
                detail: format!("label {c} outside way {way}"),
            });
        }
        let mut target = protos.row_mut(c);
        target += &row;
        counts[c] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(FslError::EmptyClass(c));
        }
        protos.row_mut(c).mapv_inplace(|v| v / n as f64);
    }
    Ok(protos)
}

fn check_dims(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(FslError::DimensionMismatch { expected: a.ncols(), found: b.ncols() });
    }
    Ok(())
}

fn cosine_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let unit = |m: &Matrix| -> Result<Matrix> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if !(n >= NORM_FLOOR) {
                return Err(FslError::DegenerateVector);
            }
            row /= n;
        }
        Ok(out)
    };
    Ok(unit(a)?.dot(&unit(b)?.t()))
}

fn centered(m: &Matrix, mean: &ndarray::Array1<f64>) -> Matrix {
    m - &mean.view().insert_axis(Axis(0))
}

/// Scores `-|q - p_c|^2`.
pub fn proto_scores(prototypes: &Matrix, queries: &Matrix) -> Result<EpisodeScores> {
    check_dims(prototypes, queries)?;
    let scores = Matrix::from_shape_fn((queries.nrows(), prototypes.nrows()), |(i, c)| {
        let diff = &queries.row(i) - &prototypes.row(c);
        -diff.dot(&diff)
    });
    Ok(EpisodeScores::from_scores(scores))
}

/// Cosine similarity to each prototype. With `centering`, the mean of the
/// prototypes (the support mean, for balanced supports) is subtracted from
/// prototypes and queries first.
pub fn simpleshot_scores(prototypes: &Matrix, queries: &Matrix, centering: bool) -> Result<EpisodeScores> {
    check_dims(prototypes, queries)?;
    let scores = if centering {
        let mean = prototypes.mean_axis(Axis(0)).expect("at least one prototype");
        cosine_matrix(&centered(queries, &mean), &centered(prototypes, &mean))?
    } else {
        cosine_matrix(queries, prototypes)?
    };
    Ok(EpisodeScores::from_scores(scores))
}

pub fn relation_scores(prototypes: &Matrix, queries: &Matrix, relation: &RelationParams) -> Result<EpisodeScores> {
    check_dims(prototypes, queries)?;
    if relation.input_dim() != queries.ncols() {
        return Err(FslError::DimensionMismatch { expected: relation.input_dim(), found: queries.ncols() });
    }
    let protos: Vec<Vec<f64>> = prototypes.rows().into_iter().map(|r| r.to_vec()).collect();
    let scores = Matrix::from_shape_fn((queries.nrows(), prototypes.nrows()), |(i, c)| {
        relation.score(&protos[c], queries.row(i).as_slice().expect("row-major"))
    });
    Ok(EpisodeScores::from_scores(scores))
}

/// Softmax attention over cosine similarities to every support vector;
/// a class's score is its total attention.
pub fn matching_scores(
    support: &Matrix,
    labels: &[usize],
    queries: &Matrix,
    way: usize,
    centering: bool,
) -> Result<EpisodeScores> {
    check_dims(support, queries)?;
    if support.nrows() == 0 || labels.len() != support.nrows() || labels.iter().any(|&l| l >= way) {
        return Err(FslError::ShapeMismatch {
            op: "matching_scores",
            detail: format!("{} support rows, {} labels, way {way}", support.nrows(), labels.len()),
        });
    }
    let sims = if centering {
        let mean = support.mean_axis(Axis(0)).expect("non-empty support");
        cosine_matrix(&centered(queries, &mean), &centered(support, &mean))?
    } else {
        cosine_matrix(queries, support)?
    };
    let attention = softmax_rows(&sims);
    let mut scores = Matrix::zeros((queries.nrows(), way));
    for (i, row) in attention.rows().into_iter().enumerate() {
        for (&a, &l) in row.iter().zip(labels) {
            scores[[i, l]] += a;
        }
    }
    Ok(EpisodeScores::from_scores(scores))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Everything a head needs for one episode: the adapter, and the relation
/// module when the head is [`HeadKind::RelationNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub head: HeadKind,
    pub options: HeadOptions,
    pub adapter: AdapterParams,
    pub relation: Option<RelationParams>,
}

impl Model {
    /// Identity adapter; the relation head starts as an L1 difference detector.
    pub fn new(head: HeadKind, input_dim: usize, adapter_dim: usize, options: HeadOptions) -> Self {
        let relation = (head == HeadKind::RelationNet).then(|| RelationParams::difference_detector(adapter_dim));
        Self { head, options, adapter: AdapterParams::identity(input_dim, adapter_dim), relation }
    }

    fn check(&self) -> Result<()> {
        let needs = self.head == HeadKind::RelationNet;
        if needs != self.relation.is_some() {
            return Err(FslError::InvalidConfig(format!(
                "relation parameters must be present iff head is relationnet (head: {})",
                self.head
            )));
        }
        Ok(())
    }

    /// Trainable matrices in a fixed order: adapter weight, adapter bias,
    /// then (relation only) w1, b1, w2, b2.
    pub fn params(&self) -> Vec<Matrix> {
        let mut out = vec![self.adapter.weight.clone(), self.adapter.bias.clone()];
        if let Some(r) = &self.relation {
            out.extend([r.w1.clone(), r.b1.clone(), r.w2.clone(), r.b2.clone()]);
        }
        out
    }

    pub fn set_params(&mut self, params: Vec<Matrix>) {
        let mut it = params.into_iter();
        self.adapter.weight = it.next().expect("adapter weight");
        self.adapter.bias = it.next().expect("adapter bias");
        if let Some(r) = &mut self.relation {
            r.w1 = it.next().expect("w1");
            r.b1 = it.next().expect("b1");
            r.w2 = it.next().expect("w2");
            r.b2 = it.next().expect("b2");
        }
    }

    /// Inference through the plain scoring functions.
    pub fn scores(&self, episode: &Episode) -> Result<EpisodeScores> {
        self.check()?;
        let zs = self.adapter.apply(&episode.support)?;
        let zq = self.adapter.apply(&episode.query)?;
        match self.head {
            HeadKind::ProtoNet => proto_scores(&compute_prototypes(&zs, &episode.support_labels, episode.way)?, &zq),
            HeadKind::SimpleShot => simpleshot_scores(
                &compute_prototypes(&zs, &episode.support_labels, episode.way)?,
                &zq,
                self.options.centering,
            ),
            HeadKind::RelationNet => relation_scores(
                &compute_prototypes(&zs, &episode.support_labels, episode.way)?,
                &zq,
                self.relation.as_ref().expect("checked"),
            ),
            HeadKind::MatchingNet => {
                matching_scores(&zs, &episode.support_labels, &zq, episode.way, self.options.centering)
            }
        }
    }

    pub fn accuracy(&self, episode: &Episode) -> Result<f64> {
        Ok(self.scores(episode)?.accuracy(&episode.query_labels))
    }

    /// Records the head's training loss on `tape`. `params` are the tape
    /// nodes for [`Model::params`], in the same order. Returns the loss node
    /// and the node holding the per-query class scores.
    pub fn build_loss(&self, tape: &mut Tape, params: &[NodeId], episode: &Episode) -> Result<(NodeId, NodeId)> {
        self.check()?;
        let way = episode.way;
        let ns = episode.support.nrows();
        let nq = episode.query.nrows();

        let xs = tape.constant(episode.support.clone());
        let xq = tape.constant(episode.query.clone());
        let zs = tape.matmul(xs, params[0])?;
        let zs = tape.add(zs, params[1])?;
        let zq = tape.matmul(xq, params[0])?;
        let zq = tape.add(zq, params[1])?;

        let mut averaging = Matrix::zeros((way, ns));
        let counts = episode.support_labels.iter().fold(vec![0usize; way], |mut acc, &c| {
            acc[c] += 1;
            acc
        });
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(FslError::EmptyClass(c));
        }
        for (i, &c) in episode.support_labels.iter().enumerate() {
            averaging[[c, i]] = 1.0 / counts[c] as f64;
        }
        let averaging = tape.constant(averaging);
        let classes: Vec<usize> = (0..way).collect();
        let targets = episode.query_labels.clone();

        let (loss, scores) = match self.head {
            HeadKind::ProtoNet => {
                let protos = tape.matmul(averaging, zs)?;
                let dist = tape.sq_dist(zq, protos)?;
                let logits = tape.scale(dist, -1.0);
                let nll = tape.softmax_nll(logits, classes, targets, MATCHING_LOG_FLOOR)?;
                (tape.mean(nll), logits)
            }
            HeadKind::SimpleShot => {
                let protos = tape.matmul(averaging, zs)?;
                let (q, p) = if self.options.centering {
                    let w = way as f64;
                    let to_centered = tape
                        .constant(Matrix::from_shape_fn((way, way), |(i, j)| f64::from(u8::from(i == j)) - 1.0 / w));
                    let minus_mean = tape.constant(Matrix::from_elem((nq, way), -1.0 / w));
                    let p = tape.matmul(to_centered, protos)?;
                    let shift = tape.matmul(minus_mean, protos)?;
                    (tape.add(zq, shift)?, p)
                } else {
                    (zq, protos)
                };
                let logits = tape.cosine(q, p)?;
                let nll = tape.softmax_nll(logits, classes, targets, MATCHING_LOG_FLOOR)?;
                (tape.mean(nll), logits)
            }
            HeadKind::MatchingNet => {
                let (q, s) = if self.options.centering {
                    let n = ns as f64;
                    let to_centered =
                        tape.constant(Matrix::from_shape_fn((ns, ns), |(i, j)| f64::from(u8::from(i == j)) - 1.0 / n));
                    let minus_mean = tape.constant(Matrix::from_elem((nq, ns), -1.0 / n));
                    let s = tape.matmul(to_centered, zs)?;
                    let shift = tape.matmul(minus_mean, zs)?;
                    (tape.add(zq, shift)?, s)
                } else {
                    (zq, zs)
                };
                let sims = tape.cosine(q, s)?;
                let nll = tape.softmax_nll(sims, episode.support_labels.clone(), targets, MATCHING_LOG_FLOOR)?;
                (tape.mean(nll), sims)
            }
            HeadKind::RelationNet => {
                let d = self.adapter.output_dim();
                let pairs = nq * way;
                let protos = tape.matmul(averaging, zs)?;
                let pick_proto =
                    tape.constant(Matrix::from_shape_fn((pairs, way), |(r, c)| f64::from(u8::from(r % way == c))));
                let pick_query =
                    tape.constant(Matrix::from_shape_fn((pairs, nq), |(r, i)| f64::from(u8::from(r / way == i))));
                let left = tape.constant(Matrix::from_shape_fn((d, 2 * d), |(i, j)| f64::from(u8::from(i == j))));
                let right = tape.constant(Matrix::from_shape_fn((d, 2 * d), |(i, j)| f64::from(u8::from(j == d + i))));
                let rp = tape.matmul(pick_proto, protos)?;
                let rp = tape.matmul(rp, left)?;
                let rq = tape.matmul(pick_query, zq)?;
                let rq = tape.matmul(rq, right)?;
                let concat = tape.add(rp, rq)?;
                let hidden = tape.matmul(concat, params[2])?;
                let hidden = tape.add(hidden, params[3])?;
                let hidden = tape.relu(hidden);
                let out = tape.matmul_t(params[4], hidden, true, true)?;
                let out = tape.add(out, params[5])?;
                let out = tape.sigmoid(out);
                let onehot =
                    Matrix::from_shape_fn((1, pairs), |(_, r)| f64::from(u8::from(targets[r / way] == r % way)));
                let onehot = tape.constant(onehot);
                let sse = tape.sq_dist(out, onehot)?;
                (tape.scale(sse, 1.0 / pairs as f64), out)
            }
        };
        Ok((loss, scores))
    }
}

/// Loss and gradients for one episode, in [`Model::params`] order.
pub fn episode_loss(model: &Model, episode: &Episode) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = model.params().into_iter().map(|p| tape.param(p)).collect();
    let (loss, _) = model.build_loss(&mut tape, &nodes, episode)?;
    let grads = tape.backward(loss)?;
    let grads = nodes.iter().map(|&n| grads.get(n).expect("param").clone()).collect();
    Ok((tape.scalar(loss), grads))
}

/// Scores recorded on the tape by [`Model::build_loss`], reshaped to
/// `queries x way`. Used to cross-check the two routes.
pub fn tape_scores(model: &Model, episode: &Episode) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let nodes: Vec<NodeId> = model.params().into_iter().map(|p| tape.param(p)).collect();
    let (_, scores) = model.build_loss(&mut tape, &nodes, episode)?;
    let v = tape.value(scores);
    let nq = episode.query.nrows();
    Ok(match model.head {
        HeadKind::ProtoNet | HeadKind::SimpleShot => v.clone(),
        HeadKind::RelationNet => v.clone().into_shape_with_order((nq, episode.way)).expect("pairs"),
        HeadKind::MatchingNet => {
            let att = softmax_rows(v);
            let mut out = Matrix::zeros((nq, episode.way));
            for (i, row) in att.rows().into_iter().enumerate() {
                for (&a, &l) in row.iter().zip(&episode.support_labels) {
                    out[[i, l]] += a;
                }
            }
            out
        }
    })
}
