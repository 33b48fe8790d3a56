//! Linear-chain CRF: log-partition, negative log-likelihood, Viterbi and
//! n-best decoding.
//!
//! Transitions form a `(K+2) x (K+2)` matrix; row/column `K` is the virtual
//! START state and `K+1` the STOP state. A path `y` over the unmasked prefix
//! of length `L` scores
//!
//! ```text
//! trans[START][y0] + sum_t E[t][yt] + sum_t trans[yt][yt+1] + trans[y(L-1)][STOP]
//! ```
//!
//! Among equal-scoring paths the lexicographically smaller label sequence
//! ranks first (smaller label at the earliest differing position). Decoding
//! runs right to left so that rule falls out of choosing the smallest label
//! at each step.

use std::cmp::Ordering;

use crate::autodiff::{AutodiffError, CustomOp, Graph, NodeId, Tensor};

/// Score used to forbid transitions into START and out of STOP.
pub const FORBIDDEN: f64 = -10000.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CrfError {
    #[error("empty sequence after masking")]
    EmptySequence,
    #[error("mask must be a prefix of ones")]
    GappedMask,
    #[error("gold label {label} at position {pos} outside 0..{k}")]
    LabelOutOfRange { pos: usize, label: usize, k: usize },
    #[error("n-best size must be at least 1")]
    InvalidN,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl From<CrfError> for AutodiffError {
    fn from(e: CrfError) -> Self {
        AutodiffError::Shape {
            node: usize::MAX,
            op: "crf",
            detail: e.to_string(),
        }
    }
}

/// Transition scores, START/STOP included.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfParams {
    pub transitions: Tensor,
}

impl CrfParams {
    /// Zero transitions apart from the forbidden START/STOP entries.
    pub fn new(labels: usize) -> Self {
        let n = labels + 2;
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(i, labels, FORBIDDEN);
            t.set(labels + 1, i, FORBIDDEN);
        }
        CrfParams { transitions: t }
    }

    pub fn from_tensor(transitions: Tensor) -> Result<Self, CrfError> {
        match transitions.dims2() {
            Some((r, c)) if r == c && r >= 3 => Ok(CrfParams { transitions }),
            _ => Err(CrfError::Shape(format!(
                "transitions must be square with at least 3 states, got {:?}",
                transitions.shape()
            ))),
        }
    }

    pub fn labels(&self) -> usize {
        self.transitions.rows() - 2
    }
}

/// A decoded label sequence over the unmasked prefix and its score.
#[derive(Clone, Debug, PartialEq)]
pub struct PathResult {
    pub labels: Vec<usize>,
    pub score: f64,
}

impl PathResult {
    /// Labels extended with `pad` up to `len` positions.
    pub fn padded(&self, len: usize, pad: usize) -> Vec<usize> {
        let mut out = self.labels.clone();
        out.resize(len.max(out.len()), pad);
        out
    }

    /// `score\tlabel label ...`
    pub fn to_line(&self, names: &[String]) -> String {
        let labels: Vec<&str> = self.labels.iter().map(|&l| names[l].as_str()).collect();
        format!("{}\t{}", self.score, labels.join(" "))
    }
}

/// Length of the unmasked prefix.
pub fn active_length(mask: &[bool]) -> Result<usize, CrfError> {
    let len = mask.iter().take_while(|&&m| m).count();
    if mask[len..].iter().any(|&m| m) {
        return Err(CrfError::GappedMask);
    }
    Ok(len)
}

fn check(e: &Tensor, trans: &Tensor, mask: &[bool]) -> Result<(usize, usize), CrfError> {
    let (t, k) = e
        .dims2()
        .ok_or_else(|| CrfError::Shape(format!("emissions {:?} are not a matrix", e.shape())))?;
    if trans.dims2() != Some((k + 2, k + 2)) {
        return Err(CrfError::Shape(format!(
            "transitions {:?} do not fit {k} labels",
            trans.shape()
        )));
    }
    if mask.len() != t {
        return Err(CrfError::Shape(format!("mask length {} vs {t} positions", mask.len())));
    }
    let len = active_length(mask)?;
    if len == 0 {
        return Err(CrfError::EmptySequence);
    }
    Ok((len, k))
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Forward (`alpha`) and backward (`beta`) log-space tables over the first
/// `len` rows, plus `log Z`.
struct Lattice {
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_z: f64,
}

fn lattice(e: &Tensor, trans: &Tensor, len: usize, k: usize, with_beta: bool) -> Lattice {
    let (start, stop) = (k, k + 1);
    let mut alpha = vec![0.0; len * k];
    for y in 0..k {
        alpha[y] = trans.at(start, y) + e.at(0, y);
    }
    for t in 1..len {
        for y in 0..k {
            let prev = &alpha[(t - 1) * k..t * k];
            alpha[t * k + y] = lse(prev.iter().enumerate().map(|(p, a)| a + trans.at(p, y))) + e.at(t, y);
        }
    }
    let last = &alpha[(len - 1) * k..len * k];
    let log_z = lse(last.iter().enumerate().map(|(y, a)| a + trans.at(y, stop)));
    let mut beta = Vec::new();
    if with_beta {
        beta = vec![0.0; len * k];
        for y in 0..k {
            beta[(len - 1) * k + y] = trans.at(y, stop);
        }
        for t in (0..len - 1).rev() {
            for y in 0..k {
                let next = &beta[(t + 1) * k..(t + 2) * k];
                beta[t * k + y] = lse(
                    next.iter()
                        .enumerate()
                        .map(|(n, b)| trans.at(y, n) + e.at(t + 1, n) + b),
                );
            }
        }
    }
    Lattice { alpha, beta, log_z }
}

/// `log` of the sum of `exp(score)` over every label path.
pub fn log_partition(e: &Tensor, mask: &[bool], params: &CrfParams) -> Result<f64, CrfError> {
    let (len, k) = check(e, &params.transitions, mask)?;
    Ok(lattice(e, &params.transitions, len, k, false).log_z)
}

/// Score of one path over the unmasked prefix.
pub fn path_score(e: &Tensor, trans: &Tensor, labels: &[usize]) -> f64 {
    let k = trans.rows() - 2;
    let mut s = trans.at(k, labels[0]);
    for (t, &y) in labels.iter().enumerate() {
        s += e.at(t, y);
        if t + 1 < labels.len() {
            s += trans.at(y, labels[t + 1]);
        }
    }
    s + trans.at(*labels.last().unwrap(), k + 1)
}

fn validate_gold(gold: &[usize], len: usize, k: usize) -> Result<(), CrfError> {
    if gold.len() < len {
        return Err(CrfError::Shape(format!("{} gold labels for {len} positions", gold.len())));
    }
    if let Some((pos, &label)) = gold[..len].iter().enumerate().find(|(_, &l)| l >= k) {
        return Err(CrfError::LabelOutOfRange { pos, label, k });
    }
    Ok(())
}

struct LogPartitionOp {
    len: usize,
}

impl CustomOp for LogPartitionOp {
    fn name(&self) -> &'static str {
        "crf_log_partition"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, String> {
        let k = inputs[0].cols();
        Ok(Tensor::scalar(lattice(inputs[0], inputs[1], self.len, k, false).log_z))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (e, trans) = (inputs[0], inputs[1]);
        let (k, len) = (e.cols(), self.len);
        let (start, stop) = (k, k + 1);
        let g = grad.data()[0];
        let lat = lattice(e, trans, len, k, true);
        let mut ge = Tensor::zeros(e.shape());
        let mut gt = Tensor::zeros(trans.shape());
        for t in 0..len {
            for y in 0..k {
                let p = (lat.alpha[t * k + y] + lat.beta[t * k + y] - lat.log_z).exp();
                ge.set(t, y, g * p);
            }
        }
        for y in 0..k {
            let first = (lat.alpha[y] + lat.beta[y] - lat.log_z).exp();
            gt.set(start, y, gt.at(start, y) + g * first);
            let l = (len - 1) * k + y;
            let last = (lat.alpha[l] + lat.beta[l] - lat.log_z).exp();
            gt.set(y, stop, gt.at(y, stop) + g * last);
        }
        for t in 0..len - 1 {
            for i in 0..k {
                let a = lat.alpha[t * k + i];
                for j in 0..k {
                    let p = (a + trans.at(i, j) + e.at(t + 1, j) + lat.beta[(t + 1) * k + j] - lat.log_z).exp();
                    gt.set(i, j, gt.at(i, j) + g * p);
                }
            }
        }
        vec![Some(ge), Some(gt)]
    }
}

struct PathScoreOp {
    labels: Vec<usize>,
}

impl CustomOp for PathScoreOp {
    fn name(&self) -> &'static str {
        "crf_path_score"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, String> {
        Ok(Tensor::scalar(path_score(inputs[0], inputs[1], &self.labels)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let (e, trans) = (inputs[0], inputs[1]);
        let k = e.cols();
        let g = grad.data()[0];
        let mut ge = Tensor::zeros(e.shape());
        let mut gt = Tensor::zeros(trans.shape());
        let y = &self.labels;
        gt.set(k, y[0], g);
        for t in 0..y.len() {
            ge.set(t, y[t], ge.at(t, y[t]) + g);
            if t + 1 < y.len() {
                gt.set(y[t], y[t + 1], gt.at(y[t], y[t + 1]) + g);
            }
        }
        let last = *y.last().unwrap();
        gt.set(last, k + 1, gt.at(last, k + 1) + g);
        vec![Some(ge), Some(gt)]
    }
}

/// Differentiable `log Z` node over emissions `e` (`T x K`) and transitions.
pub fn log_partition_node(
    g: &mut Graph<'_>,
    e: NodeId,
    transitions: NodeId,
    mask: &[bool],
) -> Result<NodeId, AutodiffError> {
    let (len, _) = check(g.value(e), g.value(transitions), mask)?;
    g.custom(Box::new(LogPartitionOp { len }), &[e, transitions])
}

/// Differentiable score of the gold path.
pub fn path_score_node(
    g: &mut Graph<'_>,
    e: NodeId,
    transitions: NodeId,
    mask: &[bool],
    gold: &[usize],
) -> Result<NodeId, AutodiffError> {
    let (len, k) = check(g.value(e), g.value(transitions), mask)?;
    validate_gold(gold, len, k)?;
    g.custom(
        Box::new(PathScoreOp {
            labels: gold[..len].to_vec(),
        }),
        &[e, transitions],
    )
}

/// Sentence-level negative log-likelihood `log Z - score(gold)`.
pub fn nll_node(
    g: &mut Graph<'_>,
    e: NodeId,
    transitions: NodeId,
    mask: &[bool],
    gold: &[usize],
) -> Result<NodeId, AutodiffError> {
    let gold_score = path_score_node(g, e, transitions, mask, gold)?;
    let log_z = log_partition_node(g, e, transitions, mask)?;
    g.sub(log_z, gold_score)
}

pub fn nll_loss(e: &Tensor, mask: &[bool], gold: &[usize], params: &CrfParams) -> Result<f64, CrfError> {
    let (len, k) = check(e, &params.transitions, mask)?;
    validate_gold(gold, len, k)?;
    let log_z = lattice(e, &params.transitions, len, k, false).log_z;
    Ok(log_z - path_score(e, &params.transitions, &gold[..len]))
}

/// The highest-scoring path.
pub fn viterbi(e: &Tensor, mask: &[bool], params: &CrfParams) -> Result<PathResult, CrfError> {
    let trans = &params.transitions;
    let (len, k) = check(e, trans, mask)?;
    let (start, stop) = (k, k + 1);
    // suffix[t][y]: best score of positions t.. given y_t = y.
    let mut suffix = vec![0.0; len * k];
    let mut next = vec![0usize; len * k];
    for y in 0..k {
        suffix[(len - 1) * k + y] = e.at(len - 1, y) + trans.at(y, stop);
    }
    for t in (0..len - 1).rev() {
        for y in 0..k {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for n in 0..k {
                let s = trans.at(y, n) + suffix[(t + 1) * k + n];
                if s > best {
                    best = s;
                    arg = n;
                }
            }
            suffix[t * k + y] = e.at(t, y) + best;
            next[t * k + y] = arg;
        }
    }
    let mut best = f64::NEG_INFINITY;
    let mut y = 0;
    for c in 0..k {
        let s = trans.at(start, c) + suffix[c];
        if s > best {
            best = s;
            y = c;
        }
    }
    let mut labels = Vec::with_capacity(len);
    for t in 0..len {
        labels.push(y);
        if t + 1 < len {
            y = next[t * k + y];
        }
    }
    Ok(PathResult { labels, score: best })
}

#[derive(Clone, Copy)]
struct Entry {
    score: f64,
    next_label: usize,
    next_rank: usize,
}

fn rank_order(a: &Entry, b: &Entry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.next_label.cmp(&b.next_label))
        .then(a.next_rank.cmp(&b.next_rank))
}

/// The `min(n, K^L)` best paths in descending score; equal scores keep the
/// lexicographic tie order, so `nbest(.., 1)[0]` is the Viterbi path and
/// `nbest(.., n)` is a prefix of `nbest(.., n + 1)`.
pub fn nbest(e: &Tensor, mask: &[bool], params: &CrfParams, n: usize) -> Result<Vec<PathResult>, CrfError> {
    if n < 1 {
        return Err(CrfError::InvalidN);
    }
    let trans = &params.transitions;
    let (len, k) = check(e, trans, mask)?;
    let (start, stop) = (k, k + 1);
    // lists[t][y]: up to n best suffixes starting at t with y_t = y.
    let mut lists: Vec<Vec<Vec<Entry>>> = vec![Vec::new(); len];
    lists[len - 1] = (0..k)
        .map(|y| {
            vec![Entry {
                score: e.at(len - 1, y) + trans.at(y, stop),
                next_label: usize::MAX,
                next_rank: 0,
            }]
        })
        .collect();
    let mut candidates = Vec::with_capacity(k * n);
    for t in (0..len - 1).rev() {
        let mut here = Vec::with_capacity(k);
        for y in 0..k {
            candidates.clear();
            for (nl, list) in lists[t + 1].iter().enumerate() {
                for (r, entry) in list.iter().enumerate() {
                    candidates.push(Entry {
                        score: e.at(t, y) + (trans.at(y, nl) + entry.score),
                        next_label: nl,
                        next_rank: r,
                    });
                }
            }
            candidates.sort_by(rank_order);
            candidates.truncate(n);
            here.push(candidates.clone());
        }
        lists[t] = here;
    }
    let mut finals: Vec<Entry> = Vec::with_capacity(k * n);
    for (y, list) in lists[0].iter().enumerate() {
        for (r, entry) in list.iter().enumerate() {
            finals.push(Entry {
                score: trans.at(start, y) + entry.score,
                next_label: y,
                next_rank: r,
            });
        }
    }
    finals.sort_by(rank_order);
    finals.truncate(n);
    Ok(finals
        .into_iter()
        .map(|f| {
            let mut labels = Vec::with_capacity(len);
            let (mut y, mut r) = (f.next_label, f.next_rank);
            for t in 0..len {
                labels.push(y);
                let entry = lists[t][y][r];
                (y, r) = (entry.next_label, entry.next_rank);
            }
            PathResult { labels, score: f.score }
        })
        .collect())
}

/// Posterior label marginals `P(y_t = y)` over the unmasked prefix
/// (`L x K`).
pub fn marginals(e: &Tensor, mask: &[bool], params: &CrfParams) -> Result<Tensor, CrfError> {
    let (len, k) = check(e, &params.transitions, mask)?;
    let lat = lattice(e, &params.transitions, len, k, true);
    let data = (0..len * k)
        .map(|i| (lat.alpha[i] + lat.beta[i] - lat.log_z).exp())
        .collect();
    Ok(Tensor::matrix(len, k, data).expect("shape"))
}
