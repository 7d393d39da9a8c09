//! Linear-chain CRF over the three coarse labels {O, B, I}.
//!
//! A path `y` over `n` positions scores
//!
//! ```text
//! score(y) = start[y_0] + Σ_t emission[t, y_t] + Σ_{t>0} trans[y_{t−1}, y_t] + end[y_{n−1}]
//! ```
//!
//! The log-partition sums `exp(score)` over all `3^n` paths with the forward
//! recursion in log space. Training minimizes `log Z − score(gold)`, whose
//! gradient is the difference between posterior marginals (from the
//! forward–backward recursions) and the gold indicator counts.
//!
//! With hard constraints the transitions `O → I` and `start → I` are pinned
//! to [`FORBIDDEN_SCORE`], so decoded paths are always well-formed BIO.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{logsumexp, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};

pub const NUM_LABELS: usize = 3;

/// Stand-in for −∞ on forbidden transitions.
pub const FORBIDDEN_SCORE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Coarse {
    O = 0,
    B = 1,
    I = 2,
}

impl Coarse {
    pub const ALL: [Coarse; 3] = [Coarse::O, Coarse::B, Coarse::I];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// Coarse projection of a BIO slot tag (the slot name is dropped).
    pub fn from_tag(tag: &str) -> Self {
        match tag.as_bytes().first() {
            Some(b'B') => Coarse::B,
            Some(b'I') => Coarse::I,
            _ => Coarse::O,
        }
    }
}

/// One coarse label per token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CoarseSequence(pub Vec<Coarse>);

impl CoarseSequence {
    pub fn from_tags<S: AsRef<str>>(tags: &[S]) -> Self {
        Self(tags.iter().map(|t| Coarse::from_tag(t.as_ref())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// No leading `I` and no `I` directly after `O`.
    pub fn is_well_formed(&self) -> bool {
        let mut prev = Coarse::O;
        for &c in &self.0 {
            if c == Coarse::I && prev == Coarse::O {
                return false;
            }
            prev = c;
        }
        true
    }

    /// Renders as BIO tags with a single entity type `kind`.
    pub fn to_tags(&self, kind: &str) -> Vec<String> {
        self.0
            .iter()
            .map(|c| match c {
                Coarse::O => "O".to_owned(),
                Coarse::B => format!("B-{kind}"),
                Coarse::I => format!("I-{kind}"),
            })
            .collect()
    }
}

impl std::fmt::Display for CoarseSequence {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s: Vec<&str> = self
            .0
            .iter()
            .map(|c| match c {
                Coarse::O => "O",
                Coarse::B => "B",
                Coarse::I => "I",
            })
            .collect();
        f.write_str(&s.join(" "))
    }
}

type Square = [[f64; NUM_LABELS]; NUM_LABELS];
type Row = [f64; NUM_LABELS];

/// Plain-value CRF scores.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfScores {
    pub transitions: Square,
    pub start: Row,
    pub end: Row,
    pub hard_constraints: bool,
}

impl CrfScores {
    pub fn zeros(hard_constraints: bool) -> Self {
        Self {
            transitions: [[0.0; 3]; 3],
            start: [0.0; 3],
            end: [0.0; 3],
            hard_constraints,
        }
    }

    /// Scores with the constraint mask applied.
    pub fn effective(&self) -> (Square, Row, Row) {
        let mut trans = self.transitions;
        let mut start = self.start;
        if self.hard_constraints {
            trans[Coarse::O.index()][Coarse::I.index()] = FORBIDDEN_SCORE;
            start[Coarse::I.index()] = FORBIDDEN_SCORE;
        }
        (trans, start, self.end)
    }

    fn from_tensors(trans: &Tensor, start: &Tensor, end: &Tensor, hard_constraints: bool) -> Self {
        let mut s = Self::zeros(hard_constraints);
        for i in 0..3 {
            for j in 0..3 {
                s.transitions[i][j] = trans.data()[i * 3 + j];
            }
            s.start[i] = start.data()[i];
            s.end[i] = end.data()[i];
        }
        s
    }
}

fn emission_rows(emissions: &Tensor) -> Vec<Row> {
    assert_eq!(emissions.cols(), NUM_LABELS, "emissions must have 3 columns");
    (0..emissions.rows())
        .map(|t| {
            let r = emissions.row_slice(t);
            [r[0], r[1], r[2]]
        })
        .collect()
}

fn lse3(xs: Row) -> f64 {
    logsumexp(&xs)
}

fn forward(em: &[Row], trans: &Square, start: &Row) -> Vec<Row> {
    let mut alpha = Vec::with_capacity(em.len());
    alpha.push(std::array::from_fn(|y| start[y] + em[0][y]));
    for t in 1..em.len() {
        let prev: Row = alpha[t - 1];
        alpha.push(std::array::from_fn(|y| {
            em[t][y] + lse3(std::array::from_fn(|z| prev[z] + trans[z][y]))
        }));
    }
    alpha
}

fn backward(em: &[Row], trans: &Square, end: &Row) -> Vec<Row> {
    let n = em.len();
    let mut beta = vec![[0.0; 3]; n];
    beta[n - 1] = *end;
    for t in (0..n - 1).rev() {
        let next = beta[t + 1];
        beta[t] = std::array::from_fn(|y| lse3(std::array::from_fn(|z| trans[y][z] + em[t + 1][z] + next[z])));
    }
    beta
}

/// `log Σ_paths exp(score)` via the forward recursion.
pub fn crf_log_partition(emissions: &Tensor, scores: &CrfScores) -> f64 {
    let em = emission_rows(emissions);
    let (trans, start, end) = scores.effective();
    let alpha = forward(&em, &trans, &start);
    let last = alpha[em.len() - 1];
    lse3(std::array::from_fn(|y| last[y] + end[y]))
}

/// Score of one path under the (masked) scores.
pub fn crf_path_score(emissions: &Tensor, path: &CoarseSequence, scores: &CrfScores) -> f64 {
    let em = emission_rows(emissions);
    let (trans, start, end) = scores.effective();
    path_score(&em, &path.0, &trans, &start, &end)
}

fn path_score(em: &[Row], path: &[Coarse], trans: &Square, start: &Row, end: &Row) -> f64 {
    let mut s = start[path[0].index()] + end[path[path.len() - 1].index()];
    for (t, &y) in path.iter().enumerate() {
        s += em[t][y.index()];
        if t > 0 {
            s += trans[path[t - 1].index()][y.index()];
        }
    }
    s
}

fn check_gold(gold: &CoarseSequence, n: usize, hard_constraints: bool) -> Result<()> {
    if gold.len() != n {
        return Err(Error::Invalid(format!("gold length {} for {n} emissions", gold.len())));
    }
    if hard_constraints {
        let mut prev = Coarse::O;
        for (t, &c) in gold.0.iter().enumerate() {
            if c == Coarse::I && prev == Coarse::O {
                return Err(Error::ForbiddenGoldPath(t));
            }
            prev = c;
        }
    }
    Ok(())
}

/// Negative log-likelihood of `gold`: `log Z − score(gold)`.
pub fn crf_nll(emissions: &Tensor, gold: &CoarseSequence, scores: &CrfScores) -> Result<f64> {
    check_gold(gold, emissions.rows(), scores.hard_constraints)?;
    Ok(crf_log_partition(emissions, scores) - crf_path_score(emissions, gold, scores))
}

/// Highest-scoring path. Among equal-scoring paths the one that is smallest
/// in label order O < B < I, compared from the first position, wins.
pub fn crf_viterbi(emissions: &Tensor, scores: &CrfScores) -> CoarseSequence {
    let em = emission_rows(emissions);
    let n = em.len();
    let (trans, start, end) = scores.effective();
    // best[t][y]: best score of positions t.. given y_t = y.
    let mut best = vec![[0.0; 3]; n];
    best[n - 1] = std::array::from_fn(|y| em[n - 1][y] + end[y]);
    for t in (0..n - 1).rev() {
        let next = best[t + 1];
        best[t] = std::array::from_fn(|y| {
            em[t][y] + (0..3).map(|z| trans[y][z] + next[z]).fold(f64::NEG_INFINITY, f64::max)
        });
    }
    let first_max = |vals: [f64; 3]| {
        let mut arg = 0;
        for y in 1..3 {
            if vals[y] > vals[arg] {
                arg = y;
            }
        }
        arg
    };
    let mut path = Vec::with_capacity(n);
    let mut y = first_max(std::array::from_fn(|y| start[y] + best[0][y]));
    path.push(Coarse::from_index(y));
    for row in best.iter().skip(1) {
        y = first_max(std::array::from_fn(|z| trans[y][z] + row[z]));
        path.push(Coarse::from_index(y));
    }
    CoarseSequence(path)
}

/// Gradient of `log Z − score(gold)` with respect to emissions, transitions,
/// start and end scores.
fn nll_gradients(em: &[Row], gold: &[Coarse], s: &CrfScores) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = em.len();
    let (trans, start, end) = s.effective();
    let alpha = forward(em, &trans, &start);
    let beta = backward(em, &trans, &end);
    let last = alpha[n - 1];
    let log_z = lse3(std::array::from_fn(|y| last[y] + end[y]));

    let mut d_em = vec![0.0; n * 3];
    let mut d_trans = vec![0.0; 9];
    let mut d_start = vec![0.0; 3];
    let mut d_end = vec![0.0; 3];
    for t in 0..n {
        for y in 0..3 {
            let p = (alpha[t][y] + beta[t][y] - log_z).exp();
            d_em[t * 3 + y] += p;
            if t == 0 {
                d_start[y] += p;
            }
            if t == n - 1 {
                d_end[y] += p;
            }
        }
        if t + 1 < n {
            for y in 0..3 {
                for z in 0..3 {
                    d_trans[y * 3 + z] +=
                        (alpha[t][y] + trans[y][z] + em[t + 1][z] + beta[t + 1][z] - log_z).exp();
                }
            }
        }
    }
    for (t, &c) in gold.iter().enumerate() {
        d_em[t * 3 + c.index()] -= 1.0;
        if t > 0 {
            d_trans[gold[t - 1].index() * 3 + c.index()] -= 1.0;
        }
    }
    d_start[gold[0].index()] -= 1.0;
    d_end[gold[n - 1].index()] -= 1.0;
    if s.hard_constraints {
        // Pinned entries do not depend on the learned values.
        d_trans[Coarse::O.index() * 3 + Coarse::I.index()] = 0.0;
        d_start[Coarse::I.index()] = 0.0;
    }
    (d_em, d_trans, d_start, d_end)
}

struct CrfNllOp {
    gold: Vec<Coarse>,
    hard_constraints: bool,
}

impl CustomOp for CrfNllOp {
    fn name(&self) -> &'static str {
        "crf_nll"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>> {
        let em = emission_rows(inputs[0]);
        let scores = CrfScores::from_tensors(inputs[1], inputs[2], inputs[3], self.hard_constraints);
        let (mut a, mut b, mut c, mut d) = nll_gradients(&em, &self.gold, &scores);
        for v in [&mut a, &mut b, &mut c, &mut d] {
            v.iter_mut().for_each(|x| *x *= grad[0]);
        }
        vec![a, b, c, d]
    }
}

/// Learned CRF scores in a [`ParamStore`], zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct CrfLayer {
    pub transitions: ParamId,
    pub start: ParamId,
    pub end: ParamId,
    pub hard_constraints: bool,
}

impl CrfLayer {
    pub fn new(store: &mut ParamStore, prefix: &str, hard_constraints: bool) -> Result<Self> {
        Ok(Self {
            transitions: store.add(format!("{prefix}.transitions"), Tensor::zeros(&[3, 3]), true)?,
            start: store.add(format!("{prefix}.start"), Tensor::zeros(&[3]), true)?,
            end: store.add(format!("{prefix}.end"), Tensor::zeros(&[3]), true)?,
            hard_constraints,
        })
    }

    pub fn scores(&self, store: &ParamStore) -> CrfScores {
        CrfScores::from_tensors(
            store.value(self.transitions),
            store.value(self.start),
            store.value(self.end),
            self.hard_constraints,
        )
    }

    /// Sequence NLL of `gold` as a graph node.
    pub fn nll(&self, g: &mut Graph<'_>, emissions: Var, gold: &CoarseSequence) -> Result<Var> {
        let em = g.value(emissions);
        if em.cols() != NUM_LABELS {
            return Err(Error::Shape {
                op: "crf_nll",
                left: em.shape().to_vec(),
                right: vec![em.rows(), NUM_LABELS],
            });
        }
        let scores = self.scores(g.params());
        let value = crf_nll(em, gold, &scores)?;
        let inputs = [
            emissions,
            g.param(self.transitions),
            g.param(self.start),
            g.param(self.end),
        ];
        let op = CrfNllOp {
            gold: gold.0.clone(),
            hard_constraints: self.hard_constraints,
        };
        Ok(g.custom(Box::new(op), &inputs, Tensor::scalar(value)))
    }
}
