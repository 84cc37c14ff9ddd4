//! Start/end boundary probability heads and the nested-span pair classifier.
//!
//! Boundary head per token i: `sigmoid(row_sum(M_s ∘ h_hat_i + b_s))`, where
//! `M_s` is `[|C|, d]`, the product is elementwise over the `[|C|, d]` slice
//! and `b_s` broadcasts across categories. The end head uses the same form
//! with its own parameters. The pair classifier scores a candidate span
//! (i, j) as `sigmoid(M_pair · concat(h_hat_i, h_hat_j))`; it is evaluated
//! through the equivalent split `M_left·h_i + M_right·h_j`, which avoids
//! materializing n^2 concatenations.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Binder, ParamSet};
use crate::tensor::{Rng, Tensor};

pub const DEFAULT_MAX_SPAN_LEN: usize = 32;

pub fn init_scoring_params(
    params: &mut ParamSet,
    d: usize,
    categories: usize,
    pair_per_category: bool,
    rng: &mut Rng,
) {
    params.insert("head.m_s", rng.xavier(d, categories, vec![categories, d]));
    params.insert("head.b_s", Tensor::zeros(vec![d]));
    params.insert("head.m_e", rng.xavier(d, categories, vec![categories, d]));
    params.insert("head.b_e", Tensor::zeros(vec![d]));
    let pair_rows = if pair_per_category { categories } else { 1 };
    params.insert(
        "head.m_pair",
        rng.xavier(2 * d, 1, vec![pair_rows, 2 * d]),
    );
}

/// Per-category boundary probability vectors, still attached to the graph.
pub struct BoundaryVars {
    pub start: Vec<Var>,
    pub end: Vec<Var>,
}

/// Detached boundary probabilities, `[n, |C|]` each, entries in [0, 1].
#[derive(Debug, Clone)]
pub struct BoundaryScores {
    pub start: Tensor,
    pub end: Tensor,
}

impl BoundaryScores {
    pub fn tokens(&self) -> usize {
        self.start.shape()[0]
    }

    pub fn categories(&self) -> usize {
        self.start.shape()[1]
    }

    pub fn start_column(&self, c: usize) -> Vec<f64> {
        (0..self.tokens()).map(|i| self.start.at2(i, c)).collect()
    }

    pub fn end_column(&self, c: usize) -> Vec<f64> {
        (0..self.tokens()).map(|i| self.end.at2(i, c)).collect()
    }
}

fn boundary_head(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_hat: &[Var],
    weight_name: &str,
    bias_name: &str,
) -> Result<Vec<Var>> {
    let m = b.bind(g, params, weight_name);
    let bias = b.bind(g, params, bias_name);
    let categories = g.value(m).shape()[0];
    if h_hat.len() != categories {
        return Err(Error::Shape {
            op: "score_boundaries",
            left: vec![h_hat.len()],
            right: g.value(m).shape().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(categories);
    for (c, &h) in h_hat.iter().enumerate() {
        let row = g.slice_rows(m, c, 1)?;
        let scaled = g.mul_row_broadcast(h, row)?;
        let shifted = g.add_row_broadcast(scaled, bias)?;
        let logits = g.row_sum(shifted);
        out.push(g.sigmoid(logits));
    }
    Ok(out)
}

/// Start and end probabilities for every token and category.
pub fn score_boundaries(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_hat: &[Var],
) -> Result<BoundaryVars> {
    Ok(BoundaryVars {
        start: boundary_head(g, b, params, h_hat, "head.m_s", "head.b_s")?,
        end: boundary_head(g, b, params, h_hat, "head.m_e", "head.b_e")?,
    })
}

/// Copies per-category probability vectors out of the graph into `[n, |C|]`
/// tensors.
pub fn collect_boundary_scores(g: &Graph, vars: &BoundaryVars) -> BoundaryScores {
    let categories = vars.start.len();
    let n = g.value(vars.start[0]).numel();
    let mut start = vec![0.0; n * categories];
    let mut end = vec![0.0; n * categories];
    for c in 0..categories {
        for i in 0..n {
            start[i * categories + c] = g.data(vars.start[c])[i];
            end[i * categories + c] = g.data(vars.end[c])[i];
        }
    }
    BoundaryScores {
        start: Tensor::from_vec(vec![n, categories], start).expect("shape"),
        end: Tensor::from_vec(vec![n, categories], end).expect("shape"),
    }
}

/// Full pair-probability matrices per category, still attached to the graph.
/// Only cells with `i <= j` and `j - i < max_span_len` are meaningful; the
/// rest are computed but must never be read (see [`PairScores`]).
pub fn score_pairs(
    g: &mut Graph,
    b: &mut Binder,
    params: &ParamSet,
    h_hat: &[Var],
) -> Result<Vec<Var>> {
    let m_pair = b.bind(g, params, "head.m_pair");
    let (pair_rows, two_d) = {
        let s = g.value(m_pair).shape();
        (s[0], s[1])
    };
    let d = two_d / 2;
    let mut out = Vec::with_capacity(h_hat.len());
    for (c, &h) in h_hat.iter().enumerate() {
        if g.value(h).cols() != d {
            return Err(Error::Shape {
                op: "score_pairs",
                left: g.value(h).shape().to_vec(),
                right: g.value(m_pair).shape().to_vec(),
            });
        }
        let row = if pair_rows == 1 { 0 } else { c };
        let m_row = g.slice_rows(m_pair, row, 1)?;
        let left = g.slice_cols(m_row, 0, d)?;
        let right = g.slice_cols(m_row, d, d)?;
        let left_t = g.transpose(left)?;
        let right_t = g.transpose(right)?;
        let n = g.value(h).rows();
        let li = g.matmul(h, left_t)?;
        let li = g.reshape(li, vec![n])?;
        let rj = g.matmul(h, right_t)?;
        let rj = g.reshape(rj, vec![n])?;
        let logits = g.outer_sum(li, rj)?;
        out.push(g.sigmoid(logits));
    }
    Ok(out)
}

/// Detached pair probabilities with the candidate-region contract enforced
/// on read.
#[derive(Debug, Clone)]
pub struct PairScores {
    pub max_span_len: usize,
    matrices: Vec<Tensor>,
}

impl PairScores {
    pub fn collect(g: &Graph, vars: &[Var], max_span_len: usize) -> Self {
        PairScores {
            max_span_len,
            matrices: vars.iter().map(|&v| g.value(v).clone()).collect(),
        }
    }

    pub fn from_matrices(matrices: Vec<Tensor>, max_span_len: usize) -> Self {
        PairScores {
            max_span_len,
            matrices,
        }
    }

    pub fn categories(&self) -> usize {
        self.matrices.len()
    }

    pub fn tokens(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.shape()[0])
    }

    pub fn is_candidate(&self, i: usize, j: usize) -> bool {
        i <= j && j - i < self.max_span_len
    }

    /// Probability that (i, j) demarcates a span of category `c`. Reading a
    /// cell outside the candidate region is a contract violation.
    pub fn get(&self, c: usize, i: usize, j: usize) -> Result<f64> {
        if i > j {
            return Err(Error::Contract(format!(
                "pair score requested with inverted indices ({i}, {j})"
            )));
        }
        if !self.is_candidate(i, j) {
            return Err(Error::Contract(format!(
                "pair ({i}, {j}) exceeds max span length {}",
                self.max_span_len
            )));
        }
        Ok(self.matrices[c].at2(i, j))
    }
}
