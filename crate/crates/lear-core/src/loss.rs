//! Training objectives: start/end boundary cross entropy, the nested match
//! loss with its dynamic mask, and their weighted combination.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scoring::BoundaryVars;

/// Whether spans of the same category may overlap; decides the loss shape
/// and the decoding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpanMode {
    Flat,
    Nested,
}

impl std::str::FromStr for SpanMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(SpanMode::Flat),
            "nested" => Ok(SpanMode::Nested),
            other => Err(Error::Config(format!("unknown span mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SpanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpanMode::Flat => "flat",
            SpanMode::Nested => "nested",
        })
    }
}

/// Ground-truth indicators derived from a record's span list. `starts[c][i]`
/// is 1.0 iff token i starts a gold span of category c; `pairs[c]` is the
/// flattened n-by-n matrix with 1.0 where (i, j) demarcates a gold span
/// (nested mode only).
#[derive(Debug, Clone)]
pub struct GoldLabels {
    pub starts: Vec<Vec<f64>>,
    pub ends: Vec<Vec<f64>>,
    pub pairs: Option<Vec<Vec<f64>>>,
}

impl GoldLabels {
    pub fn categories(&self) -> usize {
        self.starts.len()
    }

    pub fn tokens(&self) -> usize {
        self.starts.first().map_or(0, |s| s.len())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || (alpha == 0.0 && beta == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and not both zero (alpha={alpha}, beta={beta})"
            )));
        }
        Ok(LossWeights { alpha, beta })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Start and end boundary losses:
/// `L_s = (1/n) sum_c sum_i CE(start_c_i, S_c_i)`, with n the true token
/// count. `token_mask` removes padded positions from the sum.
pub fn boundary_loss(
    g: &mut Graph,
    vars: &BoundaryVars,
    gold: &GoldLabels,
    token_mask: &[bool],
) -> Result<(Var, Var)> {
    if vars.start.len() != gold.categories() {
        return Err(Error::Shape {
            op: "boundary_loss",
            left: vec![vars.start.len()],
            right: vec![gold.categories()],
        });
    }
    let n_true = token_mask.iter().filter(|&&m| m).count();
    if n_true == 0 {
        return Err(Error::EmptyInput("boundary_loss over no real tokens".into()));
    }
    let weights: Vec<f64> = token_mask
        .iter()
        .map(|&m| if m { 1.0 } else { 0.0 })
        .collect();
    let mut sum_over = |probs: &[Var], targets: &[Vec<f64>]| -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (c, &p) in probs.iter().enumerate() {
            let part = g.bce_sum(p, &targets[c], &weights)?;
            acc = Some(match acc {
                Some(a) => g.add(a, part)?,
                None => part,
            });
        }
        g.scale(acc.expect("at least one category"), 1.0 / n_true as f64)
    };
    let l_s = sum_over(&vars.start, &gold.starts)?;
    let l_e = sum_over(&vars.end, &gold.ends)?;
    Ok((l_s, l_e))
}

/// Nested match loss:
/// `L_match = (1/n^2) sum_{i,j} sum_c CE(P_c_ij, M_c_ij) W_c_ij` with
/// `W_c_ij = 1` iff `P_c_ij > 0.5` or `M_c_ij = 1`. W is computed from the
/// forward values and carries no gradient; cells outside the candidate
/// region (i > j, span too long, or touching padding) contribute 0.
pub fn match_loss(
    g: &mut Graph,
    pair_vars: &[Var],
    gold: &GoldLabels,
    max_span_len: usize,
    n_true: usize,
) -> Result<Var> {
    let gold_pairs = gold.pairs.as_ref().ok_or_else(|| {
        Error::Contract("match_loss requires gold pair matrices (nested mode)".into())
    })?;
    if pair_vars.len() != gold_pairs.len() {
        return Err(Error::Shape {
            op: "match_loss",
            left: vec![pair_vars.len()],
            right: vec![gold_pairs.len()],
        });
    }
    if n_true == 0 {
        return Err(Error::EmptyInput("match_loss over no real tokens".into()));
    }
    let mut acc: Option<Var> = None;
    for (c, &p) in pair_vars.iter().enumerate() {
        let n_pad = g.value(p).shape()[0];
        let probs = g.value(p).data();
        let m = &gold_pairs[c];
        if m.len() != n_pad * n_pad {
            return Err(Error::Shape {
                op: "match_loss",
                left: vec![n_pad, n_pad],
                right: vec![m.len()],
            });
        }
        // Dynamic mask from forward values; non-differentiable gating.
        let w: Vec<f64> = (0..n_pad * n_pad)
            .map(|idx| {
                let (i, j) = (idx / n_pad, idx % n_pad);
                let candidate = i <= j && j - i < max_span_len && j < n_true;
                if candidate && (probs[idx] > 0.5 || m[idx] == 1.0) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let part = g.bce_sum(p, m, &w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, part)?,
            None => part,
        });
    }
    g.scale(
        acc.expect("at least one category"),
        1.0 / (n_true * n_true) as f64,
    )
}

/// Combines the pieces: flat is `L_s + L_e`; nested is
/// `alpha (L_s + L_e) + beta L_match`.
pub fn total_loss(
    g: &mut Graph,
    mode: SpanMode,
    l_s: Var,
    l_e: Var,
    l_match: Option<Var>,
    weights: &LossWeights,
) -> Result<Var> {
    let boundary = g.add(l_s, l_e)?;
    match mode {
        SpanMode::Flat => Ok(boundary),
        SpanMode::Nested => {
            let l_match = l_match
                .ok_or_else(|| Error::Contract("nested total loss requires L_match".into()))?;
            let a = g.scale(boundary, weights.alpha)?;
            let b = g.scale(l_match, weights.beta)?;
            g.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn vars_from(
        g: &mut Graph,
        start: Vec<Vec<f64>>,
        end: Vec<Vec<f64>>,
    ) -> BoundaryVars {
        BoundaryVars {
            start: start
                .into_iter()
                .map(|v| {
                    let n = v.len();
                    g.constant(Tensor::from_vec(vec![n], v).unwrap())
                })
                .collect(),
            end: end
                .into_iter()
                .map(|v| {
                    let n = v.len();
                    g.constant(Tensor::from_vec(vec![n], v).unwrap())
                })
                .collect(),
        }
    }

    #[test]
    fn perfect_confident_predictions_have_negligible_loss() {
        let mut g = Graph::new();
        let vars = vars_from(
            &mut g,
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
        );
        let gold = GoldLabels {
            starts: vec![vec![1.0, 0.0]],
            ends: vec![vec![0.0, 1.0]],
            pairs: None,
        };
        let (l_s, l_e) = boundary_loss(&mut g, &vars, &gold, &[true, true]).unwrap();
        assert!(g.data(l_s)[0] < 1e-10);
        assert!(g.data(l_e)[0] < 1e-10);
    }

    #[test]
    fn half_probability_gives_ln_two() {
        let mut g = Graph::new();
        let vars = vars_from(&mut g, vec![vec![0.5]], vec![vec![0.5]]);
        let gold = GoldLabels {
            starts: vec![vec![1.0]],
            ends: vec![vec![0.0]],
            pairs: None,
        };
        let (l_s, _) = boundary_loss(&mut g, &vars, &gold, &[true]).unwrap();
        assert!((g.data(l_s)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.data(l_s)[0] - 0.69315).abs() < 1e-5);
    }

    #[test]
    fn random_boundary_loss_matches_loop_oracle() {
        let mut rng = crate::tensor::Rng::new(3);
        let (n, cats) = (5, 3);
        let start: Vec<Vec<f64>> = (0..cats)
            .map(|_| (0..n).map(|_| rng.uniform(0.01, 0.99)).collect())
            .collect();
        let gold_s: Vec<Vec<f64>> = (0..cats)
            .map(|_| (0..n).map(|_| if rng.chance(0.3) { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut g = Graph::new();
        let vars = vars_from(&mut g, start.clone(), start.clone());
        let gold = GoldLabels {
            starts: gold_s.clone(),
            ends: gold_s.clone(),
            pairs: None,
        };
        let (l_s, _) = boundary_loss(&mut g, &vars, &gold, &[true; 5]).unwrap();
        let mut expect = 0.0;
        for c in 0..cats {
            for i in 0..n {
                let (p, y) = (start[c][i], gold_s[c][i]);
                expect += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            }
        }
        expect /= n as f64;
        assert!((g.data(l_s)[0] - expect).abs() < 1e-12);
        assert!(g.data(l_s)[0] >= 0.0);
    }

    #[test]
    fn padded_positions_are_excluded() {
        let mut g = Graph::new();
        let vars = vars_from(&mut g, vec![vec![0.5, 0.9]], vec![vec![0.5, 0.9]]);
        let gold = GoldLabels {
            starts: vec![vec![1.0, 0.0]],
            ends: vec![vec![1.0, 0.0]],
            pairs: None,
        };
        let (l_s, _) = boundary_loss(&mut g, &vars, &gold, &[true, false]).unwrap();
        assert!((g.data(l_s)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn duplicating_categories_doubles_boundary_loss() {
        let mut g = Graph::new();
        let single = vars_from(&mut g, vec![vec![0.3, 0.8]], vec![vec![0.6, 0.2]]);
        let double = vars_from(
            &mut g,
            vec![vec![0.3, 0.8], vec![0.3, 0.8]],
            vec![vec![0.6, 0.2], vec![0.6, 0.2]],
        );
        let gold1 = GoldLabels {
            starts: vec![vec![0.0, 1.0]],
            ends: vec![vec![1.0, 0.0]],
            pairs: None,
        };
        let gold2 = GoldLabels {
            starts: vec![vec![0.0, 1.0], vec![0.0, 1.0]],
            ends: vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            pairs: None,
        };
        let (l1, _) = boundary_loss(&mut g, &single, &gold1, &[true, true]).unwrap();
        let (l2, _) = boundary_loss(&mut g, &double, &gold2, &[true, true]).unwrap();
        assert!((g.data(l2)[0] - 2.0 * g.data(l1)[0]).abs() < 1e-12);
    }

    #[test]
    fn match_loss_empty_mask_is_zero() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![2, 2], vec![0.2, 0.3, 0.1, 0.4]).unwrap());
        let gold = GoldLabels {
            starts: vec![],
            ends: vec![],
            pairs: Some(vec![vec![0.0; 4]]),
        };
        let l = match_loss(&mut g, &[p], &gold, 8, 2).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
    }

    #[test]
    fn match_loss_single_cell_closed_form() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_vec(vec![1, 1], vec![0.5]).unwrap());
        let gold = GoldLabels {
            starts: vec![],
            ends: vec![],
            pairs: Some(vec![vec![1.0]]),
        };
        let l = match_loss(&mut g, &[p], &gold, 8, 1).unwrap();
        assert!((g.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn match_loss_matches_loop_oracle_with_gating() {
        let mut rng = crate::tensor::Rng::new(7);
        let n = 4;
        let max_span = 3;
        let probs = rng.uniform_tensor(vec![n, n], 0.01, 0.99);
        let m: Vec<f64> = (0..n * n)
            .map(|idx| {
                let (i, j) = (idx / n, idx % n);
                if i <= j && rng.chance(0.3) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let gold = GoldLabels {
            starts: vec![],
            ends: vec![],
            pairs: Some(vec![m.clone()]),
        };
        let l = match_loss(&mut g, &[p], &gold, max_span, n).unwrap();
        let mut expect = 0.0;
        for i in 0..n {
            for j in 0..n {
                let idx = i * n + j;
                let candidate = i <= j && j - i < max_span;
                let gated = candidate && (probs.data()[idx] > 0.5 || m[idx] == 1.0);
                if gated {
                    let (p, y) = (probs.data()[idx], m[idx]);
                    expect += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                }
            }
        }
        expect /= (n * n) as f64;
        assert!((g.data(l)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn match_loss_without_gold_pairs_is_contract_error() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(vec![2, 2]));
        let gold = GoldLabels {
            starts: vec![],
            ends: vec![],
            pairs: None,
        };
        assert!(matches!(
            match_loss(&mut g, &[p], &gold, 8, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn match_loss_gradient_treats_gate_as_constant() {
        // All probabilities far from 0.5 so the gate is locally constant and
        // finite differences are a valid oracle.
        let n = 3;
        let base = vec![0.9, 0.2, 0.8, 0.1, 0.7, 0.3, 0.2, 0.1, 0.6];
        let m = vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let loss_of = |data: &[f64]| {
            let mut g = Graph::new();
            let p = g.leaf(Tensor::from_vec(vec![n, n], data.to_vec()).unwrap(), true);
            let gold = GoldLabels {
                starts: vec![],
                ends: vec![],
                pairs: Some(vec![m.clone()]),
            };
            let l = match_loss(&mut g, &[p], &gold, n, n).unwrap();
            (g.data(l)[0], g, p, l)
        };
        let (_, mut g, p, l) = loss_of(&base);
        g.backward(l).unwrap();
        let grad = g.grad(p).unwrap().to_vec();
        let h = 1e-6;
        for i in 0..n * n {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fd = (loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() < 1e-5,
                "cell {i}: {} vs {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn total_loss_combinations() {
        let mut g = Graph::new();
        let l_s = g.scalar(0.3);
        let l_e = g.scalar(0.2);
        let flat = total_loss(&mut g, SpanMode::Flat, l_s, l_e, None, &LossWeights::default())
            .unwrap();
        assert!((g.data(flat)[0] - 0.5).abs() < 1e-15);

        let l_s = g.scalar(0.4);
        let l_e = g.scalar(0.6);
        let l_m = g.scalar(123.0);
        let w = LossWeights::new(1.0, 0.0).unwrap();
        let nested = total_loss(&mut g, SpanMode::Nested, l_s, l_e, Some(l_m), &w).unwrap();
        assert!((g.data(nested)[0] - 1.0).abs() < 1e-15);

        let l_s = g.scalar(0.4);
        let l_e = g.scalar(0.6);
        let l_m = g.scalar(0.1);
        let w = LossWeights::new(0.5, 2.0).unwrap();
        let nested = total_loss(&mut g, SpanMode::Nested, l_s, l_e, Some(l_m), &w).unwrap();
        assert!((g.data(nested)[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn nested_total_without_match_loss_is_contract_error() {
        let mut g = Graph::new();
        let l_s = g.scalar(0.1);
        let l_e = g.scalar(0.1);
        assert!(matches!(
            total_loss(&mut g, SpanMode::Nested, l_s, l_e, None, &LossWeights::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn loss_weights_reject_double_zero() {
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
        assert!(LossWeights::new(0.0, 1.0).is_ok());
    }
}
