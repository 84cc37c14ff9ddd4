//! Span decoding: turning boundary and pair probabilities into spans.
//!
//! Three strategies:
//! - heuristic matching: a three-state machine over the token sequence that
//!   pairs high-probability starts with high-probability ends, always
//!   preferring the higher-probability boundary;
//! - nearest matching: each above-threshold start takes the nearest
//!   above-threshold end at or after it, non-overlapping;
//! - nested decoding: every candidate (start, end) pair within the span
//!   length bound is kept when the pair classifier fires.
//!
//! The published pseudocode for the heuristic matcher needs two corrections,
//! both applied here and in [`reference_span_determination`]:
//! 1. on the state-3 -> state-2 transition it assigns `a_s <- -1, a_e <- i`,
//!    which leaves state 2 without the pending start it tracks; the intent
//!    is `a_s <- i, a_e <- -1` (the new start becomes pending);
//! 2. a span still pending at the end of the sequence is never emitted; a
//!    final flush in state 3 is required, otherwise a lone start/end pair
//!    yields nothing.
//! One further reading is pinned down: within state 3 the end-replacement
//! branch and the new-start branch are exclusive (a token consumed as an end
//! candidate is not also a "new start"), which is what keeps the emitted
//! spans non-overlapping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{BoundaryScores, PairScores};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A decoded span with inclusive token indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub category: String,
    pub score: f64,
}

/// Category-less span used by the per-category decoders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Heuristic,
    Nearest,
    Nested,
}

impl std::str::FromStr for DecodeStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(DecodeStrategy::Heuristic),
            "nearest" => Ok(DecodeStrategy::Nearest),
            "nested" => Ok(DecodeStrategy::Nested),
            other => Err(Error::Config(format!("unknown decode strategy '{other}'"))),
        }
    }
}

impl std::fmt::Display for DecodeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeStrategy::Heuristic => "heuristic",
            DecodeStrategy::Nearest => "nearest",
            DecodeStrategy::Nested => "nested",
        })
    }
}

enum FsmState {
    Idle,
    Started { s: usize },
    Ended { s: usize, e: usize },
}

/// Heuristic matching over one category's boundary probabilities.
pub fn heuristic_match(start: &[f64], end: &[f64], threshold: f64) -> Result<Vec<Span>> {
    if start.len() != end.len() {
        return Err(Error::Shape {
            op: "heuristic_match",
            left: vec![start.len()],
            right: vec![end.len()],
        });
    }
    let mut out = Vec::new();
    let mut state = FsmState::Idle;
    let emit = |s: usize, e: usize, out: &mut Vec<Span>| {
        out.push(Span {
            start: s,
            end: e,
            score: 0.5 * (start[s] + end[e]),
        });
    };
    for i in 0..start.len() {
        if matches!(state, FsmState::Idle) && start[i] > threshold {
            state = FsmState::Started { s: i };
        }
        if let FsmState::Started { s } = state {
            let s = if start[i] > threshold && start[i] > start[s] {
                i
            } else {
                s
            };
            state = if end[i] > threshold {
                FsmState::Ended { s, e: i }
            } else {
                FsmState::Started { s }
            };
            if matches!(state, FsmState::Ended { .. }) {
                continue;
            }
        }
        if let FsmState::Ended { s, e } = state {
            if end[i] > threshold {
                if end[i] > end[e] {
                    state = FsmState::Ended { s, e: i };
                }
            } else if start[i] > threshold {
                emit(s, e, &mut out);
                state = FsmState::Started { s: i };
            }
        }
    }
    if let FsmState::Ended { s, e } = state {
        emit(s, e, &mut out);
    }
    Ok(out)
}

/// Line-by-line transcription of the published span-determination
/// pseudocode, with the two documented corrections and the exclusive-branch
/// reading of state 3. Kept as an independent oracle for the FSM above.
pub fn reference_span_determination(
    start_c: &[f64],
    end_c: &[f64],
    threshold: f64,
) -> Vec<(usize, usize)> {
    let l = start_c.len();
    let mut result: Vec<(usize, usize)> = Vec::new();
    let mut a_s: isize = -1;
    let mut a_e: isize = -1;
    let mut state = 1u8;
    for i in 0..l {
        if state == 1 && start_c[i] > threshold {
            a_s = i as isize;
            state = 2;
        }
        if state == 2 {
            if start_c[i] > threshold && start_c[i] > start_c[a_s as usize] {
                a_s = i as isize;
            }
            if end_c[i] > threshold {
                a_e = i as isize;
                state = 3;
            }
        }
        if state == 3 {
            if end_c[i] > threshold {
                if end_c[i] > end_c[a_e as usize] {
                    a_e = i as isize;
                }
            } else if start_c[i] > threshold {
                result.push((a_s as usize, a_e as usize));
                // printed as `a_s <- -1, a_e <- i`; corrected assignment:
                a_s = i as isize;
                a_e = -1;
                state = 2;
            }
        }
    }
    // end-of-sequence flush (absent from the printed pseudocode)
    if state == 3 {
        result.push((a_s as usize, a_e as usize));
    }
    result
}

/// Nearest matching: scan candidate starts left to right, pair each with the
/// nearest candidate end at or after it, and skip any start inside an
/// already-emitted span.
pub fn nearest_match(start: &[f64], end: &[f64], threshold: f64) -> Result<Vec<Span>> {
    if start.len() != end.len() {
        return Err(Error::Shape {
            op: "nearest_match",
            left: vec![start.len()],
            right: vec![end.len()],
        });
    }
    let ends: Vec<usize> = (0..end.len()).filter(|&j| end[j] > threshold).collect();
    let mut out = Vec::new();
    let mut next_allowed = 0usize;
    for s in (0..start.len()).filter(|&i| start[i] > threshold) {
        if s < next_allowed {
            continue;
        }
        if let Some(&e) = ends.iter().find(|&&e| e >= s) {
            out.push(Span {
                start: s,
                end: e,
                score: 0.5 * (start[s] + end[e]),
            });
            next_allowed = e + 1;
        }
    }
    Ok(out)
}

/// Nested decoding for one category: candidate starts and ends are the
/// above-threshold positions; every candidate pair `(i, j)` with `i <= j`
/// and `j - i < max_span_len` whose pair probability clears the threshold
/// becomes a span. Overlapping and nested outputs are permitted.
pub fn nested_match(
    start: &[f64],
    end: &[f64],
    pairs: &PairScores,
    category: usize,
    threshold: f64,
) -> Result<Vec<Span>> {
    if start.len() != end.len() {
        return Err(Error::Shape {
            op: "nested_match",
            left: vec![start.len()],
            right: vec![end.len()],
        });
    }
    let starts: Vec<usize> = (0..start.len()).filter(|&i| start[i] > threshold).collect();
    let ends: Vec<usize> = (0..end.len()).filter(|&j| end[j] > threshold).collect();
    let mut out = Vec::new();
    for &i in &starts {
        for &j in &ends {
            if j < i || !pairs.is_candidate(i, j) {
                continue;
            }
            let p = pairs.get(category, i, j)?;
            if p > threshold {
                out.push(Span {
                    start: i,
                    end: j,
                    score: p,
                });
            }
        }
    }
    out.sort_by(|a, b| (a.start, a.end).cmp(&(b.start, b.end)));
    Ok(out)
}

/// Decodes all categories of a scored text into span predictions.
pub fn decode_spans(
    boundary: &BoundaryScores,
    pairs: Option<&PairScores>,
    names: &[String],
    strategy: DecodeStrategy,
    threshold: f64,
) -> Result<Vec<SpanPrediction>> {
    if names.len() != boundary.categories() {
        return Err(Error::Shape {
            op: "decode_spans",
            left: vec![names.len()],
            right: vec![boundary.categories()],
        });
    }
    let mut out = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let start = boundary.start_column(c);
        let end = boundary.end_column(c);
        let spans = match strategy {
            DecodeStrategy::Heuristic => heuristic_match(&start, &end, threshold)?,
            DecodeStrategy::Nearest => nearest_match(&start, &end, threshold)?,
            DecodeStrategy::Nested => {
                let pairs = pairs.ok_or_else(|| {
                    Error::Contract("nested decoding requires pair scores".into())
                })?;
                nested_match(&start, &end, pairs, c, threshold)?
            }
        };
        out.extend(spans.into_iter().map(|s| SpanPrediction {
            start: s.start,
            end: s.end,
            category: name.clone(),
            score: s.score,
        }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn pairs_of(spans: &[(usize, usize)]) -> Vec<(usize, usize)> {
        spans.to_vec()
    }

    fn as_pairs(spans: &[Span]) -> Vec<(usize, usize)> {
        spans.iter().map(|s| (s.start, s.end)).collect()
    }

    #[test]
    fn heuristic_all_below_threshold_is_empty() {
        let spans = heuristic_match(&[0.4, 0.2, 0.1], &[0.3, 0.2, 0.4], 0.5).unwrap();
        assert!(spans.is_empty());
    }

    #[test]
    fn heuristic_single_pair_with_flush() {
        let spans = heuristic_match(&[0.9, 0.1, 0.1], &[0.1, 0.1, 0.8], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 2)]));
    }

    #[test]
    fn heuristic_higher_start_replaces_pending() {
        let spans = heuristic_match(&[0.6, 0.9, 0.1, 0.1], &[0.1, 0.1, 0.7, 0.1], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(1, 2)]));
    }

    #[test]
    fn heuristic_emits_on_new_start_then_flushes() {
        let spans = heuristic_match(&[0.9, 0.1, 0.8, 0.1], &[0.1, 0.9, 0.1, 0.7], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 1), (2, 3)]));
    }

    #[test]
    fn heuristic_single_token_span() {
        let spans = heuristic_match(&[0.9, 0.0, 0.0], &[0.9, 0.0, 0.0], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 0)]));
    }

    #[test]
    fn heuristic_length_mismatch_is_shape_error() {
        assert!(heuristic_match(&[0.9], &[0.1, 0.2], 0.5).is_err());
    }

    #[test]
    fn nearest_single_pair() {
        let spans = nearest_match(&[0.9, 0.0, 0.0], &[0.0, 0.0, 0.8], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 2)]));
    }

    #[test]
    fn nearest_skips_start_inside_emitted_span() {
        let spans = nearest_match(&[0.9, 0.6, 0.0], &[0.0, 0.0, 0.8], 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 2)]));
    }

    #[test]
    fn nearest_drops_unmatched_start() {
        let spans = nearest_match(&[0.0, 0.0, 0.9], &[0.8, 0.0, 0.0], 0.5).unwrap();
        assert!(spans.is_empty());
    }

    fn pair_scores(n: usize, max_span: usize, cells: &[(usize, usize, f64)]) -> PairScores {
        let mut m = Tensor::zeros(vec![n, n]);
        for &(i, j, p) in cells {
            m.data_mut()[i * n + j] = p;
        }
        PairScores::from_matrices(vec![m], max_span)
    }

    #[test]
    fn nested_no_candidates_is_empty() {
        let pairs = pair_scores(3, 3, &[]);
        let spans = nested_match(&[0.1; 3], &[0.2; 3], &pairs, 0, 0.5).unwrap();
        assert!(spans.is_empty());
    }

    #[test]
    fn nested_single_forced_candidate() {
        let pairs = pair_scores(3, 3, &[(0, 2, 0.9)]);
        let spans =
            nested_match(&[0.9, 0.0, 0.0], &[0.0, 0.0, 0.8], &pairs, 0, 0.5).unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 2)]));
        assert!((spans[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn nested_two_by_two_grid_keeps_thresholded_cells() {
        // starts at 0 and 1, ends at 1 and 3; P fires for (0,1), (1,3) only.
        let pairs = pair_scores(4, 4, &[(0, 1, 0.8), (0, 3, 0.2), (1, 1, 0.3), (1, 3, 0.7)]);
        let spans = nested_match(
            &[0.9, 0.8, 0.0, 0.0],
            &[0.0, 0.9, 0.0, 0.7],
            &pairs,
            0,
            0.5,
        )
        .unwrap();
        assert_eq!(as_pairs(&spans), pairs_of(&[(0, 1), (1, 3)]));
    }

    /// Brute force over every (i, j) pair, independent of candidate
    /// filtering order.
    fn nested_brute_force(
        start: &[f64],
        end: &[f64],
        pairs: &PairScores,
        threshold: f64,
    ) -> Vec<(usize, usize)> {
        let n = start.len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i <= j
                    && j - i < pairs.max_span_len
                    && start[i] > threshold
                    && end[j] > threshold
                    && pairs.get(0, i, j).unwrap() > threshold
                {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn nested_matches_brute_force_on_random_instances() {
        let mut rng = crate::tensor::Rng::new(42);
        for _ in 0..200 {
            let n = 2 + rng.below(7);
            let max_span = 1 + rng.below(n);
            let start: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let end: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let m = rng.uniform_tensor(vec![n, n], 0.0, 1.0);
            let pairs = PairScores::from_matrices(vec![m], max_span);
            let got = as_pairs(&nested_match(&start, &end, &pairs, 0, 0.5).unwrap());
            assert_eq!(got, nested_brute_force(&start, &end, &pairs, 0.5));
        }
    }

    #[test]
    fn decode_spans_assigns_category_names() {
        // columns: alpha start=[0.9,0,0] end=[0,0,0.8] -> (0,2);
        //          beta  start=[0.9,0,0] end=[0.9,0,0] -> (0,0)
        let boundary = BoundaryScores {
            start: Tensor::from_vec(vec![3, 2], vec![0.9, 0.9, 0.0, 0.0, 0.0, 0.0]).unwrap(),
            end: Tensor::from_vec(vec![3, 2], vec![0.0, 0.9, 0.0, 0.0, 0.8, 0.0]).unwrap(),
        };
        let names = vec!["alpha".to_string(), "beta".to_string()];
        let spans = decode_spans(
            &boundary,
            None,
            &names,
            DecodeStrategy::Heuristic,
            0.5,
        )
        .unwrap();
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[0].category, "alpha");
        assert_eq!((spans[0].start, spans[0].end), (0, 2));
        assert_eq!(spans[1].category, "beta");
        assert_eq!((spans[1].start, spans[1].end), (0, 0));
    }

    proptest! {
        /// The restructured FSM agrees with the literal transcription, and
        /// its output is ordered, non-overlapping and above threshold.
        #[test]
        fn fsm_agrees_with_reference_and_invariants(
            probs in proptest::collection::vec((0..5usize, 0..5usize), 1..8)
        ) {
            let grid = [0.0, 0.4, 0.6, 0.7, 0.9];
            let start: Vec<f64> = probs.iter().map(|&(s, _)| grid[s]).collect();
            let end: Vec<f64> = probs.iter().map(|&(_, e)| grid[e]).collect();
            let spans = heuristic_match(&start, &end, 0.5).unwrap();
            let reference = reference_span_determination(&start, &end, 0.5);
            prop_assert_eq!(as_pairs(&spans), reference);
            let mut prev_end: Option<usize> = None;
            for sp in &spans {
                prop_assert!(sp.start <= sp.end);
                prop_assert!(start[sp.start] > 0.5 && end[sp.end] > 0.5);
                if let Some(pe) = prev_end {
                    prop_assert!(sp.start > pe, "overlap");
                }
                prev_end = Some(sp.end);
            }
        }

        /// Nearest matching never overlaps and always picks the closest end.
        #[test]
        fn nearest_match_invariants(
            probs in proptest::collection::vec((0..5usize, 0..5usize), 1..8)
        ) {
            let grid = [0.0, 0.4, 0.6, 0.7, 0.9];
            let start: Vec<f64> = probs.iter().map(|&(s, _)| grid[s]).collect();
            let end: Vec<f64> = probs.iter().map(|&(_, e)| grid[e]).collect();
            let spans = nearest_match(&start, &end, 0.5).unwrap();
            let mut prev_end: Option<usize> = None;
            for sp in &spans {
                prop_assert!(sp.start <= sp.end);
                // nearest-end rule: no candidate end strictly inside
                for j in sp.start..sp.end {
                    prop_assert!(end[j] <= 0.5);
                }
                if let Some(pe) = prev_end {
                    prop_assert!(sp.start > pe);
                }
                prev_end = Some(sp.end);
            }
        }
    }
}
