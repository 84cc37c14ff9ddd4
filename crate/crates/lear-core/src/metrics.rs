//! Micro-averaged precision, recall and F1 over exact span matches.
//!
//! A prediction counts as a true positive only when start, end and category
//! all match a gold span. Duplicated predictions count once. Counts are
//! pooled over all texts and categories before the ratios are taken.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};

/// (start, end, category) identity of a span.
pub type SpanKey = (usize, usize, String);

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Zero-division convention: an empty denominator scores 0, not NaN.
fn ratio(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_category: BTreeMap<String, Counts>,
}

impl EvalReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>10} {:>10} {:>10}\n",
            "category", "tp", "fp", "fn", "precision", "recall", "f1"
        ));
        for (name, c) in &self.per_category {
            out.push_str(&format!(
                "{:<16} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4}\n",
                name,
                c.tp,
                c.fp,
                c.fn_,
                c.precision(),
                c.recall(),
                c.f1()
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>10.4}\n",
            "micro", self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1
        ));
        out
    }
}

/// Compares predictions against gold spans, text by text. Both sides must
/// cover exactly the same text ids.
pub fn evaluate(
    pred: &[(usize, Vec<SpanKey>)],
    gold: &[(usize, Vec<SpanKey>)],
) -> Result<EvalReport> {
    let pred_map: BTreeMap<usize, &Vec<SpanKey>> =
        pred.iter().map(|(id, s)| (*id, s)).collect();
    let gold_map: BTreeMap<usize, &Vec<SpanKey>> =
        gold.iter().map(|(id, s)| (*id, s)).collect();
    if pred_map.len() != pred.len() || gold_map.len() != gold.len() {
        return Err(Error::Contract("duplicate text ids in evaluation input".into()));
    }
    if pred_map.keys().ne(gold_map.keys()) {
        return Err(Error::Contract(
            "prediction and gold text-id sets differ".into(),
        ));
    }

    let mut per_category: BTreeMap<String, Counts> = BTreeMap::new();
    let mut total = Counts::default();
    for (id, pred_spans) in &pred_map {
        let pred_set: HashSet<&SpanKey> = pred_spans.iter().collect();
        let gold_set: HashSet<&SpanKey> = gold_map[id].iter().collect();
        for &span in &pred_set {
            let c = per_category.entry(span.2.clone()).or_default();
            if gold_set.contains(span) {
                total.tp += 1;
                c.tp += 1;
            } else {
                total.fp += 1;
                c.fp += 1;
            }
        }
        for &span in &gold_set {
            if !pred_set.contains(span) {
                total.fn_ += 1;
                per_category.entry(span.2.clone()).or_default().fn_ += 1;
            }
        }
    }
    Ok(EvalReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        per_category,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(s: usize, e: usize, c: &str) -> SpanKey {
        (s, e, c.to_string())
    }

    #[test]
    fn perfect_predictions_score_one() {
        let spans = vec![(0, vec![key(0, 1, "a"), key(3, 3, "b")])];
        let r = evaluate(&spans, &spans).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn worked_example_precision_half_recall_third() {
        // 2 predictions, 1 correct, 3 gold spans.
        let pred = vec![(0, vec![key(0, 0, "a"), key(2, 3, "a")])];
        let gold = vec![(0, vec![key(0, 0, "a"), key(5, 6, "a"), key(8, 8, "b")])];
        let r = evaluate(&pred, &gold).unwrap();
        assert!((r.precision - 0.5).abs() < 1e-12);
        assert!((r.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((r.f1 - 0.4).abs() < 1e-12);
    }

    #[test]
    fn no_predictions_scores_zero_by_convention() {
        let pred = vec![(0, vec![])];
        let gold = vec![(0, vec![key(0, 0, "a")])];
        let r = evaluate(&pred, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn duplicate_predictions_count_once() {
        let pred = vec![(0, vec![key(0, 0, "a"), key(0, 0, "a")])];
        let gold = vec![(0, vec![key(0, 0, "a")])];
        let r = evaluate(&pred, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn mismatched_text_ids_are_a_contract_error() {
        let pred = vec![(0, vec![])];
        let gold = vec![(1, vec![])];
        assert!(matches!(
            evaluate(&pred, &gold),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn category_breakdown_is_tracked() {
        let pred = vec![(0, vec![key(0, 0, "a"), key(1, 1, "b")])];
        let gold = vec![(0, vec![key(0, 0, "a"), key(2, 2, "b")])];
        let r = evaluate(&pred, &gold).unwrap();
        assert_eq!(r.per_category["a"].tp, 1);
        assert_eq!(r.per_category["b"].fp, 1);
        assert_eq!(r.per_category["b"].fn_, 1);
        assert!(r.render_text().contains("micro"));
    }

    proptest! {
        #[test]
        fn self_evaluation_is_always_perfect(
            spans in proptest::collection::vec((0usize..6, 0usize..6, 0usize..3), 0..8)
        ) {
            let spans: Vec<SpanKey> = spans
                .into_iter()
                .map(|(s, e, c)| (s.min(e), s.max(e), format!("c{c}")))
                .collect();
            let side = vec![(0usize, spans)];
            let r = evaluate(&side, &side).unwrap();
            if !side[0].1.is_empty() {
                prop_assert_eq!(r.f1, 1.0);
            }
            prop_assert_eq!(r.fp, 0);
            prop_assert_eq!(r.fn_, 0);
        }

        #[test]
        fn adding_correct_prediction_never_decreases_f1(
            gold in proptest::collection::vec((0usize..6, 0usize..3), 1..6),
            picked in 0usize..6,
        ) {
            let gold_spans: Vec<SpanKey> = gold
                .iter()
                .map(|&(s, c)| (s, s, format!("c{c}")))
                .collect();
            let picked = &gold_spans[picked % gold_spans.len()];
            // predictions missing `picked`
            let pred_spans: Vec<SpanKey> = gold_spans
                .iter()
                .filter(|k| *k != picked)
                .cloned()
                .collect();
            let before = evaluate(
                &[(0, pred_spans.clone())],
                &[(0, gold_spans.clone())],
            ).unwrap();
            let mut with = pred_spans;
            with.push(picked.clone());
            let after = evaluate(&[(0, with)], &[(0, gold_spans)]).unwrap();
            prop_assert!(after.f1 >= before.f1 - 1e-12);
        }

        #[test]
        fn adding_incorrect_prediction_never_increases_precision(
            gold in proptest::collection::vec((0usize..4, 0usize..2), 1..5),
        ) {
            let gold_spans: Vec<SpanKey> = gold
                .iter()
                .map(|&(s, c)| (s, s, format!("c{c}")))
                .collect();
            let before = evaluate(
                &[(0, gold_spans.clone())],
                &[(0, gold_spans.clone())],
            ).unwrap();
            let mut with = gold_spans.clone();
            with.push((99, 99, "zz".to_string()));
            let after = evaluate(&[(0, with)], &[(0, gold_spans)]).unwrap();
            prop_assert!(after.precision <= before.precision + 1e-12);
        }
    }
}
