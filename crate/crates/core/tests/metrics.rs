mod common;

use proptest::prelude::*;
use rand::Rng;

use common::{naive_flc, random_spans, rng};
use spfg::metrics::{
    confusion_matrix, flc_f1, micro_f1, micro_f1_multilabel, span_outcome, span_outcomes,
    SpanOutcome,
};
use spfg::spandata::Span;

#[test]
fn optimized_scorer_equals_double_sum() {
    let mut r = rng(23);
    for _ in 0..1000 {
        let pred = random_spans(&mut r, 12);
        let gold = random_spans(&mut r, 12);
        let aware = r.random_bool(0.5);
        let s = flc_f1(&pred, &gold, aware).unwrap();
        let (p, rc, f) = naive_flc(&pred, &gold, aware);
        assert_eq!((s.precision, s.recall, s.f1), (p, rc, f));
    }
}

#[test]
fn half_overlap_hand_case() {
    let s = flc_f1(&[Span::new("1", 0, 5)], &[Span::new("1", 0, 10)], false).unwrap();
    assert!((s.precision - 1.0).abs() < 1e-12);
    assert!((s.recall - 0.5).abs() < 1e-12);
    assert!((s.f1 - 2.0 / 3.0).abs() < 1e-9);
}

#[test]
fn empty_sides_score_zero() {
    let gold = [Span::new("1", 0, 5)];
    assert_eq!(flc_f1(&[], &gold, false).unwrap().f1, 0.0);
    assert_eq!(flc_f1(&gold, &[], false).unwrap().f1, 0.0);
    assert!(flc_f1(&[Span::new("1", 3, 3)], &gold, false).is_err());
}

#[test]
fn label_awareness_removes_cross_label_credit() {
    let pred = [Span::labeled("1", 0, 5, 0)];
    let gold = [Span::labeled("1", 0, 5, 1)];
    assert_eq!(flc_f1(&pred, &gold, false).unwrap().f1, 1.0);
    assert_eq!(flc_f1(&pred, &gold, true).unwrap().f1, 0.0);
}

#[test]
fn micro_f1_is_accuracy_for_single_labels() {
    assert_eq!(micro_f1(&[0, 1, 2, 2], &[0, 1, 1, 2]).unwrap(), 0.75);
    assert!(micro_f1(&[0], &[0, 1]).is_err());
    let multi = micro_f1_multilabel(&[vec![0, 1], vec![]], &[vec![0], vec![1]]).unwrap();
    // tp 1, fp 1, fn 1
    assert!((multi - 0.5).abs() < 1e-12);
}

#[test]
fn confusion_rows_are_normalized() {
    let m = confusion_matrix(&[0, 1, 1, 0], &[0, 0, 1, 1], 2).unwrap();
    for row in &m {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn outcome_categories() {
    let gold = vec![
        Span::labeled("1", 0, 10, 0),
        Span::labeled("1", 20, 30, 0),
        Span::labeled("1", 40, 50, 1),
    ];
    let pred = vec![Span::new("1", 0, 10), Span::new("1", 22, 28)];
    let b = span_outcomes(&pred, &gold, &["A".into(), "B".into()]);
    assert_eq!(b.overall.instances, 3);
    assert_eq!(b.overall.counts.iter().sum::<usize>(), 3);
    let outcomes: Vec<SpanOutcome> = gold.iter().map(|g| span_outcome(g, &pred)).collect();
    assert_eq!(
        outcomes,
        vec![
            SpanOutcome::FullyIdentified,
            SpanOutcome::IdentifiedSubsequence,
            SpanOutcome::NotIdentified
        ]
    );
}

proptest! {
    #[test]
    fn swapping_sides_swaps_precision_and_recall(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pred = random_spans(&mut r, 8);
        let gold = random_spans(&mut r, 8);
        let a = flc_f1(&pred, &gold, false).unwrap();
        let b = flc_f1(&gold, &pred, false).unwrap();
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.f1, b.f1);
    }

    #[test]
    fn disjoint_self_match_is_perfect(starts in proptest::collection::btree_set(0usize..50, 1..8)) {
        let spans: Vec<Span> = starts.iter().map(|&s| Span::new("1", s * 3, s * 3 + 2)).collect();
        prop_assert_eq!(flc_f1(&spans, &spans, false).unwrap().f1, 1.0);
    }
}
