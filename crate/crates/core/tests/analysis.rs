mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::{null_calibration, rng};
use spfg::analysis::{
    default_feature_specs, extract_feature, load_feature_specs, worsening_features, AnalysisItem,
    FeatureSpec, Location,
};
use spfg::stats::{mann_whitney_u, Alternative};

#[test]
fn expected_and_output_regions() {
    let text = "Is this, really, the best? Officials say so";
    let item = AnalysisItem::identified(text, vec![(0, 7)], vec![(17, 26)]);
    let q_out = FeatureSpec::new("q", Location::OutputSpan, "class:question").unwrap();
    let q_exp = FeatureSpec::new("q", Location::ExpectedSpan, "class:question").unwrap();
    let c_exp = FeatureSpec::new("c", Location::ExpectedSpan, "class:comma").unwrap();
    assert!(extract_feature(&item, &q_out));
    assert!(!extract_feature(&item, &q_exp));
    assert!(!extract_feature(&item, &c_exp));
    let empty = AnalysisItem::identified(text, vec![], vec![]);
    assert!(!extract_feature(&empty, &q_out));
}

#[test]
fn curly_quotes_count_as_quotation() {
    let spec = FeatureSpec::new("quote", Location::InsideSpan, "class:quotation").unwrap();
    let item = AnalysisItem::classified("he said \u{201c}never\u{201d}", 0, 16);
    assert!(extract_feature(&item, &spec));
}

/// Present/absent partition counted independently of the library.
#[test]
fn rows_match_a_direct_mann_whitney() {
    let mut r = rng(3);
    let texts = ["so, then", "so then", "why?", "really!", "\"quoted\" words"];
    let items: Vec<AnalysisItem> = (0..80)
        .map(|_| {
            let t = texts[r.random_range(0..texts.len())];
            AnalysisItem::classified(t, 0, t.chars().count())
        })
        .collect();
    let scores: Vec<f64> = (0..80).map(|_| r.random()).collect();
    let specs = default_feature_specs();
    let report = worsening_features(&items, &scores, &specs).unwrap();
    assert_eq!(report.rows.len() + report.notices.len(), specs.len());
    for row in &report.rows {
        let spec = specs
            .iter()
            .find(|s| s.name == row.feature && s.location == row.location)
            .unwrap();
        let (mut yes, mut no) = (Vec::new(), Vec::new());
        for (it, &s) in items.iter().zip(&scores) {
            if extract_feature(it, spec) {
                yes.push(s)
            } else {
                no.push(s)
            }
        }
        assert_eq!(yes.len() + no.len(), items.len());
        assert_eq!(row.count, yes.len());
        let p = mann_whitney_u(&yes, &no, Alternative::Less)
            .unwrap()
            .p_value;
        assert_eq!(row.p_value, p);
    }
    for w in report.rows.windows(2) {
        assert!(w[0].p_value <= w[1].p_value);
    }
}

#[test]
fn null_features_reject_near_nominal_rate() {
    let rate = null_calibration(60, 400, 11);
    assert!(rate <= 0.15, "false positive rate {rate}");
}

#[test]
fn spec_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.tsv");
    let specs = default_feature_specs();
    let mut text = String::from("# feature list\n\n");
    for s in &specs {
        text.push_str(&s.to_line());
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    assert_eq!(load_feature_specs(&path).unwrap(), specs);
    std::fs::write(&path, "ok\tinside\tclass:comma\nbroken line\n").unwrap();
    let err = load_feature_specs(&path).unwrap_err().to_string();
    assert!(err.contains(":2") || err.contains("line 2"), "{err}");
}

#[test]
fn mismatched_scores_are_rejected() {
    let items = vec![AnalysisItem::classified("a", 0, 1)];
    assert!(worsening_features(&items, &[], &default_feature_specs()).is_err());
}

proptest! {
    #[test]
    fn item_order_does_not_matter(seed in any::<u64>()) {
        let mut r = rng(seed);
        let texts = ["a, b", "a b", "a? b", "according to them"];
        let mut pairs: Vec<(AnalysisItem, f64)> = (0..40)
            .map(|_| {
                let t = texts[r.random_range(0..texts.len())];
                (AnalysisItem::classified(t, 0, 3.min(t.len())), r.random())
            })
            .collect();
        let specs = default_feature_specs();
        let run = |p: &[(AnalysisItem, f64)]| {
            let items: Vec<_> = p.iter().map(|x| x.0.clone()).collect();
            let scores: Vec<_> = p.iter().map(|x| x.1).collect();
            worsening_features(&items, &scores, &specs).unwrap()
        };
        let base = run(&pairs);
        pairs.shuffle(&mut r);
        prop_assert_eq!(run(&pairs), base);
    }
}
