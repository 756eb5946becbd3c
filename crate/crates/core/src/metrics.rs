//! Partial-match span scoring and classification metrics.
//!
//! FLC-F1 gives each prediction `s` precision credit `sum_t |s ∩ t| / |s|`
//! and each gold span `t` recall credit `sum_s |s ∩ t| / |t|`, over pairs in
//! the same article (and with the same technique when label-aware). Credit is
//! not capped at 1 per span.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spandata::Span;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlcScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// F1 restricted to each article, keyed by article id. Covers every
    /// article that has a predicted or gold span.
    pub per_item: BTreeMap<String, f64>,
}

pub fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn overlap(a: &Span, b: &Span) -> usize {
    a.end.min(b.end).saturating_sub(a.start.max(b.start))
}

/// Spans of one article sorted by start, keeping their input positions.
struct ArticleIndex<'a> {
    by_start: Vec<(usize, &'a Span)>,
    max_len: usize,
}

fn index_by_article(spans: &[Span]) -> HashMap<&str, ArticleIndex<'_>> {
    let mut map: HashMap<&str, ArticleIndex<'_>> = HashMap::new();
    for (i, s) in spans.iter().enumerate() {
        let e = map
            .entry(s.article_id.as_str())
            .or_insert_with(|| ArticleIndex {
                by_start: Vec::new(),
                max_len: 0,
            });
        e.by_start.push((i, s));
        e.max_len = e.max_len.max(s.len());
    }
    for idx in map.values_mut() {
        idx.by_start.sort_by_key(|&(i, s)| (s.start, i));
    }
    map
}

/// Sums `|s ∩ t| / |s|` over `s` in `from` and overlapping `t` in `against`,
/// in input order. Non-overlapping pairs contribute exactly zero, so
/// skipping them leaves the floating-point sum identical to the full double
/// loop.
fn credit<'a>(
    from: &'a [Span],
    against: &[Span],
    label_aware: bool,
) -> (f64, BTreeMap<&'a str, f64>) {
    let index = index_by_article(against);
    let mut total = 0.0;
    let mut per_article: BTreeMap<&str, f64> = BTreeMap::new();
    let mut hits: Vec<usize> = Vec::new();
    for s in from {
        let slot = per_article.entry(s.article_id.as_str()).or_insert(0.0);
        let Some(idx) = index.get(s.article_id.as_str()) else {
            continue;
        };
        let lo_start = s.start.saturating_sub(idx.max_len);
        let lo = idx.by_start.partition_point(|(_, t)| t.start < lo_start);
        let hi = idx.by_start.partition_point(|(_, t)| t.start < s.end);
        hits.clear();
        hits.extend(
            idx.by_start[lo..hi.max(lo)]
                .iter()
                .filter(|(_, t)| t.end > s.start && (!label_aware || t.technique == s.technique))
                .map(|&(i, _)| i),
        );
        hits.sort_unstable();
        let len = s.len() as f64;
        for &i in &hits {
            let c = overlap(s, &against[i]) as f64 / len;
            total += c;
            *slot += c;
        }
    }
    (total, per_article)
}

fn check_spans(spans: &[Span]) -> Result<()> {
    match spans.iter().find(|s| s.is_empty()) {
        Some(s) => Err(Error::invalid(format!(
            "degenerate span [{}, {}) in article {}",
            s.start, s.end, s.article_id
        ))),
        None => Ok(()),
    }
}

pub fn flc_f1(pred: &[Span], gold: &[Span], label_aware: bool) -> Result<FlcScore> {
    check_spans(pred)?;
    check_spans(gold)?;
    let (p_sum, p_items) = credit(pred, gold, label_aware);
    let (r_sum, r_items) = credit(gold, pred, label_aware);
    let precision = if pred.is_empty() {
        0.0
    } else {
        p_sum / pred.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        r_sum / gold.len() as f64
    };

    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for s in pred {
        counts.entry(&s.article_id).or_default().0 += 1;
    }
    for t in gold {
        counts.entry(&t.article_id).or_default().1 += 1;
    }
    let per_item = counts
        .into_iter()
        .map(|(id, (np, ng))| {
            let p = if np > 0 {
                p_items.get(id).copied().unwrap_or(0.0) / np as f64
            } else {
                0.0
            };
            let r = if ng > 0 {
                r_items.get(id).copied().unwrap_or(0.0) / ng as f64
            } else {
                0.0
            };
            (id.to_string(), f1_of(p, r))
        })
        .collect();
    Ok(FlcScore {
        precision,
        recall,
        f1: f1_of(precision, recall),
        per_item,
    })
}

/// Micro-averaged F1 over label sets per item.
pub fn micro_f1_multilabel(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} items",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in pred.iter().zip(gold) {
        let hit = p.iter().filter(|l| g.contains(l)).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.iter().filter(|l| !p.contains(l)).count();
    }
    let denom = tp as f64 + 0.5 * (fp + fn_) as f64;
    Ok(if denom > 0.0 { tp as f64 / denom } else { 0.0 })
}

/// Micro-F1 for one label per item; equal to accuracy.
pub fn micro_f1(pred: &[usize], gold: &[usize]) -> Result<f64> {
    let p: Vec<Vec<usize>> = pred.iter().map(|&l| vec![l]).collect();
    let g: Vec<Vec<usize>> = gold.iter().map(|&l| vec![l]).collect();
    let f = micro_f1_multilabel(&p, &g)?;
    debug_assert!(
        gold.is_empty()
            || (f - pred.iter().zip(gold).filter(|(a, b)| a == b).count() as f64
                / gold.len() as f64)
                .abs()
                < 1e-12
    );
    Ok(f)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpanOutcome {
    FullyIdentified,
    IdentifiedSubsequence,
    NotIdentified,
}

/// Classifies one gold span against the predictions of its article.
pub fn span_outcome(gold: &Span, pred: &[Span]) -> SpanOutcome {
    let same = pred.iter().filter(|p| p.article_id == gold.article_id);
    let mut overlapped = false;
    for p in same {
        if p.start <= gold.start && p.end >= gold.end {
            return SpanOutcome::FullyIdentified;
        }
        overlapped |= overlap(p, gold) > 0;
    }
    if overlapped {
        SpanOutcome::IdentifiedSubsequence
    } else {
        SpanOutcome::NotIdentified
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub technique: String,
    pub identified_subsequence: f64,
    pub fully_identified: f64,
    pub not_identified: f64,
    pub instances: usize,
    pub counts: [usize; 3],
}

impl OutcomeRow {
    fn from_counts(technique: String, counts: [usize; 3]) -> Self {
        let n: usize = counts.iter().sum();
        let pct = |c: usize| {
            if n > 0 {
                100.0 * c as f64 / n as f64
            } else {
                0.0
            }
        };
        OutcomeRow {
            technique,
            fully_identified: pct(counts[0]),
            identified_subsequence: pct(counts[1]),
            not_identified: pct(counts[2]),
            instances: n,
            counts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBreakdown {
    pub rows: Vec<OutcomeRow>,
    pub overall: OutcomeRow,
}

/// Per-technique shares of fully identified, partially identified and
/// missed gold spans. Gold spans without a technique count toward the
/// overall row only.
pub fn span_outcomes(pred: &[Span], gold: &[Span], techniques: &[String]) -> OutcomeBreakdown {
    let mut by_article: HashMap<&str, Vec<Span>> = HashMap::new();
    for p in pred {
        by_article.entry(&p.article_id).or_default().push(p.clone());
    }
    let mut counts = vec![[0usize; 3]; techniques.len()];
    let mut overall = [0usize; 3];
    for g in gold {
        let preds = by_article
            .get(g.article_id.as_str())
            .map_or(&[][..], Vec::as_slice);
        let slot = match span_outcome(g, preds) {
            SpanOutcome::FullyIdentified => 0,
            SpanOutcome::IdentifiedSubsequence => 1,
            SpanOutcome::NotIdentified => 2,
        };
        overall[slot] += 1;
        if let Some(t) = g.technique.filter(|&t| t < techniques.len()) {
            counts[t][slot] += 1;
        }
    }
    OutcomeBreakdown {
        rows: techniques
            .iter()
            .zip(counts)
            .map(|(t, c)| OutcomeRow::from_counts(t.clone(), c))
            .collect(),
        overall: OutcomeRow::from_counts("Overall".into(), overall),
    }
}

impl OutcomeBreakdown {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "technique\tidentified_subsequence\tfully_identified\tnot_identified\tinstances\n",
        );
        for r in self.rows.iter().chain(std::iter::once(&self.overall)) {
            out.push_str(&format!(
                "{}\t{:.0}\t{:.0}\t{:.0}\t{}\n",
                r.technique,
                r.identified_subsequence,
                r.fully_identified,
                r.not_identified,
                r.instances
            ));
        }
        out
    }
}

/// `m[i][j]` = share of items with gold `i` predicted as `j`. Rows with no
/// gold items stay zero.
pub fn confusion_matrix(pred: &[usize], gold: &[usize], d: usize) -> Result<Vec<Vec<f64>>> {
    if pred.len() != gold.len() {
        return Err(Error::shape("prediction and gold lengths differ"));
    }
    let mut counts = vec![vec![0usize; d]; d];
    for (&p, &g) in pred.iter().zip(gold) {
        if p >= d || g >= d {
            return Err(Error::invalid(format!("label outside [0, {d})")));
        }
        counts[g][p] += 1;
    }
    Ok(counts
        .into_iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            row.into_iter()
                .map(|c| if n > 0 { c as f64 / n as f64 } else { 0.0 })
                .collect()
        })
        .collect())
}
