//! Probability-averaging ensembles and exhaustive subset scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tc::TcModel;
use crate::error::{Error, Result};
use crate::metrics::micro_f1;
use crate::spandata::Dataset;

/// Per-item class probabilities, `[items][labels]`.
pub type ProbTable = Vec<Vec<f64>>;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    (0..p.len()).fold(0, |best, j| if p[j] > p[best] { j } else { best })
}

/// Element-wise mean of probability tables with matching shapes.
pub fn average_probs(tables: &[&ProbTable]) -> Result<ProbTable> {
    let first = tables
        .first()
        .ok_or_else(|| Error::invalid("ensemble of zero models"))?;
    for t in tables {
        if t.len() != first.len() || t.iter().zip(first.iter()).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::shape("ensemble members disagree on items or labels"));
        }
    }
    let n = tables.len() as f64;
    Ok((0..first.len())
        .map(|i| {
            (0..first[i].len())
                .map(|j| tables.iter().map(|t| t[i][j]).sum::<f64>() / n)
                .collect()
        })
        .collect())
}

/// Averaged class probabilities of `models` for every span of `ds`.
pub fn ensemble_predict(models: &[&TcModel], ds: &Dataset) -> Result<ProbTable> {
    let first = models
        .first()
        .ok_or_else(|| Error::invalid("ensemble of zero models"))?;
    if models
        .iter()
        .any(|m| m.config.techniques != first.config.techniques)
    {
        return Err(Error::invalid(
            "ensemble members use different label inventories",
        ));
    }
    let tables: Vec<ProbTable> = models
        .iter()
        .map(|m| m.predict_dataset(ds))
        .collect::<Result<_>>()?;
    average_probs(&tables.iter().collect::<Vec<_>>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    /// Member indices, ascending.
    pub members: Vec<usize>,
    /// Micro-F1 on each evaluation fold.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Scores every subset of at least two models. `folds[f]` holds one
/// probability table per model plus the gold labels of fold `f`. Results
/// come back in bitmask order.
pub fn enumerate_ensembles(folds: &[(Vec<ProbTable>, Vec<usize>)]) -> Result<Vec<EnsembleResult>> {
    let n = folds
        .first()
        .map(|(t, _)| t.len())
        .ok_or_else(|| Error::invalid("no evaluation folds"))?;
    if n < 2 {
        return Err(Error::invalid(
            "subset enumeration needs at least two models",
        ));
    }
    if n > 20 {
        return Err(Error::invalid("subset enumeration limited to 20 models"));
    }
    if folds.iter().any(|(t, _)| t.len() != n) {
        return Err(Error::shape("folds disagree on the number of models"));
    }
    let masks: Vec<u32> = (0u32..1 << n).filter(|m| m.count_ones() >= 2).collect();
    masks
        .par_iter()
        .map(|&mask| {
            let members: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let scores = folds
                .iter()
                .map(|(tables, gold)| {
                    let picked: Vec<&ProbTable> = members.iter().map(|&i| &tables[i]).collect();
                    let avg = average_probs(&picked)?;
                    let pred: Vec<usize> = avg.iter().map(|p| argmax(p)).collect();
                    micro_f1(&pred, gold)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, std) = mean_std(&scores);
            Ok(EnsembleResult {
                members,
                scores,
                mean,
                std,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_average() {
        let a = vec![vec![0.8, 0.2]];
        let b = vec![vec![0.4, 0.6]];
        let avg = average_probs(&[&a, &b]).unwrap();
        assert!((avg[0][0] - 0.6).abs() < 1e-12 && (avg[0][1] - 0.4).abs() < 1e-12);
        assert_eq!(argmax(&avg[0]), 0);
        assert_eq!(average_probs(&[&a]).unwrap(), a);
        assert_eq!(average_probs(&[&b, &a]).unwrap(), avg);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn subset_counts() {
        for n in 2..=10usize {
            let tables = vec![vec![vec![0.5, 0.5]]; n];
            let r = enumerate_ensembles(&[(tables, vec![0])]).unwrap();
            assert_eq!(r.len(), (1 << n) - n - 1);
        }
        let one = vec![vec![vec![1.0]]];
        assert!(enumerate_ensembles(&[(one, vec![0])]).is_err());
    }
}
