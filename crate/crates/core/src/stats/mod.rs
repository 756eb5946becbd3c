//! Rank-based tests (Mann-Whitney U, Spearman, Kruskal-Wallis) and
//! Bartlett's test for equal variances.

pub mod special;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use special::{chi2_sf, normal_cdf, t_two_sided};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Approximate,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// The first sample tends to be smaller.
    Less,
    /// The first sample tends to be larger.
    Greater,
}

impl FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-sided" => Ok(Alternative::TwoSided),
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            other => Err(Error::invalid(format!("unknown alternative {other:?}"))),
        }
    }
}

impl fmt::Display for Alternative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alternative::TwoSided => "two-sided",
            Alternative::Less => "less",
            Alternative::Greater => "greater",
        })
    }
}

/// Ranks starting at 1 with tied values sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Sizes of groups of tied values.
fn tie_sizes(values: &[f64]) -> Vec<usize> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        out.push(j - i + 1);
        i = j + 1;
    }
    out
}

fn tie_term(values: &[f64]) -> f64 {
    tie_sizes(values)
        .into_iter()
        .map(|t| {
            let t = t as f64;
            t * t * t - t
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MwuMode {
    /// Exact when the samples total at most [`EXACT_MAX_N`] and are untied.
    #[default]
    Auto,
    Exact,
    Approximate,
}

pub const EXACT_MAX_N: usize = 12;

/// Number of arrangements giving each value of `U` for sample sizes
/// `(m, n)`; index `u` runs over `0..=m*n`.
pub fn u_distribution(m: usize, n: usize) -> Vec<u128> {
    // f[i][j][u]: arrangements of i and j elements with statistic u
    let max = m * n;
    let mut prev: Vec<Vec<u128>> = vec![vec![0; max + 1]; n + 1];
    for row in prev.iter_mut() {
        row[0] = 1;
    }
    for _i in 1..=m {
        let mut cur: Vec<Vec<u128>> = vec![vec![0; max + 1]; n + 1];
        cur[0][0] = 1;
        for j in 1..=n {
            for u in 0..=max {
                // the largest element belongs to the first sample: it beats all j
                let from_first = if u >= j { prev[j][u - j] } else { 0 };
                cur[j][u] = from_first + cur[j - 1][u];
            }
        }
        prev = cur;
    }
    prev.swap_remove(n)
}

/// Mann-Whitney U for sample `a` against `b`; the statistic is
/// `U_a = R_a - n_a (n_a + 1) / 2`.
pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<TestResult> {
    mann_whitney_u_with(a, b, alternative, MwuMode::Auto)
}

pub fn mann_whitney_u_with(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    mode: MwuMode,
) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Mann-Whitney U needs two non-empty samples"));
    }
    let (na, nb) = (a.len(), b.len());
    let joined: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&joined);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let ties = tie_term(&joined);

    let exact = match mode {
        MwuMode::Exact => {
            if ties > 0.0 {
                return Err(Error::invalid(
                    "exact Mann-Whitney p-values need untied data",
                ));
            }
            true
        }
        MwuMode::Approximate => false,
        MwuMode::Auto => ties == 0.0 && na + nb <= EXACT_MAX_N,
    };

    let p = if exact {
        let dist = u_distribution(na, nb);
        let total: u128 = dist.iter().sum();
        let ui = u.round() as usize;
        let le: u128 = dist[..=ui].iter().sum();
        let ge: u128 = dist[ui..].iter().sum();
        let le = le as f64 / total as f64;
        let ge = ge as f64 / total as f64;
        match alternative {
            Alternative::Less => le,
            Alternative::Greater => ge,
            Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
        }
    } else {
        let n = (na + nb) as f64;
        let mu = (na * nb) as f64 / 2.0;
        let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
        if var <= 0.0 {
            1.0
        } else {
            let sd = var.sqrt();
            match alternative {
                Alternative::Less => normal_cdf((u - mu + 0.5) / sd),
                Alternative::Greater => 1.0 - normal_cdf((u - mu - 0.5) / sd),
                Alternative::TwoSided => {
                    let z = ((u - mu).abs() - 0.5).max(0.0) / sd;
                    (2.0 * (1.0 - normal_cdf(z))).min(1.0)
                }
            }
        }
    };
    Ok(TestResult {
        statistic: u,
        p_value: p.clamp(0.0, 1.0),
        method: if exact {
            Method::Exact
        } else {
            Method::Approximate
        },
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman's rho (Pearson correlation of midranks) with a two-sided
/// t-approximation p-value on `n - 2` degrees of freedom.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<TestResult> {
    if x.len() != y.len() {
        return Err(Error::shape("Spearman needs paired samples"));
    }
    if x.len() < 3 {
        return Err(Error::invalid("Spearman needs at least 3 pairs"));
    }
    let rho = pearson(&midranks(x), &midranks(y))
        .ok_or_else(|| Error::invalid("Spearman rho undefined for a constant input"))?;
    let df = (x.len() - 2) as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        t_two_sided(rho * (df / (1.0 - rho * rho)).sqrt(), df)
    };
    Ok(TestResult {
        statistic: rho,
        p_value: p,
        method: Method::Approximate,
    })
}

/// Kruskal-Wallis H with tie correction; chi-square p-value on `g - 1`
/// degrees of freedom.
pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult> {
    if groups.len() < 2 {
        return Err(Error::invalid("Kruskal-Wallis needs at least two groups"));
    }
    if groups.iter().any(Vec::is_empty) {
        return Err(Error::invalid("Kruskal-Wallis groups must be non-empty"));
    }
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let n = all.len() as f64;
    let ranks = midranks(&all);
    let grand = (n + 1.0) / 2.0;
    let mut h = 0.0;
    let mut off = 0;
    for g in groups {
        let ni = g.len() as f64;
        let mean = ranks[off..off + g.len()].iter().sum::<f64>() / ni;
        h += ni * (mean - grand) * (mean - grand);
        off += g.len();
    }
    h *= 12.0 / (n * (n + 1.0));
    let correction = 1.0 - tie_term(&all) / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(TestResult {
            statistic: 0.0,
            p_value: 1.0,
            method: Method::Approximate,
        });
    }
    let h = h / correction;
    Ok(TestResult {
        statistic: h,
        p_value: chi2_sf(h, (groups.len() - 1) as f64),
        method: Method::Approximate,
    })
}

/// Bartlett's test statistic for equal variances with the usual
/// small-sample correction factor.
pub fn bartlett(groups: &[Vec<f64>]) -> Result<TestResult> {
    if groups.len() < 2 {
        return Err(Error::invalid("Bartlett needs at least two groups"));
    }
    if groups.iter().any(|g| g.len() < 2) {
        return Err(Error::invalid("Bartlett groups need at least two values"));
    }
    let k = groups.len() as f64;
    let mut variances = Vec::with_capacity(groups.len());
    for g in groups {
        let n = g.len() as f64;
        let mean = g.iter().sum::<f64>() / n;
        let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        if var <= 0.0 {
            return Err(Error::invalid(
                "Bartlett undefined for a zero-variance group",
            ));
        }
        variances.push(var);
    }
    let dfs: Vec<f64> = groups.iter().map(|g| g.len() as f64 - 1.0).collect();
    let df_total: f64 = dfs.iter().sum();
    let pooled = dfs.iter().zip(&variances).map(|(d, v)| d * v).sum::<f64>() / df_total;
    let num = df_total * pooled.ln()
        - dfs
            .iter()
            .zip(&variances)
            .map(|(d, v)| d * v.ln())
            .sum::<f64>();
    let den = 1.0 + (dfs.iter().map(|d| 1.0 / d).sum::<f64>() - 1.0 / df_total) / (3.0 * (k - 1.0));
    let stat = (num / den).max(0.0);
    Ok(TestResult {
        statistic: stat,
        p_value: chi2_sf(stat, k - 1.0),
        method: Method::Approximate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midranks_with_ties() {
        assert_eq!(midranks(&[1.0, 2.0, 2.0, 4.0]), vec![1.0, 2.5, 2.5, 4.0]);
    }

    #[test]
    fn u_distribution_totals_binomial() {
        let d = u_distribution(3, 3);
        assert_eq!(d.iter().sum::<u128>(), 20);
        assert_eq!(d, vec![1, 1, 2, 3, 3, 3, 3, 2, 1, 1]);
    }

    #[test]
    fn mwu_separated_samples() {
        let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Less).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.method, Method::Exact);
        assert!((r.p_value - 0.05).abs() < 1e-15);
        let two =
            mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::TwoSided).unwrap();
        assert!((two.p_value - 0.1).abs() < 1e-15);
    }

    #[test]
    fn mwu_interleaved_symmetric() {
        let r = mann_whitney_u(
            &[1.0, 4.0, 5.0, 8.0],
            &[2.0, 3.0, 6.0, 7.0],
            Alternative::TwoSided,
        )
        .unwrap();
        assert_eq!(r.statistic, 8.0);
    }

    #[test]
    fn mwu_empty_is_error() {
        assert!(mann_whitney_u(&[], &[1.0], Alternative::TwoSided).is_err());
    }

    #[test]
    fn mwu_all_tied_gives_p_one() {
        let r = mann_whitney_u(&[1.0; 20], &[1.0; 20], Alternative::Less).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn spearman_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!(
            (spearman_rho(&x, &[1.0, 3.0, 2.0, 5.0, 4.0])
                .unwrap()
                .statistic
                - 0.8)
                .abs()
                < 1e-12
        );
        assert_eq!(
            spearman_rho(&x, &[2.0, 4.0, 8.0, 16.0, 32.0])
                .unwrap()
                .statistic,
            1.0
        );
        assert_eq!(
            spearman_rho(&x, &[5.0, 4.0, 3.0, 2.0, 1.0])
                .unwrap()
                .statistic,
            -1.0
        );
        assert!(spearman_rho(&x, &[1.0; 5]).is_err());
        assert!(spearman_rho(&x[..2], &x[..2]).is_err());
    }

    #[test]
    fn kruskal_cases() {
        let r = kruskal_wallis(&[
            vec![1.0, 2.0, 3.0],
            vec![4.0, 5.0, 6.0],
            vec![7.0, 8.0, 9.0],
        ])
        .unwrap();
        assert!((r.statistic - 7.2).abs() < 1e-12);
        let eq = kruskal_wallis(&[vec![1.0, 4.0], vec![2.0, 3.0]]).unwrap();
        assert_eq!(eq.statistic, 0.0);
        let same = kruskal_wallis(&[vec![3.0, 3.0], vec![3.0]]).unwrap();
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
        assert!(kruskal_wallis(&[vec![1.0]]).is_err());
    }

    #[test]
    fn bartlett_cases() {
        let eq = bartlett(&[vec![1.0, 2.0, 3.0], vec![10.0, 11.0, 12.0]]).unwrap();
        assert!(eq.statistic.abs() < 1e-12);
        assert!((eq.p_value - 1.0).abs() < 1e-12);
        let wide = bartlett(&[vec![1.0, 2.0, 3.0], vec![20.0, 22.0, 24.0]]).unwrap();
        assert!(wide.statistic > eq.statistic);
        assert!(bartlett(&[vec![1.0, 1.0], vec![1.0, 2.0]]).is_err());
        assert!(bartlett(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
