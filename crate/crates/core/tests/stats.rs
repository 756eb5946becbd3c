mod common;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal, StudentsT};

use common::rng;
use spfg::stats::special::{beta_inc, chi2_sf, gamma_p, ln_gamma, normal_cdf, t_two_sided};
use spfg::stats::{
    bartlett, kruskal_wallis, mann_whitney_u, mann_whitney_u_with, midranks, spearman_rho,
    u_distribution, Alternative, Method, MwuMode,
};

#[test]
fn special_functions_agree_with_statrs() {
    for &x in &[0.1, 0.5, 1.0, 2.5, 7.0, 30.0, 171.0] {
        assert_relative_eq!(
            ln_gamma(x),
            statrs::function::gamma::ln_gamma(x),
            max_relative = 1e-10,
            epsilon = 1e-14
        );
    }
    for &(a, x) in &[
        (0.5, 0.2),
        (1.0, 1.0),
        (3.0, 2.0),
        (10.0, 12.0),
        (50.0, 40.0),
    ] {
        assert_relative_eq!(
            gamma_p(a, x),
            statrs::function::gamma::gamma_lr(a, x),
            max_relative = 1e-9
        );
    }
    for &(a, b, x) in &[
        (0.5, 0.5, 0.3),
        (2.0, 3.0, 0.4),
        (10.0, 2.0, 0.9),
        (1.5, 20.0, 0.05),
    ] {
        assert_relative_eq!(
            beta_inc(a, b, x),
            statrs::function::beta::beta_reg(a, b, x),
            max_relative = 1e-9
        );
    }
    for df in [1.0, 2.0, 3.0, 7.0, 20.0] {
        let chi = ChiSquared::new(df).unwrap();
        let t = StudentsT::new(0.0, 1.0, df).unwrap();
        for &x in &[0.05, 0.5, 1.0, 3.84, 10.0] {
            assert_relative_eq!(
                chi2_sf(x, df),
                1.0 - chi.cdf(x),
                max_relative = 1e-8,
                epsilon = 1e-14
            );
            let want = 2.0 * (1.0 - t.cdf(x));
            assert_relative_eq!(
                t_two_sided(x, df),
                want,
                max_relative = 1e-8,
                epsilon = 1e-14
            );
        }
    }
    let n = Normal::new(0.0, 1.0).unwrap();
    for &z in &[-4.0, -1.96, -0.3, 0.0, 0.7, 2.5] {
        assert_relative_eq!(
            normal_cdf(z),
            n.cdf(z),
            max_relative = 1e-9,
            epsilon = 1e-15
        );
    }
}

/// Exact one-sided p-values by enumerating every way to choose which of the
/// pooled (untied) values belong to the first sample.
fn brute_mwu(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let u_of = |first: &[f64], second: &[f64]| -> f64 {
        first
            .iter()
            .map(|x| second.iter().filter(|y| x > *y).count() as f64)
            .sum()
    };
    let observed = u_of(a, b);
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..1 << n {
        if mask.count_ones() as usize != a.len() {
            continue;
        }
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for (i, &v) in pooled.iter().enumerate() {
            if mask >> i & 1 == 1 {
                x.push(v)
            } else {
                y.push(v)
            }
        }
        let u = u_of(&x, &y);
        total += 1;
        le += (u <= observed) as u64;
        ge += (u >= observed) as u64;
    }
    (observed, le as f64 / total as f64, ge as f64 / total as f64)
}

fn untied(r: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 + r.random::<f64>() * 0.5).collect();
    v.shuffle(r);
    v
}

#[test]
fn exact_p_matches_combination_enumeration() {
    let mut r = rng(31);
    for _ in 0..100 {
        let na = r.random_range(1..7);
        let nb = r.random_range(1..7);
        let pooled = untied(&mut r, na + nb);
        let (a, b) = pooled.split_at(na);
        let (u, le, ge) = brute_mwu(a, b);
        let less = mann_whitney_u(a, b, Alternative::Less).unwrap();
        let greater = mann_whitney_u(a, b, Alternative::Greater).unwrap();
        let two = mann_whitney_u(a, b, Alternative::TwoSided).unwrap();
        assert_eq!(less.method, Method::Exact);
        assert_eq!(less.statistic, u);
        assert_relative_eq!(less.p_value, le, max_relative = 1e-12);
        assert_relative_eq!(greater.p_value, ge, max_relative = 1e-12);
        assert_relative_eq!(
            two.p_value,
            (2.0 * le.min(ge)).min(1.0),
            max_relative = 1e-12
        );
    }
}

#[test]
fn exact_and_normal_approximation_agree_at_twelve() {
    let mut r = rng(37);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let pooled = untied(&mut r, 12);
        let (a, b) = pooled.split_at(6);
        for alt in [
            Alternative::TwoSided,
            Alternative::Less,
            Alternative::Greater,
        ] {
            let e = mann_whitney_u_with(a, b, alt, MwuMode::Exact).unwrap();
            let n = mann_whitney_u_with(a, b, alt, MwuMode::Approximate).unwrap();
            worst = worst.max((e.p_value - n.p_value).abs());
        }
    }
    assert!(worst <= 0.02, "largest gap {worst}");
}

#[test]
fn exact_p_values_have_binomial_denominator() {
    let a = [1.0, 4.0, 6.0, 9.0];
    let b = [2.0, 3.0, 5.0, 7.0, 8.0];
    let p = mann_whitney_u(&a, &b, Alternative::Less).unwrap().p_value;
    // C(9, 4) = 126
    let scaled = p * 126.0;
    assert!((scaled - scaled.round()).abs() < 1e-9);
    assert_eq!(u_distribution(4, 5).iter().sum::<u128>(), 126);
}

#[test]
fn hand_cases() {
    let r = mann_whitney_u(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], Alternative::Less).unwrap();
    assert!((r.p_value - 0.05).abs() < 1e-6);
    assert_eq!(r.statistic, 0.0);
    let kw = kruskal_wallis(&[
        vec![1.0, 2.0, 3.0],
        vec![4.0, 5.0, 6.0],
        vec![7.0, 8.0, 9.0],
    ])
    .unwrap();
    assert!((kw.statistic - 7.2).abs() < 1e-6);
    let same = bartlett(&[vec![1.0, 2.0, 3.0], vec![11.0, 12.0, 13.0]]).unwrap();
    assert!(same.statistic.abs() < 1e-6 && (same.p_value - 1.0).abs() < 1e-6);
    let rho = spearman_rho(&[1.0, 2.0, 3.0, 4.0, 5.0], &[1.0, 3.0, 2.0, 5.0, 4.0]).unwrap();
    assert!((rho.statistic - 0.8).abs() < 1e-6);
}

#[test]
fn midranks_average_ties() {
    assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
}

#[test]
fn all_tied_samples_give_p_one() {
    let r = mann_whitney_u(&[2.0; 20], &[2.0; 30], Alternative::TwoSided).unwrap();
    assert_eq!(r.p_value, 1.0);
    let kw = kruskal_wallis(&[vec![1.0; 3], vec![1.0; 4]]).unwrap();
    assert_eq!((kw.statistic, kw.p_value), (0.0, 1.0));
}

#[test]
fn degenerate_inputs_are_errors() {
    assert!(mann_whitney_u(&[], &[1.0], Alternative::Less).is_err());
    assert!(spearman_rho(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
    assert!(spearman_rho(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    assert!(bartlett(&[vec![1.0, 1.0], vec![1.0, 2.0]]).is_err());
    assert!(bartlett(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    assert!(kruskal_wallis(&[vec![1.0]]).is_err());
}

#[test]
fn bartlett_two_group_formula() {
    let g1 = [1.0, 3.0, 4.0, 8.0];
    let g2 = [2.0, 2.5, 3.0, 3.5, 4.5];
    let var = |g: &[f64]| {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (g.len() - 1) as f64
    };
    let (n1, n2) = (3.0, 4.0);
    let (s1, s2) = (var(&g1), var(&g2));
    let sp = (n1 * s1 + n2 * s2) / (n1 + n2);
    let num = (n1 + n2) * sp.ln() - n1 * s1.ln() - n2 * s2.ln();
    let c = 1.0 + (1.0 / n1 + 1.0 / n2 - 1.0 / (n1 + n2)) / 3.0;
    let got = bartlett(&[g1.to_vec(), g2.to_vec()]).unwrap().statistic;
    assert!((got - num / c).abs() < 1e-9);
}

#[test]
fn bartlett_grows_with_variance_gap() {
    let a = vec![1.0, 2.0, 4.0, 7.0];
    let b = vec![2.0, 3.0, 5.0, 6.5];
    let base = bartlett(&[a.clone(), b.clone()]).unwrap().statistic;
    let doubled: Vec<f64> = b.iter().map(|x| 2.0 * x).collect();
    assert!(bartlett(&[a, doubled]).unwrap().statistic > base);
}

#[test]
fn kruskal_wallis_tracks_mann_whitney_for_two_groups() {
    // with two groups H is a strictly increasing function of |U - mn/2|
    let mut r = rng(41);
    let mut pairs = Vec::new();
    for _ in 0..100 {
        let pooled = untied(&mut r, 10);
        let (a, b) = pooled.split_at(4);
        let u = mann_whitney_u(a, b, Alternative::TwoSided)
            .unwrap()
            .statistic;
        let h = kruskal_wallis(&[a.to_vec(), b.to_vec()]).unwrap().statistic;
        pairs.push(((u - 12.0).abs(), h));
    }
    for (x, y) in &pairs {
        for (x2, y2) in &pairs {
            if x < x2 {
                assert!(y < y2, "H not monotone in |U - mn/2|");
            } else if x == x2 {
                assert!((y - y2).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #[test]
    fn u_statistics_sum_to_product(a in proptest::collection::vec(0u8..20, 1..15), b in proptest::collection::vec(0u8..20, 1..15)) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let ab = mann_whitney_u(&a, &b, Alternative::TwoSided).unwrap();
        let ba = mann_whitney_u(&b, &a, Alternative::TwoSided).unwrap();
        prop_assert!((ab.statistic + ba.statistic - (a.len() * b.len()) as f64).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p_value));
    }

    #[test]
    fn spearman_ignores_monotone_transforms(x in proptest::collection::vec(-50.0f64..50.0, 3..20), y in proptest::collection::vec(-50.0f64..50.0, 3..20)) {
        let n = x.len().min(y.len());
        let (x, y) = (&x[..n], &y[..n]);
        prop_assume!(x.iter().any(|v| *v != x[0]) && y.iter().any(|v| *v != y[0]));
        let base = spearman_rho(x, y).unwrap().statistic;
        let tx: Vec<f64> = x.iter().map(|v| (v / 10.0).exp() + 3.0).collect();
        let ty: Vec<f64> = y.iter().map(|v| v * v * v).collect();
        prop_assert_eq!(spearman_rho(&tx, &ty).unwrap().statistic, base);
        let rev: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!((spearman_rho(&rev, y).unwrap().statistic + base).abs() < 1e-12);
    }
}
