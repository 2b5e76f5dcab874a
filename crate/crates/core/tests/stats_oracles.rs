//! Metrics and distribution functions against brute force and statrs.

use proptest::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::beta::beta_reg;
use vmoge_core::stats::{auc, mean_std, normal_quantile, pearson_r, regularized_beta, student_t_two_sided};

/// Average over all positive/negative pairs of 1, ½ or 0.
fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut total, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li == 1 && lj == 0 {
                pairs += 1.0;
                total += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    total / pairs
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            // coarse grid so ties are common
            prop::collection::vec((-8i32..8).prop_map(|v| v as f64 / 4.0), n),
            prop::collection::vec(0u8..2, n),
        )
    })
}

proptest! {
    #[test]
    fn auc_equals_pair_count((scores, labels) in scored_labels()) {
        let both = labels.contains(&0) && labels.contains(&1);
        match auc(&scores, &labels) {
            Some(a) => {
                prop_assert!(both);
                prop_assert!((a - pairwise_auc(&scores, &labels)).abs() < 1e-12);
            }
            None => prop_assert!(!both),
        }
    }

    #[test]
    fn auc_invariant_under_monotone_maps((scores, labels) in scored_labels()) {
        prop_assume!(labels.contains(&0) && labels.contains(&1));
        let a = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 1.0).collect();
        prop_assert!((auc(&mapped, &labels).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        prop_assert!((auc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn incomplete_beta_matches_statrs(a in 0.1f64..30.0, b in 0.1f64..30.0, x in 0.0f64..=1.0) {
        let ours = regularized_beta(a, b, x);
        let reference = beta_reg(a, b, x);
        prop_assert!((ours - reference).abs() < 1e-10, "I_{x}({a}, {b}): {ours} vs {reference}");
    }

    #[test]
    fn two_sided_t_matches_statrs(t in -12.0f64..12.0, df in 1.0f64..200.0) {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        let reference = 2.0 * dist.cdf(-t.abs());
        prop_assert!((student_t_two_sided(t, df) - reference).abs() < 1e-10);
    }

    #[test]
    fn normal_quantile_matches_statrs(p in 1e-12f64..(1.0 - 1e-12)) {
        let z = normal_quantile(p);
        let reference = Normal::new(0.0, 1.0).unwrap().inverse_cdf(p);
        prop_assert!((z - reference).abs() <= 1e-12 * z.abs().max(1.0), "{z} vs {reference}");
    }
}

#[test]
fn pearson_p_matches_statrs_t_transform() {
    let x: Vec<f64> = (0..25).map(|i| i as f64).collect();
    for k in 1..8 {
        let y: Vec<f64> = x.iter().map(|v| (v * k as f64 * 0.37).sin() * 10.0 + v * 0.2).collect();
        let (r, p) = pearson_r(&x, &y).unwrap();
        let df = (x.len() - 2) as f64;
        let t = r * (df / (1.0 - r * r)).sqrt();
        let reference = 2.0 * StudentsT::new(0.0, 1.0, df).unwrap().cdf(-t.abs());
        assert!((p - reference).abs() < 1e-10, "r {r}: {p} vs {reference}");
    }
}

#[test]
fn mean_std_matches_two_pass_formula() {
    let v = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    let (m, s) = mean_std(&v);
    assert_eq!(m, 5.0);
    assert!((s - (32.0f64 / 7.0).sqrt()).abs() < 1e-15);
}
