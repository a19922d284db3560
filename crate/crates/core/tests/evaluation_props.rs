use match_core::evaluation::{average_ranks, baseline_scores, kendall_tau_b, pearson, spearman};
use proptest::prelude::*;

/// τ-b by direct pair counting.
fn tau_b_brute(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mut c, mut d, mut tx, mut ty) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let a = x[i].partial_cmp(&x[j]).unwrap();
            let b = y[i].partial_cmp(&y[j]).unwrap();
            match (a.is_eq(), b.is_eq()) {
                (true, true) => {}
                (true, false) => tx += 1,
                (false, true) => ty += 1,
                (false, false) if a == b => c += 1,
                _ => d += 1,
            }
        }
    }
    let denom = (((c + d + tx) * (c + d + ty)) as f64).sqrt();
    (denom > 0.0).then(|| (c - d) as f64 / denom)
}

fn tied_series() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..=30).prop_flat_map(|n| {
        (
            prop::collection::vec((0i32..6).prop_map(f64::from), n),
            prop::collection::vec((0i32..6).prop_map(|v| f64::from(v) * 0.5), n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn tau_b_matches_pair_count((x, y) in tied_series()) {
        match (kendall_tau_b(&x, &y), tau_b_brute(&x, &y)) {
            (Ok(fast), Some(slow)) => prop_assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}"),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn spearman_is_pearson_of_ranks((x, y) in tied_series()) {
        let direct = spearman(&x, &y).ok();
        let ranked = pearson(&average_ranks(&x), &average_ranks(&y)).ok();
        prop_assert_eq!(direct, ranked);
    }

    #[test]
    fn correlations_bounded_and_symmetric((x, y) in tied_series()) {
        for f in [kendall_tau_b, spearman, pearson] {
            if let (Ok(a), Ok(b)) = (f(&x, &y), f(&y, &x)) {
                prop_assert!((-1.0..=1.0).contains(&a));
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_statistics_ignore_monotone_transforms((x, y) in tied_series(), s in 0.1..10.0f64) {
        let fx: Vec<f64> = x.iter().map(|v| (v * s).exp()).collect();
        if let (Ok(a), Ok(b)) = (kendall_tau_b(&x, &y), kendall_tau_b(&fx, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&fx, &y)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn baselines_in_unit_range(c in "[a-c(): ]{1,20}", r in "[a-c()]{1,20}") {
        for v in baseline_scores(&c, &r).unwrap() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        for v in baseline_scores(&r, &r).unwrap() {
            prop_assert_eq!(v, 1.0);
        }
    }
}
