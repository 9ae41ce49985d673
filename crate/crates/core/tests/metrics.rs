mod common;

use common::oracle;
use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use tvpr_core::eval::{median_rank, rank_of, ranks_from_scores, recall_at, RetrievalResult};

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("clip{i:03}")).collect()
}

#[test]
fn random_matrices_match_sort_oracle() {
    let gallery = ids(50);
    for seed in 0..20 {
        let mut r = rng(seed);
        // coarse values force ties, which the clip id order must break
        let scores: Vec<Vec<f64>> = (0..50).map(|_| (0..50).map(|_| f64::from(r.gen_range(0..40u8)) / 40.0).collect()).collect();
        let truth: Vec<usize> = (0..50).collect();
        let ranks = ranks_from_scores(&scores, &truth, &gallery).unwrap();
        let want: Vec<usize> = (0..50).map(|q| oracle::rank_by_sorting(&scores[q], q, &gallery)).collect();
        assert_eq!(ranks, want, "seed {seed}");
        let res = RetrievalResult::from_ranks(ranks, 50).unwrap();
        for (got, n) in res.recalls().into_iter().zip([1, 5, 10, 50]) {
            assert_eq!(got, oracle::recall(&want, n));
        }
        assert_eq!(res.r50, 100.0);
        assert_eq!(res.median_rank, oracle::median(&want));
    }
}

#[test]
fn rank_bounds_are_checked() {
    assert!(RetrievalResult::from_ranks(vec![], 3).is_err());
    assert!(RetrievalResult::from_ranks(vec![0], 3).is_err());
    assert!(RetrievalResult::from_ranks(vec![4], 3).is_err());
    assert!(ranks_from_scores(&[vec![0.1, 0.2]], &[2], &ids(2)).is_err());
}

proptest! {
    #[test]
    fn median_rank_matches_oracle(ranks in prop::collection::vec(1usize..500, 1..=100)) {
        prop_assert_eq!(median_rank(&ranks), oracle::median(&ranks));
    }

    #[test]
    fn recall_is_monotone_in_cutoff(ranks in prop::collection::vec(1usize..200, 1..60)) {
        let values: Vec<f64> = (1..=200).map(|n| recall_at(&ranks, n)).collect();
        prop_assert!(values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(values[199], 100.0);
    }

    #[test]
    fn gallery_order_does_not_change_ranks(seed in 0u64..10_000, n in 2usize..30) {
        let mut r = rng(seed);
        let gallery = ids(n);
        let row: Vec<f64> = (0..n).map(|_| f64::from(r.gen_range(0..5u8))).collect();
        let truth = r.gen_range(0..n);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let prow: Vec<f64> = perm.iter().map(|&i| row[i]).collect();
        let pids: Vec<String> = perm.iter().map(|&i| gallery[i].clone()).collect();
        let ptruth = perm.iter().position(|&i| i == truth).unwrap();
        prop_assert_eq!(rank_of(&row, truth, &gallery), rank_of(&prow, ptruth, &pids));
    }
}
