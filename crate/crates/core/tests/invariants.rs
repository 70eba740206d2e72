//! Property tests for proposals, alias sampling and stratification.

mod common;

use aiseval_core::alias::AliasTable;
use aiseval_core::measures::{pool_risk, MeasureSpec};
use aiseval_core::partition::{assign_blocks, csf_bin_edges, Partition};
use aiseval_core::proposal::{
    adapted_proposal_det, adapted_proposal_stoch, kl_to_optimal, mix_with_marginal, LabelDist, LossTable,
};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = MeasureSpec> {
    prop_oneof![
        Just(MeasureSpec::Accuracy),
        Just(MeasureSpec::Precision),
        Just(MeasureSpec::Recall),
        Just(MeasureSpec::F1),
        Just(MeasureSpec::BalancedAccuracy),
        Just(MeasureSpec::FowlkesMallows),
    ]
}

/// Scores, per-item positive probabilities and marginal weights.
fn pool_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (2usize..40).prop_flat_map(|m| {
        (
            prop::collection::vec(0.01f64..0.99, m),
            prop::collection::vec(0.05f64..0.95, m),
            prop::collection::vec(0.1f64..10.0, m),
        )
    })
}

fn per_item(pos: &[f64]) -> Vec<f64> {
    pos.iter().flat_map(|&p| [1.0 - p, p]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn adapted_proposals_are_distributions_with_full_support(
        spec in spec_strategy(),
        (raw, pos, w) in pool_strategy(),
        eps in 1e-4f64..0.5,
        stochastic in any::<bool>(),
    ) {
        let measure = spec.build(common::binary_predictions(&raw)).unwrap();
        let table = LossTable::new(&measure);
        let marginal = common::normalized(w);
        let probs = per_item(&pos);
        let dist = LabelDist::PerItem(&probs);
        let r_hat = aiseval_core::proposal::plugin_risk(&table, &marginal, dist);
        let q = if stochastic {
            adapted_proposal_stoch(&measure, &table, &marginal, dist, &r_hat, eps, 1)
        } else {
            adapted_proposal_det(&measure, &table, &marginal, dist, &r_hat, eps, 1)
        };
        // plug-in risks with interior label probabilities keep the Jacobian defined
        let q = q.unwrap();
        let total: f64 = q.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for i in 0..raw.len() {
            let can_lose = (0..2).any(|y| measure.loss(i, y).iter().any(|&l| l != 0.0));
            prop_assert!(q.probs[i] >= 0.0);
            if can_lose {
                prop_assert!(q.probs[i] > 0.0, "item {i} can incur loss but has no mass");
            }
        }
    }

    #[test]
    fn proposal_ignores_marginal_scale(
        (raw, pos, w) in pool_strategy(),
        scale in 0.01f64..100.0,
    ) {
        let measure = MeasureSpec::F1.build(common::binary_predictions(&raw)).unwrap();
        let table = LossTable::new(&measure);
        let probs = per_item(&pos);
        let dist = LabelDist::PerItem(&probs);
        let marginal = common::normalized(w);
        let scaled: Vec<f64> = marginal.iter().map(|p| p * scale).collect();
        let r_hat = aiseval_core::proposal::plugin_risk(&table, &marginal, dist);
        let a = adapted_proposal_det(&measure, &table, &marginal, dist, &r_hat, 0.01, 1).unwrap();
        let b = adapted_proposal_det(&measure, &table, &scaled, dist, &r_hat, 0.01, 1).unwrap();
        for (x, y) in a.probs.iter().zip(&b.probs) {
            prop_assert!((x - y).abs() < 1e-12 * x.max(1e-300).max(1.0));
        }
    }

    #[test]
    fn mixing_keeps_a_distribution_and_bounds_kl(
        (raw, pos, w) in pool_strategy(),
        delta in 0.0f64..=1.0,
    ) {
        let measure = MeasureSpec::Recall.build(common::binary_predictions(&raw)).unwrap();
        let table = LossTable::new(&measure);
        let probs = per_item(&pos);
        let dist = LabelDist::PerItem(&probs);
        let marginal = common::normalized(w);
        let r_hat = aiseval_core::proposal::plugin_risk(&table, &marginal, dist);
        let q = adapted_proposal_det(&measure, &table, &marginal, dist, &r_hat, 0.05, 1).unwrap();
        let mixed = mix_with_marginal(&q, delta, &marginal).unwrap();
        let total: f64 = mixed.probs.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        if delta > 0.0 {
            for (qi, pi) in mixed.probs.iter().zip(&marginal) {
                prop_assert!(*qi >= delta * pi * (1.0 - 1e-12));
            }
        }
        prop_assert_eq!(kl_to_optimal(&q, &q), 0.0);
        prop_assert!(kl_to_optimal(&mixed, &q) >= 0.0);
    }

    #[test]
    fn alias_table_samples_only_the_support(
        weights in prop::collection::vec(prop_oneof![Just(0.0), 0.001f64..5.0], 1..50),
        seed in any::<u64>(),
    ) {
        prop_assume!(weights.iter().any(|&w| w > 0.0));
        let table = AliasTable::new(&weights).unwrap();
        prop_assert_eq!(table.support_len(), weights.iter().filter(|&&w| w > 0.0).count());
        let mut rng = common::rng(seed);
        for _ in 0..500 {
            let i = table.sample(&mut rng);
            prop_assert!(weights[i] > 0.0);
        }
    }

    #[test]
    fn csf_blocks_are_monotone_in_score(
        raw in prop::collection::vec(0.0f64..1.0, 20..300),
        k in 2usize..16,
    ) {
        let Ok(edges) = csf_bin_edges(&raw, k, 1024) else {
            return Ok(());
        };
        prop_assert!(edges.len() < k);
        prop_assert!(edges.windows(2).all(|e| e[0] < e[1]));
        let blocks = assign_blocks(&raw, &edges);
        for i in 0..raw.len() {
            prop_assert!(blocks[i] <= edges.len());
            for j in 0..raw.len() {
                if raw[i] < raw[j] {
                    prop_assert!(blocks[i] <= blocks[j]);
                }
            }
        }
    }

    #[test]
    fn csf_partitions_cover_the_pool(
        raw in prop::collection::vec(0.0f64..1.0, 50..300),
        depth in 1usize..4,
    ) {
        if let Ok(p) = Partition::from_scores_csf(&raw, 2, depth, 1024) {
            prop_assert_eq!(p.n_items(), raw.len());
            prop_assert_eq!(p.block_sizes().iter().sum::<usize>(), raw.len());
            prop_assert!(p.block_map().iter().all(|&b| b < p.n_blocks()));
        }
    }

    #[test]
    fn ratio_measures_stay_in_unit_interval(
        spec in spec_strategy(),
        raw in prop::collection::vec(0.01f64..0.99, 2..60),
        labels_seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = common::rng(labels_seed);
        let labels: Vec<usize> = raw.iter().map(|_| rng.random_range(0..2)).collect();
        let measure = spec.build(common::binary_predictions(&raw)).unwrap();
        let r = pool_risk(&measure, &labels, &common::uniform(raw.len()));
        for g in measure.map(&r).into_iter().flatten() {
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&g));
        }
    }
}
