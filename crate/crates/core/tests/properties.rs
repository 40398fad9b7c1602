mod common;

use common::*;
use fairnews_core::autodiff::{Graph, Tensor};
use fairnews_core::eval::{self, impression_auc};
use fairnews_core::training::{nce_loss, orthogonal_reg, total_loss};
use fairnews_core::LossWeights;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Rankings over `n` news for `users` users, plus a mask with both groups
/// non-empty.
fn ranking_case() -> impl Strategy<Value = (Vec<Vec<usize>>, Vec<bool>, usize)> {
    (10usize..40, 1usize..8, any::<u64>()).prop_flat_map(|(n, users, seed)| {
        (Just(n), Just(users), Just(seed), 1..n, 10..=n)
    })
    .prop_map(|(n, users, seed, protected, k)| {
        let mut r = rng(seed);
        let lists = (0..users).map(|_| permutation(&mut r, n)).collect();
        let order = permutation(&mut r, n);
        let mut mask = vec![false; n];
        for &d in &order[..protected] {
            mask[d] = true;
        }
        (lists, mask, k)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_op_passes_gradient_check_on_random_shapes(seed in any::<u64>()) {
        let mut r = rng(seed);
        for op in CHECKED_OPS {
            let err = op_gradcheck(op, &mut r);
            prop_assert!(err < FD_TOL, "{op:?}: {err:e}");
        }
    }

    #[test]
    fn compositions_pass_gradient_check(seed in any::<u64>()) {
        let err = composition_gradcheck(&mut rng(seed));
        prop_assert!(err < FD_TOL, "{err:e}");
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        logits in prop::collection::vec(-700.0f64..700.0, 1..9),
    ) {
        let cols = logits.len();
        let data: Vec<f64> = (0..rows).flat_map(|i| logits.iter().map(move |x| x - i as f64)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let s = g.softmax(x);
        for row in g.value(s).rows() {
            prop_assert!(row.iter().all(|p| p.is_finite() && *p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exposure_ratio_matches_literal_double_sum((lists, mask, k) in ranking_case()) {
        let fast = eval::exposure_ratio_at_k(&lists, &groups_from_mask(&mask), k).unwrap().value();
        let slow = literal_er(&lists, &mask, k);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12 * b.max(1.0), "{a} vs {b}"),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn rnd_matches_literal_and_is_bounded((lists, mask, k) in ranking_case()) {
        let groups = groups_from_mask(&mask);
        if brute_force_z(&mask, k) == 0.0 {
            // Only a single checkpoint at K = |D|: every ranking is neutral.
            prop_assert!(eval::rnd_at_k(&lists, &groups, k).is_err());
            return Ok(());
        }
        let fast = eval::rnd_at_k(&lists, &groups, k).unwrap();
        let slow = literal_rnd(&lists, &mask, k);
        prop_assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        prop_assert!((0.0..=1.0 + 1e-12).contains(&fast));
        let p = mask.iter().filter(|&&b| b).count();
        let z = eval::rnd_normalizer(p, mask.len(), k);
        prop_assert!((z - brute_force_z(&mask, k)).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_count(
        cells in prop::collection::vec((any::<bool>(), -3i32..3), 2..30),
    ) {
        let labels: Vec<bool> = cells.iter().map(|c| c.0).collect();
        let scores: Vec<f64> = cells.iter().map(|c| c.1 as f64 * 0.5).collect();
        let fast = impression_auc(&labels, &scores);
        let slow = brute_auc(&labels, &scores);
        match (fast, slow) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn nce_is_shift_invariant_and_non_negative(
        pos in -50.0f64..50.0,
        negs in prop::collection::vec(-50.0f64..50.0, 1..8),
        shift in -100.0f64..100.0,
    ) {
        let base = nce_loss(pos, &negs);
        let moved: Vec<f64> = negs.iter().map(|n| n + shift).collect();
        prop_assert!(base >= 0.0);
        prop_assert!((base - nce_loss(pos + shift, &moved)).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn orthogonal_reg_is_symmetric_scale_free_and_bounded(
        v in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..10),
        c in 0.1f64..10.0,
    ) {
        let a: Vec<f64> = v.iter().map(|p| p.0).collect();
        let b: Vec<f64> = v.iter().map(|p| p.1).collect();
        let scaled: Vec<f64> = a.iter().map(|x| -c * x).collect();
        if let Some(r) = orthogonal_reg(&a, &b) {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
            prop_assert!((r - orthogonal_reg(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((r - orthogonal_reg(&scaled, &b).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn total_loss_is_linear_in_weights(
        l in prop::array::uniform4(0.0f64..5.0),
        w in prop::array::uniform4(0.0f64..2.0),
    ) {
        let weights = LossWeights { lambda_c: w[0], lambda_u: w[1], lambda_n: w[2], lambda_a: w[3] };
        let t = total_loss(l[0], l[1], l[2], l[3], &weights);
        prop_assert!((t - (w[0] * l[0] + w[1] * l[1] + w[2] * l[2] - w[3] * l[3])).abs() < 1e-12);
    }

    #[test]
    fn backward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut r = rng(seed);
        let x = random_tensor(&mut r, &[3, 4]);
        let w = random_tensor(&mut r, &[4, 2]);
        let grad = |a: f64, b: f64| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let wv = g.constant(w.clone());
            let t = g.tanh(xv);
            let f = g.reduce_sum(t);
            let m = g.matmul(xv, wv).unwrap();
            let s = g.sigmoid(m);
            let h = g.reduce_mean(s);
            let fa = g.scale(f, a);
            let hb = g.scale(h, b);
            let root = g.add(fa, hb).unwrap();
            g.backward(root).unwrap().wrt(xv)
        };
        let (gf, gh, both) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(alpha, beta));
        for i in 0..both.len() {
            let expect = alpha * gf.data()[i] + beta * gh.data()[i];
            prop_assert!((both.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn ranking_is_a_permutation_sorted_by_score(
        scores in prop::collection::vec(-2i32..2, 1..30),
    ) {
        let raw: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
        let ids: Vec<String> = (0..raw.len()).map(|i| format!("N{:03}", (i * 7) % 1000)).collect();
        let order = eval::rank_indices(&raw, &ids);
        let mut seen = order.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..raw.len()).collect::<Vec<_>>());
        for w in order.windows(2) {
            let (a, b) = (w[0], w[1]);
            prop_assert!(raw[a] > raw[b] || (raw[a] == raw[b] && ids[a] < ids[b]));
        }
    }
}
