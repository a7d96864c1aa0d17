use fair_core::data::{synth_lowrank_with_factors, FeedbackKind, SynthParams};
use fair_core::eval::{evaluate_server, ndcg_at_k, Metric};
use proptest::prelude::*;

/// Straightforward NDCG: sort candidate ids by (score desc, id asc).
fn brute_ndcg(scores: &[f64], train: &[usize], test: &[usize], k: usize) -> f64 {
    let mut cands: Vec<usize> = (0..scores.len()).filter(|i| !train.contains(i)).collect();
    cands.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let dcg: f64 = cands
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| test.contains(i))
        .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..k.min(test.len()))
        .map(|r| 1.0 / ((r + 2) as f64).log2())
        .sum();
    dcg / idcg
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = vec![];
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Items 0..n split by a mask: 0 = neither, 1 = train, 2 = test.
fn split(mask: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let pick = |v: u8| {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m == v)
            .map(|(i, _)| i)
            .collect()
    };
    (pick(1), pick(2))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn every_ranking_of_small_catalogs(
        mask in prop::collection::vec(0u8..3, 2..=7),
        k in 1usize..8,
    ) {
        let (train, test) = split(&mask);
        prop_assume!(!test.is_empty());
        let n = mask.len();
        for order in permutations(n) {
            // order[r] is the item placed at rank r.
            let mut scores = vec![0.0; n];
            for (r, &item) in order.iter().enumerate() {
                scores[item] = (n - r) as f64;
            }
            let got = ndcg_at_k(&scores, &train, &test, k).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&got));
            prop_assert!((got - brute_ndcg(&scores, &train, &test, k)).abs() < 1e-12);
            let top: Vec<usize> = order.iter().copied().filter(|i| !train.contains(i)).take(k.min(test.len())).collect();
            let perfect = top.iter().all(|i| test.contains(i));
            prop_assert_eq!(perfect, (got - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn moving_a_test_item_up_never_hurts(
        scores in prop::collection::vec(-5.0f64..5.0, 3..40),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..6),
        k in 1usize..25,
        which in any::<prop::sample::Index>(),
    ) {
        let n = scores.len();
        let mut test: Vec<usize> = picks.iter().map(|i| i.index(n)).collect();
        test.sort_unstable();
        test.dedup();
        let before = ndcg_at_k(&scores, &[], &test, k).unwrap();
        let t = test[which.index(test.len())];
        // Swap scores with the best-ranked non-test item above it, if any.
        let above = (0..n)
            .filter(|i| !test.contains(i))
            .filter(|&i| scores[i] > scores[t] || (scores[i] == scores[t] && i < t))
            .max_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        if let Some(j) = above {
            let mut swapped = scores.clone();
            swapped.swap(t, j);
            let after = ndcg_at_k(&swapped, &[], &test, k).unwrap();
            prop_assert!(after >= before - 1e-12, "{before} -> {after}");
        }
    }

    #[test]
    fn constant_scores_fall_back_to_id_order(
        mask in prop::collection::vec(0u8..3, 2..=10),
        k in 1usize..12,
    ) {
        let (train, test) = split(&mask);
        prop_assume!(!test.is_empty());
        let scores = vec![0.25; mask.len()];
        let got = ndcg_at_k(&scores, &train, &test, k).unwrap();
        prop_assert!((got - brute_ndcg(&scores, &train, &test, k)).abs() < 1e-12);
    }
}

#[test]
fn hand_examples() {
    assert_eq!(ndcg_at_k(&[0.9, 0.1, 0.5], &[], &[0], 3).unwrap(), 1.0);
    let second = ndcg_at_k(&[0.9, 0.1, 0.5], &[], &[2], 3).unwrap();
    assert!((second - 1.0 / 3f64.log2()).abs() < 1e-12);
    assert!((second - 0.63093).abs() < 1e-5);
    assert_eq!(ndcg_at_k(&[0.9, 0.1, 0.5], &[], &[1], 2).unwrap(), 0.0);
    assert!(ndcg_at_k(&[1.0, 2.0], &[0, 1], &[0], 1).is_err());
}

#[test]
fn ground_truth_factors_rank_perfectly() {
    let params = SynthParams {
        num_users: 30,
        num_items: 80,
        latent_dim: 5,
        density: 0.1,
        noise_sd: 0.0,
        seed: 4,
        kind: FeedbackKind::Implicit,
    };
    let (ds, f) = synth_lowrank_with_factors(&params).unwrap();
    let ds = ds.split_train_test(3, 4).unwrap();
    let users: Vec<Vec<f64>> = f.users.chunks(5).map(<[f64]>::to_vec).collect();
    let e = evaluate_server(&f.items, 5, &users, &ds, 20).unwrap();
    assert_eq!(e.metric, Metric::Ndcg(20));
    assert!((e.value - 1.0).abs() < 1e-12, "{}", e.value);

    let flat: Vec<Vec<f64>> = vec![vec![0.0; 5]; 30];
    let tie = evaluate_server(&f.items, 5, &flat, &ds, 20).unwrap();
    let test = ds.items_by_user(fair_core::data::Split::Test);
    let train = ds.items_by_user(fair_core::data::Split::Train);
    let expected: f64 = (0..30)
        .map(|u| brute_ndcg(&vec![0.0; 80], &train[u], &test[u], 20))
        .sum::<f64>()
        / 30.0;
    assert!((tie.value - expected).abs() < 1e-12);
}

#[test]
fn exact_ratings_give_zero_error() {
    let params = SynthParams {
        num_users: 12,
        num_items: 25,
        latent_dim: 3,
        density: 0.5,
        noise_sd: 0.0,
        seed: 8,
        kind: FeedbackKind::Explicit,
    };
    let (ds, f) = synth_lowrank_with_factors(&params).unwrap();
    let ds = ds.split_train_test(2, 8).unwrap();
    let users: Vec<Vec<f64>> = f.users.chunks(3).map(<[f64]>::to_vec).collect();
    let e = evaluate_server(&f.items, 3, &users, &ds, 20).unwrap();
    assert_eq!(e.metric, Metric::Mse);
    assert!(e.value.abs() < 1e-20, "{}", e.value);
    let off: Vec<f64> = f.items.iter().map(|v| v + 0.1).collect();
    assert!(evaluate_server(&off, 3, &users, &ds, 20).unwrap().value > 0.0);
}
