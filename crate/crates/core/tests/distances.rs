mod common;

use common::{random_dist, sparse_dist, transport_cost};
use mpa_core::ratings::{emd, emd_certainty, patch_weight, EmdParams, RatingDistribution};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dist_strategy(n: usize) -> impl Strategy<Value = RatingDistribution> {
    prop::collection::vec(0.0f64..1.0, n)
        .prop_filter("needs mass", |w| w.iter().sum::<f64>() > 1e-3)
        .prop_map(|w| {
            let s: f64 = w.iter().sum();
            RatingDistribution::new(w.iter().map(|x| x / s).collect()).unwrap()
        })
}

#[test]
fn oracle_agrees_on_hand_cases() {
    let one_hot = |i| RatingDistribution::one_hot(i, 10).unwrap();
    assert!((transport_cost(one_hot(1).probs(), one_hot(10).probs()) - 9.0).abs() < 1e-12);
    assert!(transport_cost(one_hot(5).probs(), one_hot(5).probs()).abs() < 1e-12);
    let half = RatingDistribution::new(vec![0.5, 0.0, 0.5]).unwrap();
    let mid = RatingDistribution::one_hot(2, 3).unwrap();
    assert!((transport_cost(half.probs(), mid.probs()) - 1.0).abs() < 1e-12);
}

#[test]
fn one_norm_matches_transport_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for i in 0..300 {
        let (p, q) = if i % 2 == 0 {
            (random_dist(&mut rng, 10), random_dist(&mut rng, 10))
        } else {
            (sparse_dist(&mut rng, 10), sparse_dist(&mut rng, 10))
        };
        let closed = emd(&p, &q, 1.0).unwrap();
        let oracle = transport_cost(p.probs(), q.probs()) / 10.0;
        assert!((closed - oracle).abs() < 1e-9, "{closed} vs {oracle}");
    }
}

#[test]
fn other_class_counts_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for n in [2, 3, 5, 7] {
        for _ in 0..20 {
            let (p, q) = (random_dist(&mut rng, n), random_dist(&mut rng, n));
            let oracle = transport_cost(p.probs(), q.probs()) / n as f64;
            assert!((emd(&p, &q, 1.0).unwrap() - oracle).abs() < 1e-9);
        }
    }
}

#[test]
fn spot_values() {
    let a = RatingDistribution::one_hot(1, 10).unwrap();
    let b = RatingDistribution::one_hot(10, 10).unwrap();
    assert!((emd(&a, &b, 2.0).unwrap() - 0.948683).abs() < 1e-6);
    assert_eq!(emd_certainty(0.5, &EmdParams::default()), 0.4);
    assert!((patch_weight(0.5, 0.4) - 0.242142).abs() < 1e-6);
}

proptest! {
    #[test]
    fn metric_axioms(p in dist_strategy(10), q in dist_strategy(10), s in dist_strategy(10)) {
        for r in [1.0, 2.0] {
            let pq = emd(&p, &q, r).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - emd(&q, &p, r).unwrap()).abs() < 1e-15);
            prop_assert_eq!(emd(&p, &p, r).unwrap(), 0.0);
            let via = emd(&p, &s, r).unwrap() + emd(&s, &q, r).unwrap();
            prop_assert!(pq <= via + 1e-12);
        }
    }

    #[test]
    fn distance_is_bounded_and_monotone_in_r(p in dist_strategy(10), q in dist_strategy(10)) {
        let e1 = emd(&p, &q, 1.0).unwrap();
        let e2 = emd(&p, &q, 2.0).unwrap();
        let e3 = emd(&p, &q, 3.0).unwrap();
        // power means grow with the order
        prop_assert!(e1 <= e2 + 1e-12 && e2 <= e3 + 1e-12);
        prop_assert!(e3 <= 1.0);
    }

    #[test]
    fn weight_curve_properties(a in 1e-6f64..1.0, b in 1e-6f64..1.0, beta in 0.05f64..5.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(patch_weight(lo, beta) >= patch_weight(hi, beta));
        prop_assert!((0.0..=1.0).contains(&patch_weight(lo, beta)));
        prop_assert_eq!(patch_weight(1.0, beta), 0.0);
        prop_assert!(patch_weight(lo, beta) <= patch_weight(lo, beta * 1.5));
    }

    #[test]
    fn certainty_is_clamped(e in 0.0f64..2.0) {
        let params = EmdParams::default();
        let c = emd_certainty(e, &params);
        prop_assert!(c >= params.epsilon && c <= 1.0);
        if 1.0 - params.k * e >= params.epsilon {
            prop_assert_eq!(c, 1.0 - params.k * e);
        }
    }
}
