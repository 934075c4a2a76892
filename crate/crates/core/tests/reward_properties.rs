use fairgen::coffee::{compute_delta, rewards_advantage, rewards_unweighted, rewards_weighted, sign, world_weight, RewardBatch};
use proptest::prelude::*;

fn qualities() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..8).prop_flat_map(|n| (prop::collection::vec(0.0..40.0f64, n), prop::collection::vec(0.0..40.0f64, n)))
}

proptest! {
    #[test]
    fn rewards_recover_the_absolute_gap((f, c) in qualities()) {
        let (delta, s) = compute_delta(&f, &c).unwrap();
        let (rf, rc) = rewards_unweighted(&f, &c, s);
        let total: f64 = rf.iter().chain(&rc).sum();
        prop_assert!((total + delta.abs()).abs() <= 1e-9);
    }

    #[test]
    fn swapping_worlds_swaps_rewards((f, c) in qualities()) {
        let (d, s) = compute_delta(&f, &c).unwrap();
        let (d2, s2) = compute_delta(&c, &f).unwrap();
        prop_assert_eq!(d, -d2);
        prop_assert_eq!(s, -s2);
        let (a, b) = rewards_unweighted(&f, &c, s);
        let (b2, a2) = rewards_unweighted(&c, &f, s2);
        prop_assert_eq!(a, a2);
        prop_assert_eq!(b, b2);
    }

    #[test]
    fn weights_are_convex(s in prop::sample::select(vec![-1.0, 0.0, 1.0]), eta in 0.0..=1.0f64) {
        let w = world_weight(s, eta);
        prop_assert!((0.0..=1.0).contains(&w));
    }

    #[test]
    fn weighted_rewards_scale_each_world((f, c) in qualities(), eta in 0.0..=1.0f64) {
        let (_, s) = compute_delta(&f, &c).unwrap();
        let (uf, uc) = rewards_unweighted(&f, &c, s);
        let (wf, wc, w) = rewards_weighted(&uf, &uc, s, eta);
        for (u, v) in uf.iter().zip(&wf) {
            prop_assert!((u * w - v).abs() <= 1e-12);
        }
        for (u, v) in uc.iter().zip(&wc) {
            prop_assert!((u * (1.0 - w) - v).abs() <= 1e-12);
        }
    }

    #[test]
    fn advantages_sum_to_zero(r in prop::collection::vec(-10.0..10.0f64, 1..20)) {
        prop_assert!(rewards_advantage(&r).iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn eta_lands_on_the_lower_world((f, c) in qualities(), eta in 0.0..=1.0f64) {
        let rb = RewardBatch::from_qualities(0, 1, &f, &c, eta).unwrap();
        match rb.lower_world_weight() {
            Some(w) => prop_assert!((w - eta).abs() <= 1e-12),
            None => prop_assert!(rb.is_inert()),
        }
    }
}

#[test]
fn sign_of_zero_is_zero() {
    assert_eq!(sign(0.0), 0.0);
    assert_eq!(sign(-0.0), 0.0);
    assert_eq!(sign(2.5), 1.0);
    assert_eq!(sign(-1e-300), -1.0);
}

#[test]
fn equal_worlds_give_no_rewards() {
    let rb = RewardBatch::from_qualities(0, 1, &[3.0, 5.0], &[4.0, 4.0], 0.7).unwrap();
    assert!(rb.is_inert());
    assert!(rb.unweighted.iter().chain(&rb.weighted).chain(&rb.advantage).flatten().all(|&r| r == 0.0));
}
