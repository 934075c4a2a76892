use fairgen::metrics::{bleu, ddp, fmt_sig, grp_cf, ind_cf, rmse, rouge, PairQualities, RougeVariant};
use proptest::prelude::*;

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn pairs(n_values: usize) -> impl Strategy<Value = Vec<PairQualities>> {
    let pair = (0..n_values, prop::collection::vec(0.0..30.0f64, 1..4)).prop_flat_map(move |(a, fact)| {
        let n = fact.len();
        let others: Vec<usize> = (0..n_values).filter(|&b| b != a).collect();
        prop::collection::vec(prop::collection::vec(0.0..30.0f64, n), others.len()).prop_map(move |cfs| PairQualities {
            attribute: a,
            factual: fact.clone(),
            counterfactual: others.iter().copied().zip(cfs).collect(),
        })
    });
    prop::collection::vec(pair, 1..20)
}

proptest! {
    #[test]
    fn text_scores_are_bounded(c in sentence(), r in sentence()) {
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::Longest] {
            let s = rouge(&c, &r, v);
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert!((s - rouge(&r, &c, v)).abs() < 1e-12);
        }
        for n in [1, 4] {
            let b = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n).unwrap();
            prop_assert!((0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn identical_text_scores_one(r in sentence()) {
        prop_assume!(r.len() >= 4);
        prop_assert!((bleu(std::slice::from_ref(&r), std::slice::from_ref(&r), 4).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(rouge(&r, &r, RougeVariant::Longest), 1.0);
    }

    #[test]
    fn fairness_metrics_are_nonnegative(p in pairs(3)) {
        prop_assert!(ind_cf(&p) >= 0.0);
        prop_assert!(grp_cf(&p, 3) >= 0.0);
        prop_assert!(ddp(&p, 3).map(|d| d >= 0.0).unwrap_or(true));
    }

    #[test]
    fn equal_worlds_are_individually_fair(p in pairs(2)) {
        let same: Vec<PairQualities> = p
            .into_iter()
            .map(|q| PairQualities {
                counterfactual: q.counterfactual.iter().map(|(b, _)| (*b, q.factual.clone())).collect(),
                ..q
            })
            .collect();
        prop_assert_eq!(ind_cf(&same), 0.0);
        prop_assert_eq!(grp_cf(&same, 2), 0.0);
    }

    #[test]
    fn rmse_is_a_distance(x in prop::collection::vec(-5.0..5.0f64, 1..30), shift in -3.0..3.0f64) {
        let y: Vec<f64> = x.iter().map(|v| v + shift).collect();
        prop_assert!((rmse(&x, &y).unwrap() - shift.abs()).abs() < 1e-9);
        prop_assert_eq!(rmse(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn nine_significant_digits_roundtrip(x in -1e9..1e9f64) {
        let back: f64 = fmt_sig(x).parse().unwrap();
        prop_assert!((back - x).abs() <= 1e-8 * x.abs().max(1e-300) + 1e-12);
    }
}

#[test]
fn ddp_needs_two_populated_groups() {
    let one = vec![PairQualities {
        attribute: 0,
        factual: vec![1.0],
        counterfactual: vec![(1, vec![2.0])],
    }];
    assert!(matches!(ddp(&one, 2), Err(fairgen::Error::Domain(_))));
}
