use fairgen::baselines::{norm_preprocess, NormSpec};
use fairgen::corpus::{AttributeSpace, Record};
use fairgen::quality::QualityOracle;
use proptest::prelude::*;

fn record(i: usize, group: &str, len: usize) -> Record {
    Record {
        user: format!("u{i}"),
        item: "i".into(),
        attribute: group.into(),
        rating: 3.0,
        explanation: vec!["w".to_string(); len],
    }
}

fn corpus() -> impl Strategy<Value = Vec<Record>> {
    (prop::collection::vec(1usize..25, 2..40), prop::collection::vec(1usize..25, 2..40)).prop_map(|(a, b)| {
        let mut out = Vec::new();
        for (g, lens) in [("m", a), ("f", b)] {
            for len in lens {
                out.push(record(out.len(), g, len));
            }
        }
        out
    })
}

fn space() -> AttributeSpace {
    AttributeSpace::new("gender", vec!["m".into(), "f".into()]).unwrap()
}

proptest! {
    #[test]
    fn norm_contract_holds(records in corpus()) {
        match norm_preprocess(&records, &space(), &NormSpec::new(QualityOracle::length())) {
            Ok(out) => {
                prop_assert!(out.final_gap <= 0.1 * out.original_gap + 1e-12);
                prop_assert!(out.removed.iter().all(|r| r.sizes.0 >= r.sizes.1));
                prop_assert_eq!(out.records.len() + out.removed.len(), records.len());
                for r in &out.records {
                    prop_assert!(records.contains(r));
                }
            }
            Err(e) => prop_assert!(matches!(e, fairgen::Error::Domain(_))),
        }
    }
}

#[test]
fn removes_low_records_from_the_larger_lower_group() {
    let records = vec![record(0, "m", 6), record(1, "m", 4), record(2, "f", 5), record(3, "f", 1), record(4, "f", 3)];
    let out = norm_preprocess(&records, &space(), &NormSpec::new(QualityOracle::length())).unwrap();
    let removed: Vec<f64> = out.removed.iter().map(|r| r.quality).collect();
    assert_eq!(removed, vec![1.0, 3.0]);
    assert_eq!(out.final_gap, 0.0);
}

#[test]
fn balanced_groups_are_left_alone() {
    let records = vec![record(0, "m", 4), record(1, "f", 4), record(2, "f", 4)];
    let out = norm_preprocess(&records, &space(), &NormSpec::new(QualityOracle::length())).unwrap();
    assert!(out.removed.is_empty());
    assert_eq!(out.records, records);
}

#[test]
fn threshold_must_be_a_fraction() {
    for t in [0.0, 1.0, -0.2, f64::NAN] {
        let spec = NormSpec {
            threshold: t,
            ..NormSpec::new(QualityOracle::length())
        };
        assert!(matches!(spec.validate(), Err(fairgen::Error::Config(_))));
    }
}
