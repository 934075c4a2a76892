use fairgen::models::top_k_pick;
use fairgen::numerics::{grad_check, Axis, Tensor};
use proptest::prelude::*;

fn tensor(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0..2.0f64, rows * cols).prop_map(move |v| Tensor::new(rows, cols, v).unwrap())
}

fn shaped() -> impl Strategy<Value = Tensor> {
    (1usize..5, 2usize..6).prop_flat_map(|(r, c)| tensor(r, c))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_chain_gradients(x in shaped()) {
        let err = grad_check(|_t, v| Ok(v.tanh().log_softmax(Axis::Cols)?.pick(&[(0, 1)])?), &x, 1e-5).unwrap();
        prop_assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn normalization_gradients(x in shaped()) {
        let c = x.cols();
        let err = grad_check(
            |t, v| {
                let g = t.constant(Tensor::new(1, c, (0..c).map(|i| 0.5 + i as f64).collect()).unwrap());
                let b = t.constant(Tensor::zeros(1, c));
                let y = v.layer_norm(g, b)?;
                Ok(y.mul(y.sigmoid())?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn bilinear_gradients(x in shaped()) {
        let err = grad_check(|_t, v| Ok(v.matmul_t(v)?.softmax(Axis::Rows)?.matmul(v)?.mean()?), &x, 1e-5).unwrap();
        prop_assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn top_k_stays_in_the_top(logits in prop::collection::vec(-5.0..5.0f64, 2..12), k in 1usize..12, u in 0.0..1.0f64) {
        let pick = top_k_pick(&logits, k, u).unwrap();
        let beaten = logits.iter().filter(|&&l| l > logits[pick]).count();
        prop_assert!(beaten < k.min(logits.len()));
    }
}

#[test]
fn top_one_is_greedy() {
    assert_eq!(top_k_pick(&[0.1, 2.0, -1.0], 1, 0.99).unwrap(), 1);
}
