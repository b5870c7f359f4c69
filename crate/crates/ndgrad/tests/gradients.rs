mod support;

use ndgrad::{finite_difference_check, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_primitive_matches_central_differences() {
    for seed in 0..3 {
        for (name, err) in support::primitive_errors(seed) {
            assert!(err < 1e-6, "seed {seed} {name}: relative error {err:e}");
        }
    }
}

#[test]
fn suite_covers_the_primitive_list() {
    let names: Vec<&str> = support::primitive_errors(0).into_iter().map(|(n, _)| n).collect();
    for op in [
        "add", "mul", "matmul", "concat", "slice", "sum", "mean", "tanh", "sigmoid", "relu", "exp", "log", "softmax",
        "embedding_gather", "conv1d",
    ] {
        assert!(names.iter().any(|n| n.starts_with(op)), "{op} not checked");
    }
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
    let run = || {
        let mut t = Tape::new();
        let v = t.param(x.clone());
        let s = t.softmax(v).unwrap();
        let y = t.tanh(s).unwrap();
        let l = t.sum(y).unwrap();
        t.backward(l).unwrap().wrt(v)
    };
    assert_eq!(run().data(), run().data());
}

proptest! {
    #[test]
    fn tanh_of_products_passes_second_order_check(v in proptest::collection::vec(-1.5f64..1.5, 6)) {
        let x = Tensor::new(vec![2, 3], v).unwrap();
        let err = finite_difference_check(
            |t, x| {
                let xt = t.reshape(x, &[3, 2])?;
                let p = t.matmul(x, xt)?;
                let y = t.tanh(p)?;
                t.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        prop_assert!(err < 1e-5, "{err:e}");
    }
}
