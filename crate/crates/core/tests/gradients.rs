mod common;

use common::{check_model, check_op, op_suite, rng, FD_TOLERANCE};
use pear::{Tape, Tensor};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..5 {
        for (name, err) in op_suite(seed) {
            assert!(err < FD_TOLERANCE, "{name} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn full_model_matches_central_differences() {
    for seed in 0..3 {
        let err = check_model(seed);
        assert!(err < FD_TOLERANCE, "model seed {seed}: rel err {err:e}");
    }
}

#[test]
fn gelu_slope_on_random_scalars() {
    let mut r = rng(77);
    for x in Tensor::randn(&[100], 1.0, &mut r).into_data() {
        let err = check_op(vec![Tensor::new(&[1, 1], vec![x]).unwrap()], &|t, v| Ok(t.gelu(v[0])), 1);
        assert!(err < 1e-6, "gelu at {x}: rel err {err:e}");
    }
}

#[test]
fn matmul_sum_gradient_is_tight() {
    let mut r = rng(3);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r);
    let b = Tensor::randn(&[4, 2], 1.0, &mut r);
    let err = check_op(
        vec![a, b],
        &|t, v| {
            let c = t.matmul(v[0], v[1])?;
            Ok(t.sum(c))
        },
        0,
    );
    assert!(err < 1e-6, "matmul rel err {err:e}");
}

#[test]
fn attention_with_single_head_and_long_sequence() {
    let mut r = rng(5);
    let q = Tensor::randn(&[12, 4], 1.0, &mut r);
    let k = Tensor::randn(&[12, 4], 1.0, &mut r);
    let v = Tensor::randn(&[12, 4], 1.0, &mut r);
    let err = check_op(vec![q, k, v], &|t, v| t.attention(v[0], v[1], v[2], 6, 1), 9);
    assert!(err < FD_TOLERANCE, "attention rel err {err:e}");
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::randn(&[2, 3], 1.0, &mut rng(0)).with_grad());
    let b = tape.leaf(Tensor::randn(&[3, 2], 1.0, &mut rng(1)));
    let c = tape.matmul(a, b).unwrap();
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    assert!(tape.grad(a).is_some());
    assert!(tape.grad(b).is_none());
}

#[test]
fn reused_variable_accumulates_both_paths() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[1, 2], vec![1.5, -2.0]).unwrap().with_grad());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0, -4.0]);
}
