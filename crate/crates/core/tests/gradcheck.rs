//! Finite-difference checks of the tape's backward pass: named cases from
//! the op contracts plus randomized composite computations.

mod common;

use common::{assert_grads_close, autodiff_grads, finite_diff_grads, grads_within_tolerance, RandomComputation};
use softlm_core::rng::Rng;
use softlm_core::tensor::Tape;

#[test]
fn softmax_row_mean_matches_finite_differences() {
    // loss = mean(row_softmax(z) row 0) on random z of length <= 8
    let mut rng = Rng::new(42);
    for trial in 0..5 {
        let len = 2 + rng.below(7);
        let z: Vec<f64> = (0..len).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let leaves = vec![z];
        assert_grads_close(
            &|tape: &mut Tape, vals: &[Vec<f64>]| {
                let z = tape.leaf(vals[0].clone(), 1, vals[0].len(), true);
                let s = tape.row_softmax(z);
                (tape.mean(s), vec![z])
            },
            &leaves,
            &format!("softmax trial {trial}"),
        );
    }
}

#[test]
fn matmul_sum_matches_finite_differences() {
    // loss = sum(A @ B) for random 3x4 . 4x2
    let mut rng = Rng::new(7);
    let a: Vec<f64> = (0..12).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    let b: Vec<f64> = (0..8).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    assert_grads_close(
        &|tape: &mut Tape, vals: &[Vec<f64>]| {
            let a = tape.leaf(vals[0].clone(), 3, 4, true);
            let b = tape.leaf(vals[1].clone(), 4, 2, true);
            let c = tape.matmul(a, b);
            (tape.sum(c), vec![a, b])
        },
        &[a, b],
        "matmul 3x4 . 4x2",
    );
}

#[test]
fn attention_matches_finite_differences() {
    let mut rng = Rng::new(13);
    for &(blocks, lq, lk, heads, d) in &[(1, 3, 3, 1, 4), (2, 2, 2, 2, 4), (1, 1, 4, 2, 6)] {
        let q: Vec<f64> = (0..blocks * lq * d).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let k: Vec<f64> = (0..blocks * lk * d).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        let v: Vec<f64> = (0..blocks * lk * d).map(|_| rng.uniform() * 2.0 - 1.0).collect();
        assert_grads_close(
            &|tape: &mut Tape, vals: &[Vec<f64>]| {
                let q = tape.leaf(vals[0].clone(), blocks * lq, d, true);
                let k = tape.leaf(vals[1].clone(), blocks * lk, d, true);
                let v = tape.leaf(vals[2].clone(), blocks * lk, d, true);
                let o = tape.causal_attention(q, k, v, heads, blocks);
                (tape.mean(o), vec![q, k, v])
            },
            &[q, k, v],
            &format!("attention blocks={blocks} lq={lq} lk={lk} heads={heads}"),
        );
    }
}

#[test]
fn layer_norm_matches_finite_differences() {
    let mut rng = Rng::new(23);
    let x: Vec<f64> = (0..12).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    let gamma: Vec<f64> = (0..4).map(|_| rng.uniform() + 0.5).collect();
    let beta: Vec<f64> = (0..4).map(|_| rng.uniform() - 0.5).collect();
    assert_grads_close(
        &|tape: &mut Tape, vals: &[Vec<f64>]| {
            let x = tape.leaf(vals[0].clone(), 3, 4, true);
            let g = tape.leaf(vals[1].clone(), 1, 4, true);
            let b = tape.leaf(vals[2].clone(), 1, 4, true);
            let o = tape.layer_norm(x, g, b);
            (tape.mean(o), vec![x, g, b])
        },
        &[x, gamma, beta],
        "layer_norm 3x4",
    );
}

#[test]
fn scale_rows_and_recip_match_finite_differences() {
    // the temperature-division pattern: rows scaled by 1/tau
    let mut rng = Rng::new(31);
    let x: Vec<f64> = (0..8).map(|_| rng.uniform() * 4.0 - 2.0).collect();
    let tau: Vec<f64> = (0..2).map(|_| rng.uniform() * 2.0 + 0.5).collect();
    assert_grads_close(
        &|tape: &mut Tape, vals: &[Vec<f64>]| {
            let x = tape.leaf(vals[0].clone(), 2, 4, true);
            let t = tape.leaf(vals[1].clone(), 2, 1, true);
            let inv = tape.recip(t);
            let scaled = tape.scale_rows(x, inv);
            let s = tape.row_softmax(scaled);
            (tape.mean(s), vec![x, t])
        },
        &[x, tau],
        "scale_rows(recip(tau))",
    );
}

#[test]
fn random_composite_computations_pass_gradcheck() {
    let mut rng = Rng::new(1009);
    for trial in 0..25 {
        let comp = RandomComputation::sample(&mut rng);
        let leaves = comp.leaf_values(&mut rng);
        let build = |tape: &mut Tape, vals: &[Vec<f64>]| comp.build(tape, vals);
        let (_, analytic) = autodiff_grads(&build, &leaves);
        let numeric = finite_diff_grads(&build, &leaves, 1e-5);
        assert!(
            grads_within_tolerance(&analytic, &numeric),
            "random computation {trial} failed gradcheck: {comp:?}"
        );
    }
}
