//! Shared oracles for the integration suites: central finite differences
//! against the tape, and a random-computation generator over the primitive
//! op set. Everything here is deliberately independent of the backward-pass
//! implementation it checks.

#![allow(dead_code)]

use softlm_core::rng::Rng;
use softlm_core::tensor::{Tape, TensorId};

/// Builds a graph from leaf buffers, returning the scalar loss and the ids of
/// the differentiable leaves in the same order as the buffers.
pub type GraphFn<'a> = dyn Fn(&mut Tape, &[Vec<f64>]) -> (TensorId, Vec<TensorId>) + 'a;

pub fn autodiff_grads(build: &GraphFn, leaves: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let (loss, ids) = build(&mut tape, leaves);
    tape.backward(loss);
    let grads = ids
        .iter()
        .map(|&id| tape.grad(id).expect("leaf gradient").to_vec())
        .collect();
    (tape.values(loss)[0], grads)
}

/// Central finite differences of the loss w.r.t. every leaf coordinate.
pub fn finite_diff_grads(build: &GraphFn, leaves: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let eval = |vals: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let (loss, _) = build(&mut tape, vals);
        tape.values(loss)[0]
    };
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut g = vec![0.0; leaves[li].len()];
        for ci in 0..leaves[li].len() {
            let mut plus = leaves.to_vec();
            plus[li][ci] += h;
            let mut minus = leaves.to_vec();
            minus[li][ci] -= h;
            g[ci] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Whether every coordinate matches within relative 1e-4 (absolute 1e-6 near
/// zero), the tolerance used across the gradient checks.
pub fn grads_within_tolerance(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> bool {
    analytic.iter().zip(numeric).all(|(a, n)| {
        a.iter()
            .zip(n)
            .all(|(&x, &y)| (x - y).abs() <= (1e-4 * x.abs().max(y.abs())).max(1e-6))
    })
}

/// Asserts the tape gradient matches central differences within the stated
/// tolerances (relative 1e-4, absolute 1e-6 near zero).
pub fn assert_grads_close(build: &GraphFn, leaves: &[Vec<f64>], context: &str) {
    let (_, analytic) = autodiff_grads(build, leaves);
    let numeric = finite_diff_grads(build, leaves, 1e-5);
    for (li, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        for (ci, (&x, &y)) in a.iter().zip(n).enumerate() {
            let tol = 1e-4 * x.abs().max(y.abs());
            let ok = (x - y).abs() <= tol.max(1e-6);
            assert!(
                ok,
                "{context}: leaf {li} coord {ci}: autodiff {x} vs finite-diff {y}"
            );
        }
    }
}

// ── random computation generator ───────────────────────────────────────

#[derive(Clone, Debug)]
enum Step {
    Tanh,
    Exp,
    Log,
    Recip,
    Scale(f64),
    AddScalar(f64),
    RowSoftmax,
    AddLeaf,
    SubLeaf,
    MulLeaf,
    MatMulLeaf(usize),
    ScaleRowsLeaf,
    LayerNormLeaf,
    SelectRows(Vec<usize>),
    RowPick(Vec<usize>),
    ConcatLeaf(usize),
    TileRows(usize),
    Attention { heads: usize },
}

/// A replayable random computation: leaf shapes plus an op chain. Ops that
/// need extra inputs draw them from the leaf list in order.
#[derive(Clone, Debug)]
pub struct RandomComputation {
    leaf_shapes: Vec<(usize, usize)>,
    steps: Vec<Step>,
    reduce_mean: bool,
}

impl RandomComputation {
    /// Samples a well-formed computation with dimensions ≤ 8.
    pub fn sample(rng: &mut Rng) -> Self {
        let rows = 1 + rng.below(6);
        let cols = 1 + rng.below(7);
        let mut leaf_shapes = vec![(rows, cols)];
        let mut steps = Vec::new();
        let (mut r, mut c) = (rows, cols);
        let n_steps = 2 + rng.below(4);
        for _ in 0..n_steps {
            let choice = rng.below(14);
            match choice {
                0 => steps.push(Step::Tanh),
                1 => {
                    // keep exp arguments bounded
                    steps.push(Step::Tanh);
                    steps.push(Step::Exp);
                }
                2 => {
                    // log and recip need positive input
                    steps.push(Step::Tanh);
                    steps.push(Step::Exp);
                    steps.push(if rng.below(2) == 0 { Step::Log } else { Step::Recip });
                }
                3 => steps.push(Step::Scale(rng.uniform() * 3.0 - 1.5)),
                4 => steps.push(Step::AddScalar(rng.uniform() * 2.0 - 1.0)),
                5 => steps.push(Step::RowSoftmax),
                6 => {
                    leaf_shapes.push((r, c));
                    steps.push(match rng.below(3) {
                        0 => Step::AddLeaf,
                        1 => Step::SubLeaf,
                        _ => Step::MulLeaf,
                    });
                }
                7 => {
                    let n = 1 + rng.below(7);
                    leaf_shapes.push((c, n));
                    steps.push(Step::MatMulLeaf(n));
                    c = n;
                }
                8 => {
                    leaf_shapes.push((r, 1));
                    steps.push(Step::ScaleRowsLeaf);
                }
                9 => {
                    if c >= 2 {
                        leaf_shapes.push((1, c));
                        leaf_shapes.push((1, c));
                        steps.push(Step::LayerNormLeaf);
                    }
                }
                10 => {
                    let take = 1 + rng.below(r.min(4));
                    let idx: Vec<usize> = (0..take).map(|_| rng.below(r)).collect();
                    steps.push(Step::SelectRows(idx.clone()));
                    r = take;
                }
                11 => {
                    let extra = 1 + rng.below(3);
                    leaf_shapes.push((extra, c));
                    steps.push(Step::ConcatLeaf(extra));
                    r += extra;
                }
                12 => {
                    let times = 2 + rng.below(2);
                    if r * times <= 16 {
                        steps.push(Step::TileRows(times));
                        r *= times;
                    }
                }
                _ => {
                    if c % 2 == 0 && c >= 2 {
                        leaf_shapes.push((r, c));
                        leaf_shapes.push((r, c));
                        steps.push(Step::Attention { heads: if c % 4 == 0 && rng.below(2) == 0 { 2 } else { 1 } });
                    }
                }
            }
        }
        // occasionally finish through a pick to exercise sparse gradients
        if c >= 2 && rng.below(4) == 0 {
            let idx: Vec<usize> = (0..r).map(|_| rng.below(c)).collect();
            steps.push(Step::RowPick(idx));
        }
        RandomComputation { leaf_shapes, steps, reduce_mean: rng.below(2) == 0 }
    }

    pub fn leaf_values(&self, rng: &mut Rng) -> Vec<Vec<f64>> {
        self.leaf_shapes
            .iter()
            .map(|&(r, c)| (0..r * c).map(|_| rng.uniform() * 4.0 - 2.0).collect())
            .collect()
    }

    pub fn build(&self, tape: &mut Tape, leaves: &[Vec<f64>]) -> (TensorId, Vec<TensorId>) {
        let mut ids = Vec::new();
        let mut next_leaf = 0;
        let mut grab = |tape: &mut Tape, ids: &mut Vec<TensorId>| -> TensorId {
            let (r, c) = self.leaf_shapes[next_leaf];
            let id = tape.leaf(leaves[next_leaf].clone(), r, c, true);
            next_leaf += 1;
            ids.push(id);
            id
        };
        let mut cur = grab(tape, &mut ids);
        for step in &self.steps {
            cur = match step {
                Step::Tanh => tape.tanh(cur),
                Step::Exp => tape.exp(cur),
                Step::Log => tape.log(cur),
                Step::Recip => tape.recip(cur),
                Step::Scale(s) => tape.scale(cur, *s),
                Step::AddScalar(s) => tape.add_scalar(cur, *s),
                Step::RowSoftmax => tape.row_softmax(cur),
                Step::AddLeaf => {
                    let l = grab(tape, &mut ids);
                    tape.add(cur, l)
                }
                Step::SubLeaf => {
                    let l = grab(tape, &mut ids);
                    tape.sub(cur, l)
                }
                Step::MulLeaf => {
                    let l = grab(tape, &mut ids);
                    tape.mul(cur, l)
                }
                Step::MatMulLeaf(_) => {
                    let l = grab(tape, &mut ids);
                    tape.matmul(cur, l)
                }
                Step::ScaleRowsLeaf => {
                    let l = grab(tape, &mut ids);
                    tape.scale_rows(cur, l)
                }
                Step::LayerNormLeaf => {
                    let gamma = grab(tape, &mut ids);
                    let beta = grab(tape, &mut ids);
                    tape.layer_norm(cur, gamma, beta)
                }
                Step::SelectRows(idx) => tape.select_rows(cur, idx),
                Step::RowPick(idx) => tape.row_pick(cur, idx),
                Step::ConcatLeaf(_) => {
                    let l = grab(tape, &mut ids);
                    tape.concat_rows(cur, l)
                }
                Step::TileRows(times) => tape.tile_rows(cur, *times),
                Step::Attention { heads } => {
                    let k = grab(tape, &mut ids);
                    let v = grab(tape, &mut ids);
                    tape.causal_attention(cur, k, v, *heads, 1)
                }
            };
        }
        let loss = if self.reduce_mean { tape.mean(cur) } else {
            let s = tape.sum(cur);
            tape.scale(s, 0.25)
        };
        (loss, ids)
    }
}
