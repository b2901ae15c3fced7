use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use softlm_core::dlm::{forward_teacher_forced, DistSeq};
use softlm_core::inverter::{run_inversion, InversionConfig, Method, ReinforceParams};
use softlm_core::lm::{LmConfig, LmWeights};
use softlm_core::metrics::lcs_length;
use softlm_core::{Rng, Tape};

fn bench_tape_ops(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let a: Vec<f64> = (0..104 * 32).map(|_| rng.normal()).collect();
    let b: Vec<f64> = (0..32 * 64).map(|_| rng.normal()).collect();
    c.bench_function("tape_matmul_104x32x64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let x = tape.leaf(a.clone(), 104, 32, true);
            let w = tape.leaf(b.clone(), 32, 64, true);
            let y = tape.matmul(x, w);
            let loss = tape.mean(y);
            tape.backward(loss);
            black_box(tape.grad(x).unwrap()[0])
        })
    });
}

fn bench_forward_passes(c: &mut Criterion) {
    let w = LmWeights::init(LmConfig::toy(), 7).unwrap();
    let prompt = DistSeq::uniform(8, 64);
    let target = [5usize, 9, 33, 2, 40, 11];
    c.bench_function("teacher_forced_forward_n8_m6", |bench| {
        bench.iter(|| black_box(forward_teacher_forced(&w, &prompt, &target).unwrap().data[0]))
    });
    c.bench_function("greedy_decode_n8_m6", |bench| {
        bench.iter(|| black_box(w.greedy_decode(&[3, 1, 4, 1, 5, 9, 2, 6], 6).unwrap()))
    });
}

fn bench_inversion_steps(c: &mut Criterion) {
    let w = LmWeights::init(LmConfig::toy(), 7).unwrap();
    let target = [5usize, 9, 33, 2, 40, 11];
    for (name, method) in [
        ("dlmi_step", Method::dlmi(100.0)),
        ("gbda_step", Method::Gbda { tau: 1.0 }),
        ("reinforce_step", Method::Reinforce(ReinforceParams::default())),
    ] {
        let config = InversionConfig::new(method, 8, 1, 3);
        c.bench_function(name, |bench| {
            bench.iter(|| black_box(run_inversion(&w, &target, &config).unwrap().final_z[0]))
        });
    }
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let a: Vec<usize> = (0..64).map(|_| rng.below(64)).collect();
    let b: Vec<usize> = (0..64).map(|_| rng.below(64)).collect();
    c.bench_function("lcs_length_64x64", |bench| bench.iter(|| black_box(lcs_length(&a, &b))));
}

criterion_group!(benches, bench_tape_ops, bench_forward_passes, bench_inversion_steps, bench_metrics);
criterion_main!(benches);
