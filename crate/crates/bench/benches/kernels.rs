use std::hint::black_box;

use collapse_lab::datasets::synth_lowrank;
use collapse_lab::linalg::{matmul, sym_eigen};
use collapse_lab::objective::{energy_graph, gaussian_tail, interval_quadratic_expectation};
use collapse_lab::rng::{normal_vec, seeded};
use collapse_lab::{ModelSpec, Tape, Tensor, VaeModel};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn dense(c: &mut Criterion) {
    let mut rng = seeded(1);
    let mut g = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = normal_vec(&mut rng, n * n);
        let b = normal_vec(&mut rng, n * n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, &n| {
            bch.iter(|| matmul(black_box(&a), black_box(&b), n, n, n))
        });
    }
    g.finish();

    let n = 32;
    let m = normal_vec(&mut rng, n * n);
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..n).map(|k| m[k * n + i] * m[k * n + j]).sum();
        }
    }
    c.bench_function("sym_eigen 32", |b| b.iter(|| sym_eigen(black_box(&s), n)));
}

fn energy(c: &mut Criterion) {
    let batch = synth_lowrank(64, 32, &[4.0, 1.0, 0.25, 0.0625], 2).unwrap();
    let mut g = c.benchmark_group("energy forward+backward");
    for depth in [1usize, 4] {
        let model = VaeModel::new(ModelSpec::mlp(32, 8, depth, 64), 3).unwrap();
        let eps = Tensor::matrix(64, 8, normal_vec(&mut seeded(4), 64 * 8)).unwrap();
        g.bench_with_input(BenchmarkId::new("depth", depth), &depth, |b, _| {
            b.iter(|| {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, true);
                let lg = tape.param(Tensor::scalar(model.log_gamma));
                let e = energy_graph(&mut tape, &model, &bound, batch.x(), &eps, lg).unwrap();
                black_box(tape.backward(e.total).unwrap())
            })
        });
    }
    g.finish();
}

fn closed_forms(c: &mut Criterion) {
    c.bench_function("gaussian_tail", |b| b.iter(|| gaussian_tail(black_box(1.3))));
    c.bench_function("interval_quadratic_expectation", |b| {
        b.iter(|| interval_quadratic_expectation(black_box(-0.5), black_box(2.0), [1.0, -0.3, 0.7], 0.2, 0.9))
    });
}

criterion_group!(benches, dense, energy, closed_forms);
criterion_main!(benches);
