use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_distr::{Distribution, StandardNormal};
use std::hint::black_box;

use invflow::flow::{FlowConfig, MtaFlowStack};
use invflow::losses::{hsic, hsic_value, KernelSpec};
use invflow::params::ParamStore;
use invflow::rng;
use invflow::{Tape, Tensor};

fn normal(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 0);
    Tensor::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let (a, b) = (normal(n, n, 1), normal(n, n, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
                black_box(tape.matmul(x, y).unwrap());
            })
        });
    }
    g.finish();
}

fn hsic_bench(c: &mut Criterion) {
    let k = KernelSpec::gaussian(1.0).unwrap();
    let mut g = c.benchmark_group("hsic");
    for n in [128, 384] {
        let (a, b) = (normal(n, 1, 3), normal(n, 4, 4));
        g.bench_with_input(BenchmarkId::new("value", n), &n, |bch, _| {
            bch.iter(|| black_box(hsic_value(&a, &b, k, k).unwrap()))
        });
        g.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |bch, _| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let x = tape.param(a.clone());
                let y = tape.constant(b.clone());
                let h = hsic(&mut tape, x, y, k, k).unwrap();
                tape.backward(h).unwrap();
                black_box(tape.grad(x));
            })
        });
    }
    g.finish();
}

fn flow_inverse(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(5, 0);
    let flow = MtaFlowStack::new(&mut store, "flow", 1, &FlowConfig::default(), &mut r).unwrap();
    let cond = normal(256, 1, 6);
    c.bench_function("flow_sample_256x8", |bch| {
        bch.iter(|| {
            let mut r = rng::stream(7, 0);
            black_box(flow.sample_conditional(&store, &cond, 8, &mut r).unwrap())
        })
    });
}

criterion_group!(benches, matmul, hsic_bench, flow_inverse);
criterion_main!(benches);
