use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedcka::cka::hsic1_unbiased;
use fedcka::fl::{fedavg_aggregate, local_train, AlaConfig, FlConfig, MoonConfig, TrainContext};
use fedcka::graph::Graph;
use fedcka::model::{Mode, ModelSpec};
use fedcka::tensor::gemm_nn;
use fedcka_bench::{client_updates, gram_pair, random_matrix, train_fixture};
use std::hint::black_box;

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for n in [64, 128, 256] {
        let a = random_matrix(n, n, 1);
        let b = random_matrix(n, n, 2);
        let mut out = vec![0.0; n * n];
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn(a.data(), b.data(), &mut out, n, n, n);
                black_box(&out);
            })
        });
    }
    group.finish();
}

fn hsic(c: &mut Criterion) {
    let mut group = c.benchmark_group("hsic1_unbiased");
    for n in [50, 200] {
        let (k, l) = gram_pair(n, 64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| hsic1_unbiased(black_box(&k), black_box(&l)).unwrap())
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random_matrix(32, 16 * 16 * 16, 3).reshape(&[32, 16, 16, 16]).unwrap();
    let w = random_matrix(32, 16 * 9, 4).reshape(&[32, 16, 3, 3]).unwrap();
    c.bench_function("conv2d_forward_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone(), true);
            let wv = g.leaf(w.clone(), true);
            let y = g.conv2d(xv, wv, 1, 1).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv).unwrap()[0]);
        })
    });
}

fn aggregation(c: &mut Criterion) {
    let updates = client_updates(&ModelSpec::tiny_cnn(), 10);
    let refs: Vec<_> = updates.iter().map(|(p, n)| (p, *n)).collect();
    c.bench_function("fedavg_aggregate_cnn_10", |bench| {
        bench.iter(|| fedavg_aggregate(black_box(&refs)).unwrap())
    });
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("local_train_batch32");
    group.sample_size(10);
    for spec in [ModelSpec::tiny_mlp(), ModelSpec::tiny_cnn(), ModelSpec::tiny_vit()] {
        let name = spec.arch.name();
        let fx = train_fixture(spec.clone());
        let cfg = FlConfig::for_spec(&spec);
        let (moon, ala) = (MoonConfig::default(), AlaConfig::default());
        let ctx = TrainContext {
            arch: &fx.model.arch,
            train: &fx.data,
            validation: &fx.data,
            cfg: &cfg,
            moon: &moon,
            ala: &ala,
        };
        let shard: Vec<usize> = (0..cfg.batch_size).collect();
        group.bench_function(name, |bench| {
            bench.iter(|| local_train(&ctx, 0, &shard, fx.model.params.clone(), &fx.model.params, None, 1).unwrap())
        });
    }
    group.finish();
}

fn eval_forward(c: &mut Criterion) {
    let fx = train_fixture(ModelSpec::tiny_cnn());
    let idx: Vec<usize> = (0..32).collect();
    let (x, _) = fx.data.batch(&idx);
    c.bench_function("cnn_eval_forward_batch32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let vars = fx.model.params.bind(&mut g, false);
            let xv = g.constant(x.clone());
            black_box(fx.model.arch.forward(&mut g, &vars, xv, Mode::Eval).unwrap().logits);
        })
    });
}

criterion_group!(benches, gemm, hsic, conv, aggregation, training_step, eval_forward);
criterion_main!(benches);
