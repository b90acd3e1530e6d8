//! Micro-benchmarks for the kernels that dominate training cost: the
//! selective scan, multi-head attention, patchification, and the assembled
//! forward pass at benchmark-default sizes.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use s2tx_core::attention::AttentionParams;
use s2tx_core::config::resolve;
use s2tx_core::graph::Graph;
use s2tx_core::model::S2TXModel;
use s2tx_core::nn::ParamStore;
use s2tx_core::patching::{patchify, PatchSpec};
use s2tx_core::scan::scan_forward;
use s2tx_core::tensor::Tensor;
use s2tx_core::Forecaster;

fn randn(rng: &mut ChaCha8Rng, n: usize, r: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(n, r, c);
    t.randn_fill(rng, 1.0);
    t
}

fn bench_scan(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, seq, d_inner, d_state) = (32, 126, 128, 16);
    let x = randn(&mut rng, n, seq, d_inner);
    let dt = Tensor::filled(n, seq, d_inner, 0.05);
    let b = randn(&mut rng, n, seq, d_state);
    let cm = randn(&mut rng, n, seq, d_state);
    let a = Tensor::from_fn(1, d_inner, d_state, |_, _, s| -((s + 1) as f64));
    let d = Tensor::filled(1, 1, d_inner, 1.0);

    c.bench_function("selective_scan_batch32_seq126", |bench| {
        bench.iter(|| {
            let (y, _) = scan_forward(&x, &dt, &b, &cm, &a, &d, false).unwrap();
            black_box(y.data()[0])
        })
    });
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let p = AttentionParams::init(&mut store, &mut rng, "a", 64, 4);
    let tokens = randn(&mut rng, 224, 19, 64);
    let ctx = randn(&mut rng, 224, 18, 64);

    c.bench_function("cross_attention_224x19x64", |bench| {
        bench.iter(|| {
            let mut g = Graph::new(false);
            let t = g.constant(tokens.clone());
            let s = g.constant(ctx.clone());
            let out = p.cross(&mut g, &store, s, t);
            black_box(g.value(out).data()[0])
        })
    });
}

fn bench_patchify(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = randn(&mut rng, 1, 7, 336);
    let spec = PatchSpec::global(48, 16);
    c.bench_function("patchify_7x336", |bench| {
        bench.iter(|| {
            let p = patchify(&w, &spec).unwrap();
            black_box(p.values.data()[0])
        })
    });
}

fn bench_model_forward(c: &mut Criterion) {
    let cfg = resolve(None, &[]).unwrap();
    let model = S2TXModel::new(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = randn(&mut rng, 1, 7, 336);

    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    group.bench_function("forward_etth_defaults", |bench| {
        bench.iter(|| {
            let f = model.predict_batch(&w).unwrap();
            black_box(f.data()[0])
        })
    });
    group.finish();
}

criterion_group!(benches, bench_scan, bench_attention, bench_patchify, bench_model_forward);
criterion_main!(benches);
