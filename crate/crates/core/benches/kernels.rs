use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use implantmamba::graph::Graph;
use implantmamba::net::{HeatmapSource, ImplantNet, ModelConfig};
use implantmamba::ops::conv::{conv3d_direct, conv3d_im2col, Conv3dGeometry};
use implantmamba::parallel::{current_threads, with_threads};
use implantmamba::phantom::{generate, PhantomParams};
use implantmamba::scan::{random_inputs, scan_chunked, scan_sequential, ScanDims, DEFAULT_CHUNK};
use implantmamba::tensor::Tensor;

/// `(label, worker count)`: the pooled path against a single worker.
fn thread_modes() -> [(&'static str, usize); 2] {
    [("sequential", 1), ("parallel", current_threads().max(2))]
}

fn scan(c: &mut Criterion) {
    let mut group = c.benchmark_group("scan");
    group.sample_size(10);
    for len in [1 << 12, 1 << 14] {
        let inputs = random_inputs::<f32>(ScanDims { batch: 2, len, din: 16, state: 16 }, 1);
        group.bench_with_input(BenchmarkId::new("scan_sequential", len), &inputs, |b, i| {
            b.iter(|| scan_sequential(i).unwrap())
        });
        for (label, threads) in thread_modes() {
            group.bench_with_input(BenchmarkId::new(format!("scan_chunked/{label}"), len), &inputs, |b, i| {
                with_threads(threads, || b.iter(|| scan_chunked(i, DEFAULT_CHUNK).unwrap()))
            });
        }
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3d");
    group.sample_size(10);
    let geo = Conv3dGeometry::new(&[2, 8, 32, 32, 32], &[16, 8, 3, 3, 3], 1, 1).unwrap();
    let x: Tensor<f32> = Tensor::from_fn(vec![2 * 8 * 32 * 32 * 32], |i| ((i % 97) as f32 - 48.0) / 48.0);
    let w: Tensor<f32> = Tensor::from_fn(vec![16 * 8 * 27], |i| ((i % 31) as f32 - 15.0) / 150.0);
    for (label, threads) in thread_modes() {
        group.bench_function(BenchmarkId::new("im2col", label), |b| {
            with_threads(threads, || b.iter(|| conv3d_im2col(&geo, x.data(), w.data(), None)))
        });
        group.bench_function(BenchmarkId::new("direct", label), |b| {
            with_threads(threads, || b.iter(|| conv3d_direct(&geo, x.data(), w.data(), None)))
        });
    }
    group.finish();
}

fn network(c: &mut Criterion) {
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    let net = ImplantNet::new(ModelConfig::tiny()).unwrap();
    let params = net.init_params::<f32>(0).unwrap();
    let ph = generate(0, &PhantomParams::default()).unwrap();
    let vol = ph.volume.reshape(vec![1, 1, 32, 32, 32]).unwrap();
    for (label, threads) in thread_modes() {
        group.bench_function(BenchmarkId::new("forward_backward_32", label), |b| {
            with_threads(threads, || {
                b.iter(|| {
                    let mut g = Graph::new();
                    let bound = params.bind(&mut g);
                    let x = g.constant(vol.clone());
                    let out = net.forward(&mut g, &bound, x, HeatmapSource::Predicted).unwrap();
                    let loss = g.sum(out.prob);
                    g.backward(loss).unwrap();
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, scan, conv, network);
criterion_main!(benches);
