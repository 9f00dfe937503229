use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rcad_tensor::{Exec, Graph, Tensor};

fn conv_layer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::rand_uniform(&[8, 32, 64, 64], 0.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[32, 32, 3, 3], -0.1, 0.1, &mut rng);
    let b = Tensor::zeros(&[32]);
    let mut group = c.benchmark_group("conv2d_3x3_b8_32ch_64px");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::new("fwd_bwd", format!("{exec:?}")), &exec, |bench, &exec| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let xv = g.input(x.clone());
                let kv = g.leaf(k.clone(), true);
                let bv = g.leaf(b.clone(), true);
                let y = g.conv2d(xv, kv, bv, 1, 1).unwrap();
                let loss = g.mean(y);
                g.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn conv3d_layer(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::rand_uniform(&[4, 8, 4, 64, 64], 0.0, 1.0, &mut rng);
    let k = Tensor::rand_uniform(&[8, 8, 3, 3, 3], -0.1, 0.1, &mut rng);
    let b = Tensor::zeros(&[8]);
    let mut group = c.benchmark_group("conv3d_3x3x3_b4_8ch");
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::new("forward", format!("{exec:?}")), &exec, |bench, &exec| {
            bench.iter(|| {
                let mut g = Graph::with_exec(exec);
                let xv = g.input(x.clone());
                let kv = g.input(k.clone());
                let bv = g.input(b.clone());
                g.conv3d(xv, kv, bv, [1, 1, 1], [1, 1, 1]).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, conv_layer, conv3d_layer);
criterion_main!(benches);
