use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use heatseg::autograd::ParamStore;
use heatseg::bench::{QuadraticMixer, BENCH_K};
use heatseg::ssm::{scan_blocked, ssm_forward, Sequence, SsmBlock, SCAN_BLOCK};
use heatseg::{dct_forward, Network, NetworkConfig};
use heatseg_bench::{hco_fixture, random_field};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dct(c: &mut Criterion) {
    let mut g = c.benchmark_group("dct_forward");
    for side in [32, 64, 128, 256] {
        let x = random_field(&[8, side, side], 0);
        g.throughput(Throughput::Elements((side * side) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| {
            b.iter(|| dct_forward(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn hco(c: &mut Criterion) {
    let mut g = c.benchmark_group("hco_forward");
    for side in [32, 64, 128, 256] {
        let (layer, store) = hco_fixture(&[side, side], 1);
        let x = random_field(&[8, side, side], 0);
        g.throughput(Throughput::Elements((side * side) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| {
            b.iter(|| layer.forward(&store, black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn mixer(c: &mut Criterion) {
    let mut g = c.benchmark_group("quadratic_mixer");
    g.sample_size(10);
    for side in [32, 64, 128] {
        let m = QuadraticMixer::new(side, side, BENCH_K);
        let x = random_field(&[1, side, side], 0);
        g.bench_with_input(BenchmarkId::from_parameter(side), &x, |b, x| {
            b.iter(|| m.apply(black_box(x)).unwrap())
        });
    }
    g.finish();
}

fn scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan");
    let states = 64;
    let decay = vec![0.9; states];
    for len in [1024, 4096, 16384] {
        let u = random_field(&[states, len], 2).into_data();
        g.throughput(Throughput::Elements((states * len) as u64));
        g.bench_with_input(BenchmarkId::new("blocked", len), &u, |b, u| {
            b.iter(|| scan_blocked(black_box(u), &decay, len, SCAN_BLOCK))
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let block = SsmBlock::new(&mut store, "ssm", 16, 16, &mut rng).unwrap();
    for len in [1024, 4096] {
        let seq = Sequence::new(16, random_field(&[len, 16], 4).into_data()).unwrap();
        g.bench_with_input(BenchmarkId::new("ssm_forward", len), &seq, |b, seq| {
            b.iter(|| ssm_forward(&block, &store, black_box(seq)).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network_2d_desk");
    g.sample_size(10);
    let cfg = NetworkConfig::desk_2d();
    let net = Network::build(&cfg, 7).unwrap();
    let x = random_field(&[1, 64, 64], 5);
    g.bench_function("predict", |b| b.iter(|| net.predict(black_box(&x)).unwrap()));
    g.finish();
}

criterion_group!(benches, dct, hco, mixer, scan, network);
criterion_main!(benches);
