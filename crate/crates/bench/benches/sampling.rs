use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use mixps_bench::relocated_cluster;
use mixps_core::harness::{run_conformity_battery, BatteryConfig};
use mixps_core::workloads::zipf_weights;
use mixps_core::{ConformityLevel, SchemeKind, TargetDistribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn alias_draws(c: &mut Criterion) {
    let mut g = c.benchmark_group("alias_draw");
    g.throughput(Throughput::Elements(1));
    for n in [100, 10_000, 1_000_000] {
        let target = TargetDistribution::from_weights(&zipf_weights(n, 1.1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &target, |b, t| b.iter(|| black_box(t.sample(&mut rng))));
    }
    g.finish();
}

fn pull_sample(c: &mut Criterion) {
    const BATCH: usize = 10_000;
    let mut g = c.benchmark_group("pull_sample");
    g.throughput(Throughput::Elements(BATCH as u64));
    for (scheme, level) in [
        (SchemeKind::Independent, ConformityLevel::L1),
        (SchemeKind::PooledReuse, ConformityLevel::L2 { max_dependency: None }),
    ] {
        let cluster = relocated_cluster(1, 1000, 8);
        let target = TargetDistribution::from_weights(&zipf_weights(1000, 1.1)).unwrap();
        let id = cluster.register_with_scheme(target, scheme, level).unwrap();
        let ctx = cluster.worker_contexts().remove(0);
        let mut ctx = Some(ctx);
        g.bench_function(scheme.name(), |b| {
            b.iter(|| {
                let mut c = ctx.take().unwrap();
                let (c, n) = cluster.run(async move {
                    let mut h = c.prepare_sample(id, BATCH).unwrap();
                    let n = c.pull_sample(&mut h, None).await.unwrap().keys.len();
                    (c, n)
                });
                ctx = Some(c);
                black_box(n)
            })
        });
    }
    g.finish();
}

fn battery(c: &mut Criterion) {
    let mut g = c.benchmark_group("conformity_battery");
    g.sample_size(10);
    for scheme in [SchemeKind::Independent, SchemeKind::PooledReuse] {
        let cfg = BatteryConfig::new(scheme, zipf_weights(100, 1.1), 100_000, 0);
        g.bench_function(scheme.name(), |b| b.iter(|| run_conformity_battery(&cfg).unwrap().passed()));
    }
    g.finish();
}

criterion_group!(benches, alias_draws, pull_sample, battery);
criterion_main!(benches);
