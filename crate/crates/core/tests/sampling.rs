use mixps_core::harness::{run_conformity_battery, BatteryConfig};
use mixps_core::workloads::zipf_weights;
use mixps_core::{
    Cause, Cluster, ClusterConfig, ConformityLevel, Key, ManagementTechnique, NetworkModel, SchemeKind,
    TargetDistribution, TechniqueTable,
};

fn relocated(q: usize, keys: usize, g: usize, u: usize, seed: u64) -> Cluster {
    let mut cfg = ClusterConfig::new(q, keys, 1);
    cfg.pool_size = g;
    cfg.use_frequency = u;
    cfg.rng_seed = seed;
    Cluster::simulated(
        cfg,
        TechniqueTable::all(ManagementTechnique::Relocated, keys),
        NetworkModel::default(),
    )
    .unwrap()
}

#[test]
fn reuse_with_one_key_pools_delivers_each_draw_twice_in_order() {
    for seed in 0..20 {
        let cluster = relocated(1, 10, 1, 2, seed);
        let target = TargetDistribution::uniform((0..10).map(Key).collect()).unwrap();
        let level = ConformityLevel::L2 { max_dependency: None };
        let id = cluster.register_recording_pools(target, SchemeKind::PooledReuse, level).unwrap();
        let mut ctx = cluster.worker_contexts().remove(0);
        let keys = cluster.run(async move {
            let mut h = ctx.prepare_sample(id, 6).unwrap();
            let mut out = Vec::new();
            for _ in 0..3 {
                out.extend(ctx.pull_sample(&mut h, Some(2)).await.unwrap().keys);
            }
            out
        });
        let pools = cluster.node(0).pool_history(id).unwrap().unwrap();
        let fresh: Vec<Key> = pools.iter().take(3).map(|p| p[0]).collect();
        assert_eq!(keys, vec![fresh[0], fresh[0], fresh[1], fresh[1], fresh[2], fresh[2]]);
    }
}

#[test]
fn independent_scheme_passes_on_four_uniform_keys() {
    let passes = (0..100)
        .filter(|&seed| {
            let cfg = BatteryConfig::new(SchemeKind::Independent, vec![0.25; 4], 4000, seed);
            let out = run_conformity_battery(&cfg).unwrap();
            out.result("chi_square").unwrap().statistic < 11.34
        })
        .count();
    assert!(passes >= 99, "{passes} of 100 runs below the 0.99 quantile");
}

#[test]
fn pooled_reuse_uses_every_draw_exactly_u_times() {
    let cfg = BatteryConfig::new(SchemeKind::PooledReuse, zipf_weights(100, 1.1), 200_000, 3);
    let out = run_conformity_battery(&cfg).unwrap();
    assert!(out.passed(), "{:?}", out.results);
    let uses = out.result("exact_use_count").unwrap();
    assert_eq!(uses.statistic, 0.0);
    let dist = out.result("max_dependency_distance").unwrap();
    assert!(dist.statistic <= 4000.0);
    assert_eq!(dist.threshold, 4000.0);
}

#[test]
fn postponing_keeps_handle_multisets() {
    let cfg = BatteryConfig::new(SchemeKind::ReusePostponing, zipf_weights(100, 1.1), 200_000, 4);
    let out = run_conformity_battery(&cfg).unwrap();
    assert!(out.passed(), "{:?}", out.results);
    assert!(out.result("postponing_exercised").unwrap().statistic > 0.0);
}

#[test]
fn local_sampling_never_sees_a_key_owned_elsewhere() {
    let mut target = vec![0.5 / 99.0; 100];
    target[99] = 0.5;
    let cfg = BatteryConfig::new(SchemeKind::Local, target, 40_000, 5);
    let out = run_conformity_battery(&cfg).unwrap();
    assert!(out.passed(), "{:?}", out.results);
    assert_eq!(out.messages.total, 0);
    for node in 0..3 {
        assert_eq!(out.node_counts[node][99], 0);
    }
    assert!(out.node_counts[3][99] > 0);
    assert!(!out.result("node_frequency").unwrap().passed);
}

#[test]
fn a_tight_dependency_bound_falls_back_to_independent_draws() {
    let level: ConformityLevel = "L2:100".parse().unwrap();
    assert_eq!(SchemeKind::for_level(level, 250, 16), SchemeKind::Independent);
    let cluster = relocated(2, 20, 250, 16, 0);
    let id = cluster
        .register_distribution(TargetDistribution::uniform((0..20).map(Key).collect()).unwrap(), level)
        .unwrap();
    assert_eq!(cluster.node(0).scheme_of(id).unwrap().0, SchemeKind::Independent);
}

#[test]
fn sampling_messages_are_attributed_to_sampling() {
    let cluster = relocated(2, 40, 250, 16, 1);
    let id = cluster
        .register_distribution(TargetDistribution::uniform((0..40).map(Key).collect()).unwrap(), ConformityLevel::L1)
        .unwrap();
    let mut ctx = cluster.worker_contexts().remove(0);
    let before = cluster.counters();
    cluster.run(async move {
        let mut h = ctx.prepare_sample(id, 200).unwrap();
        let batch = ctx.pull_sample(&mut h, None).await.unwrap();
        assert_eq!(batch.keys.len(), 200);
        assert_eq!(h.remaining(), 0);
        assert!(ctx.pull_sample(&mut h, Some(1)).await.is_err());
    });
    cluster.settle().unwrap();
    let d = cluster.counters().since(&before);
    assert!(d.cause(Cause::Sampling) > 0);
    assert_eq!(d.cause(Cause::Sampling), d.total());
}

#[test]
fn local_scheme_with_no_local_support_falls_back_and_counts_it() {
    let cluster = relocated(2, 10, 250, 16, 2);
    // All mass on keys homed at node 1.
    let target = TargetDistribution::new(vec![Key(7), Key(8)], vec![0.5, 0.5]).unwrap();
    let id = cluster.register_distribution(target, ConformityLevel::L4).unwrap();
    let mut ctx = cluster.worker_contexts().remove(0);
    let keys = cluster.run(async move {
        let mut h = ctx.prepare_sample(id, 10).unwrap();
        ctx.pull_sample(&mut h, None).await.unwrap().keys
    });
    assert!(keys.iter().all(|k| *k == Key(7) || *k == Key(8)));
    assert!(cluster.node(0).sampling_counters(id).unwrap().local_fallbacks > 0);
}
