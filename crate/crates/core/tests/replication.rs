use std::time::Duration;

use futures::future::join_all;
use mixps_core::{
    Cause, Cluster, ClusterConfig, Key, ManagementTechnique, MessageKind, NetworkModel, Scalar,
    TechniqueTable, Values,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cluster_with(cfg: ClusterConfig, techniques: Vec<ManagementTechnique>) -> Cluster {
    Cluster::simulated(cfg, TechniqueTable::new(techniques), NetworkModel::default()).unwrap()
}

fn all_replicated(q: usize, keys: usize, dim: usize, staleness_ms: f64) -> Cluster {
    let mut cfg = ClusterConfig::new(q, keys, dim);
    cfg.staleness_ms = staleness_ms;
    cluster_with(cfg, vec![ManagementTechnique::Replicated; keys])
}

/// Every node pushes random deltas to random keys while synchronization runs.
/// Returns the per-key sum of the applied deltas.
fn random_pushes(cluster: &Cluster, per_worker: usize, seed: u64) -> Vec<Vec<f64>> {
    let keys = cluster.config().num_keys;
    let dim = cluster.config().value_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans = Vec::new();
    for _ in 0..cluster.nodes().len() {
        let plan: Vec<(u64, Vec<Scalar>, u64)> = (0..per_worker)
            .map(|_| {
                (
                    rng.random_range(0..keys as u64),
                    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    rng.random_range(0..400),
                )
            })
            .collect();
        plans.push(plan);
    }
    let tasks: Vec<_> = cluster
        .nodes()
        .iter()
        .cloned()
        .zip(plans)
        .map(|(node, plan)| async move {
            let mut applied = vec![vec![0.0f64; node.config().value_dim]; node.config().num_keys];
            for (k, d, pause) in plan {
                let a = node.push_replica(Key(k), &d).unwrap();
                for (s, x) in applied[k as usize].iter_mut().zip(a) {
                    *s += x as f64;
                }
                node.runtime().sleep(Duration::from_micros(pause)).await;
            }
            applied
        })
        .collect();
    let per_node = cluster.run(async move { join_all(tasks).await });
    let mut total = vec![vec![0.0f64; dim]; keys];
    for applied in per_node {
        for (t, a) in total.iter_mut().zip(applied) {
            for (x, y) in t.iter_mut().zip(a) {
                *x += y;
            }
        }
    }
    total
}

fn assert_replicas_identical(cluster: &Cluster) {
    for k in 0..cluster.config().num_keys {
        let key = Key(k as u64);
        let first = cluster.node(0).peek(key).unwrap().0;
        for n in cluster.nodes() {
            let v = n.peek(key).unwrap().0;
            let same = v.iter().zip(&first).all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same, "key {k}: node {} differs: {v:?} vs {first:?}", n.id());
        }
    }
}

#[test]
fn final_sync_conserves_updates_for_any_node_count() {
    for q in [1, 2, 3, 4, 5, 6, 8] {
        let mut cluster = all_replicated(q, 20, 3, 1.0);
        for k in 0..20u64 {
            cluster.init_value(Key(k), &[k as Scalar, 1.0, -1.0]).unwrap();
        }
        cluster.start_sync();
        let total = random_pushes(&cluster, 500, q as u64);
        cluster.stop_sync();
        cluster.sync_now();
        assert_replicas_identical(&cluster);
        for k in 0..20u64 {
            let v = cluster.snapshot(Key(k)).unwrap();
            let init = [k as f64, 1.0, -1.0];
            for i in 0..3 {
                let expect = init[i] + total[k as usize][i];
                assert!((v[i] as f64 - expect).abs() <= 1e-12, "q={q} key {k}: {} vs {expect}", v[i]);
            }
            assert!(cluster.nodes().iter().all(|n| !n.replica_dirty(Key(k))));
        }
        if q > 1 {
            let rounds = cluster.node(0).sync_stats().rounds;
            assert!(rounds > 10, "q={q}: only {rounds} rounds");
        }
    }
}

#[test]
fn clipped_updates_are_conserved_as_applied() {
    let mut cfg = ClusterConfig::new(4, 10, 2);
    cfg.staleness_ms = 2.0;
    cfg.clip_factor = Some(2.0);
    cfg.clip_smoothing = 0.05;
    let mut cluster = cluster_with(cfg, vec![ManagementTechnique::Replicated; 10]);
    cluster.start_sync();
    let total = random_pushes(&cluster, 300, 17);
    cluster.stop_sync();
    cluster.sync_now();
    assert_replicas_identical(&cluster);
    for k in 0..10u64 {
        let v = cluster.snapshot(Key(k)).unwrap();
        for i in 0..2 {
            assert!((v[i] as f64 - total[k as usize][i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn clipping_scales_outliers_to_factor_times_mean() {
    let mut cfg = ClusterConfig::new(1, 1, 1);
    cfg.clip_factor = Some(2.0);
    cfg.clip_smoothing = 0.5;
    let cluster = cluster_with(cfg, vec![ManagementTechnique::Replicated]);
    let node = cluster.node(0);
    // first update initializes the running mean and passes unchanged
    assert_eq!(node.push_replica(Key(0), &[10.0]).unwrap(), vec![10.0]);
    // within 2x of the mean
    assert_eq!(node.push_replica(Key(0), &[-20.0]).unwrap(), vec![-20.0]);
    // mean is now 15; norm 100 is clipped to 30
    let applied = node.push_replica(Key(0), &[100.0]).unwrap();
    assert!((applied[0] - 30.0).abs() < 1e-12, "{applied:?}");
}

#[test]
fn rounds_exchange_only_written_keys() {
    let mut cluster = all_replicated(2, 50, 1, 5.0);
    let sim = cluster.simulation().unwrap();
    sim.enable_trace();
    cluster.node(1).push_replica(Key(7), &[1.0]).unwrap();
    cluster.node(0).push_replica(Key(3), &[0.0]).unwrap();
    cluster.sync_now();
    let trace = cluster.simulation().unwrap().take_trace();
    assert_eq!(trace.len(), 2);
    for t in &trace {
        assert_eq!(t.kind, MessageKind::SyncExchange);
        assert_eq!(t.cause, Cause::Sync);
    }
    let from1 = trace.iter().find(|t| t.sender == 1).unwrap();
    assert_eq!(from1.keys, vec![Key(7)]);
    let from0 = trace.iter().find(|t| t.sender == 0).unwrap();
    assert!(from0.keys.is_empty(), "zero delta must not dirty the replica");
    assert_eq!(cluster.node(0).peek(Key(7)).unwrap().0, vec![1.0]);
    cluster.start_sync();
    cluster.stop_sync();
}

#[test]
fn no_replicated_keys_means_no_sync_messages() {
    let mut cfg = ClusterConfig::new(4, 40, 1);
    cfg.staleness_ms = 1.0;
    let mut cluster = cluster_with(cfg, vec![ManagementTechnique::Relocated; 40]);
    cluster.start_sync();
    let rt = cluster.node(0).runtime().clone();
    cluster.run(async move { rt.sleep(Duration::from_millis(100)).await });
    cluster.stop_sync();
    cluster.sync_now();
    assert_eq!(cluster.counters().cause(Cause::Sync), 0);
    assert_eq!(cluster.counters().total(), 0);
    assert_eq!(cluster.node(0).sync_stats().rounds, 0);
}

#[test]
fn remote_writes_visible_within_twice_the_interval() {
    let interval_ms = 4.0;
    let mut cluster = all_replicated(4, 8, 1, interval_ms);
    cluster.start_sync();
    let writer = cluster.node(2).clone();
    let readers: Vec<_> = cluster.nodes().to_vec();
    let check = async move {
        let rt = writer.runtime().clone();
        let mut written = 0.0;
        for i in 0..50u64 {
            rt.sleep(Duration::from_micros(1_300 * (i % 5) + 170)).await;
            writer.push_replica(Key(i % 8), &[1.0]).unwrap();
            written += 1.0;
            let deadline = Duration::from_secs_f64(2.0 * interval_ms / 1000.0);
            let target = written;
            let readers = readers.clone();
            let rt2 = rt.clone();
            // observe from the other nodes once the bound has passed
            let fut = async move {
                rt2.sleep(deadline).await;
                for r in &readers {
                    let sum: Scalar = (0..8).map(|k| r.peek(Key(k)).unwrap().0[0]).sum();
                    assert!(sum >= target, "node {} sees {sum} < {target}", r.id());
                }
            };
            rt.spawn(Box::pin(fut));
        }
        rt.sleep(Duration::from_millis(20)).await;
    };
    cluster.run(check);
    let stats = cluster.node(0).sync_stats();
    assert!(stats.max_round < Duration::from_secs_f64(interval_ms / 1000.0));
    let hz = stats.achieved_frequency_hz().unwrap();
    assert!((hz - 250.0).abs() < 25.0, "achieved {hz} Hz");
    cluster.stop_sync();
}

#[test]
fn overrunning_rounds_run_back_to_back() {
    let mut cfg = ClusterConfig::new(4, 4, 1);
    cfg.staleness_ms = 0.05;
    let mut cluster = Cluster::simulated(
        cfg,
        TechniqueTable::all(ManagementTechnique::Replicated, 4),
        NetworkModel::fixed(Duration::from_micros(100)),
    )
    .unwrap();
    cluster.start_sync();
    let rt = cluster.node(0).runtime().clone();
    cluster.run(async move { rt.sleep(Duration::from_millis(10)).await });
    cluster.stop_sync();
    let stats = cluster.node(0).sync_stats();
    // two stages of 100us each: 5000 Hz achievable against a 20000 Hz target
    let hz = stats.achieved_frequency_hz().unwrap();
    assert!((hz - 5000.0).abs() < 200.0, "achieved {hz} Hz");
}

#[test]
fn disabled_sync_lets_replicas_diverge() {
    let mut cfg = ClusterConfig::new(2, 1, 1);
    cfg.sync_disabled = true;
    let mut cluster = cluster_with(cfg, vec![ManagementTechnique::Replicated]);
    cluster.start_sync();
    let mut ctxs = cluster.worker_contexts();
    let mut c0 = ctxs.remove(0);
    cluster.run(async move {
        c0.push(&[Key(0)], &Values::from_flat(1, vec![3.0])).await.unwrap();
    });
    cluster.stop_sync();
    assert_eq!(cluster.node(0).peek(Key(0)).unwrap().0, vec![3.0]);
    assert_eq!(cluster.node(1).peek(Key(0)).unwrap().0, vec![0.0]);
    assert_eq!(cluster.counters().total(), 0);
}

#[test]
fn mixed_techniques_over_tcp() {
    let mut cfg = ClusterConfig::new(3, 12, 1);
    cfg.staleness_ms = 2.0;
    let techniques: Vec<_> = (0..12)
        .map(|k| if k < 3 { ManagementTechnique::Replicated } else { ManagementTechnique::Relocated })
        .collect();
    let mut cluster = Cluster::tcp(cfg, TechniqueTable::new(techniques)).unwrap();
    cluster.start_sync();
    let tasks: Vec<_> = cluster
        .worker_contexts()
        .into_iter()
        .map(|mut ctx| async move {
            for i in 0..200u64 {
                let k = Key(i % 12);
                ctx.push(&[k], &Values::from_flat(1, vec![1.0])).await.unwrap();
                if i % 3 == 0 {
                    ctx.localize(&[Key((i + ctx.node_id() as u64) % 12)]).unwrap();
                }
            }
        })
        .collect();
    cluster.run(async move {
        join_all(tasks).await;
    });
    cluster.stop_sync();
    cluster.sync_now();
    cluster.settle().unwrap();
    assert_replicas_identical_for(&cluster, 0..3);
    let total: Scalar = (0..12).map(|k| cluster.snapshot(Key(k)).unwrap()[0]).sum();
    assert_eq!(total, 600.0);
}

fn assert_replicas_identical_for(cluster: &Cluster, keys: std::ops::Range<u64>) {
    for k in keys {
        let first = cluster.node(0).peek(Key(k)).unwrap().0;
        for n in cluster.nodes() {
            assert_eq!(n.peek(Key(k)).unwrap().0, first);
        }
    }
}
