use fair_core::data::{synth_lowrank, FeedbackKind, InteractionDataset, SynthParams};
use fair_core::eval::MetricsLog;
use fair_core::fedsim::{
    aggregation_weights, CapacityScheme, Consistency, Mode, RunConfig, Simulator,
};
use fair_core::FairError;

fn dataset(users: usize, items: usize, kind: FeedbackKind, seed: u64) -> InteractionDataset {
    synth_lowrank(&SynthParams {
        num_users: users,
        num_items: items,
        latent_dim: 4,
        density: 0.35,
        noise_sd: 0.1,
        seed,
        kind,
    })
    .unwrap()
    .split_train_test(2, seed)
    .unwrap()
}

fn config(mode: Mode, k: usize) -> RunConfig {
    RunConfig {
        mode,
        rounds: 6,
        devices_per_round: k,
        local_epochs: 2,
        learning_rate: 0.05,
        dim: 4,
        seed: 11,
        eval_every: 2,
        ..RunConfig::default()
    }
}

fn values(log: &MetricsLog) -> Vec<(usize, String, f64)> {
    log.records
        .iter()
        .map(|r| (r.round, r.metric.clone(), r.value))
        .collect()
}

#[test]
fn same_seed_same_everything() {
    let ds = dataset(12, 40, FeedbackKind::Implicit, 1);
    let scheme = CapacityScheme::parse("1x-2x-8x", 12).unwrap();
    let cfg = config(Mode::FairHet, 5);
    let mut a = Simulator::new(&cfg, &ds, &scheme).unwrap();
    let mut b = Simulator::new(&cfg, &ds, &scheme).unwrap();
    assert_eq!(values(&a.run(6).unwrap()), values(&b.run(6).unwrap()));
    assert_eq!(a.server().theta, b.server().theta);
    assert_eq!(a.user_vecs(), b.user_vecs());
}

#[test]
fn resuming_matches_a_straight_run() {
    let ds = dataset(10, 30, FeedbackKind::Explicit, 2);
    let scheme = CapacityScheme::parse("1x-4x", 10).unwrap();
    let cfg = config(Mode::FairHet, 4);
    let mut split = Simulator::new(&cfg, &ds, &scheme).unwrap();
    split.run(1).unwrap();
    split.run(1).unwrap();
    let mut straight = Simulator::new(&cfg, &ds, &scheme).unwrap();
    straight.run(2).unwrap();
    assert_eq!(split.server().theta, straight.server().theta);
    assert_eq!(split.server().round, 2);
}

#[test]
fn homogeneous_baseline_equals_the_single_group_scheme() {
    let ds = dataset(8, 32, FeedbackKind::Implicit, 3);
    let hom = {
        let scheme = CapacityScheme::parse("1x-4x", 8).unwrap();
        let mut sim = Simulator::new(&config(Mode::FairHom, 3), &ds, &scheme).unwrap();
        values(&sim.run(6).unwrap())
    };
    let het = {
        let scheme = CapacityScheme::parse("4x", 8).unwrap();
        let mut sim = Simulator::new(&config(Mode::FairHet, 3), &ds, &scheme).unwrap();
        values(&sim.run(6).unwrap())
    };
    assert_eq!(hom, het);
}

#[test]
fn full_training_only_samples_full_capacity_devices() {
    let ds = dataset(4, 20, FeedbackKind::Implicit, 4);
    let scheme = CapacityScheme::parse("1x-4x", 4).unwrap();
    let sim = Simulator::new(&config(Mode::FullTrn, 4), &ds, &scheme).unwrap();
    assert_eq!(sim.eligible_devices(), &[0, 1]);
    for round in 1..=50 {
        let s = sim.sample_round(round);
        assert!(!s.is_empty() && s.iter().all(|&d| d < 2), "{s:?}");
    }
    for d in 0..4 {
        assert!(sim.subspace(d).is_identity());
    }
    let none = CapacityScheme::parse("2x-4x", 4).unwrap();
    assert!(matches!(
        Simulator::new(&config(Mode::FullTrn, 2), &ds, &none),
        Err(FairError::InvalidArgument(_))
    ));
}

#[test]
fn zero_local_work_projects_theta() {
    let ds = dataset(6, 32, FeedbackKind::Explicit, 5);
    let scheme = CapacityScheme::parse("8x", 6).unwrap();
    let mut sim = Simulator::new(&config(Mode::FairHet, 1), &ds, &scheme).unwrap();
    sim.set_local_budget(0);
    let before = sim.server().theta.clone();
    let s = sim.subspace(3).clone();
    sim.run_round(&[3]).unwrap();
    let projected = s.recover(&s.reduce(&before).unwrap()).unwrap();
    assert_eq!(sim.server().theta, projected);
    assert_ne!(before, projected);
}

#[test]
fn homogeneous_server_stays_in_the_shared_subspace() {
    let ds = dataset(10, 24, FeedbackKind::Implicit, 6);
    let scheme = CapacityScheme::parse("4x", 10).unwrap();
    let mut sim = Simulator::new(&config(Mode::FairHet, 4), &ds, &scheme).unwrap();
    let s = sim.subspace(0).clone();
    for round in 1..=8 {
        let sampled = sim.sample_round(round);
        sim.run_round(&sampled).unwrap();
        let theta = &sim.server().theta;
        let psi = s.reduce(theta).unwrap();
        let again = s.reduce(&s.recover(&psi).unwrap()).unwrap();
        for (a, b) in psi.iter().zip(&again) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in s.recover(&psi).unwrap().iter().zip(theta) {
            assert!((a - b).abs() <= 1e-15, "round {round}");
        }
    }
}

#[test]
fn aggregation_weights_sum_to_one() {
    let ds = dataset(20, 30, FeedbackKind::Implicit, 7);
    let counts = ds.partition().sample_counts();
    let scheme = CapacityScheme::parse("1x-2x", 20).unwrap();
    let sim = Simulator::new(&config(Mode::FairHet, 7), &ds, &scheme).unwrap();
    for round in 1..=30 {
        let sampled = sim.sample_round(round);
        assert_eq!(sampled.len(), 7);
        let w = aggregation_weights(&sampled.iter().map(|&d| counts[d]).collect::<Vec<_>>());
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }
}

#[test]
fn train_records_land_on_their_own_device() {
    let ds = dataset(15, 30, FeedbackKind::Explicit, 8);
    let part = ds.partition();
    assert_eq!(part.devices.len(), 15);
    assert_eq!(
        part.sample_counts().iter().sum::<usize>(),
        ds.train().count()
    );
    for (i, dev) in part.devices.iter().enumerate() {
        assert_eq!(dev.user, i);
        for &(item, rating) in &dev.train {
            assert!(ds
                .train()
                .any(|r| r.user == i && r.item == item && r.rating == rating));
        }
    }
}

#[test]
fn inconsistent_devices_get_unrelated_subspaces() {
    let ds = dataset(8, 64, FeedbackKind::Implicit, 9);
    let scheme = CapacityScheme::parse("16x", 8).unwrap();
    let mut cfg = config(Mode::FairHet, 4);
    cfg.consistency = Consistency::Inconsistent;
    let sim = Simulator::new(&cfg, &ds, &scheme).unwrap();
    let buckets = |d: usize| {
        (0..64)
            .map(|a| sim.subspace(d).row_bucket(a))
            .collect::<Vec<_>>()
    };
    assert_ne!(buckets(0), buckets(1));
    cfg.consistency = Consistency::Consistent;
    let sim = Simulator::new(&cfg, &ds, &scheme).unwrap();
    let buckets = |d: usize| {
        (0..64)
            .map(|a| sim.subspace(d).row_bucket(a))
            .collect::<Vec<_>>()
    };
    assert_eq!(buckets(0), buckets(5));
}

#[test]
fn bad_configs_are_rejected() {
    let cfg = RunConfig {
        rounds: 0,
        ..RunConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = RunConfig {
        learning_rate: f64::NAN,
        ..RunConfig::default()
    };
    assert!(cfg.validate().is_err());
    let ds = dataset(4, 20, FeedbackKind::Implicit, 10);
    let wrong = CapacityScheme::parse("1x", 5).unwrap();
    assert!(Simulator::new(&RunConfig::default(), &ds, &wrong).is_err());
}

#[test]
fn divergence_names_the_device() {
    let ds = dataset(4, 20, FeedbackKind::Explicit, 12);
    let scheme = CapacityScheme::parse("1x", 4).unwrap();
    let mut cfg = config(Mode::FedAvg, 4);
    cfg.learning_rate = 1e6;
    let mut sim = Simulator::new(&cfg, &ds, &scheme).unwrap();
    let err = sim.run(50).unwrap_err();
    assert!(matches!(err, FairError::Diverged { .. }), "{err}");
}
