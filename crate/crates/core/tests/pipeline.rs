mod common;

use common::split_alternating;
use fedcgs::gnb_head::{read_head, write_head};
use fedcgs::partitioner::Scheme;
use fedcgs::server_agg::{read_global, write_global};
use fedcgs::{
    aggregate, build_head, compute_client_stats, generate_synthetic, merge_stats, partition,
    read_feature_file, simulate, write_feature_file, LabeledFeatureSet, PartitionSpec, SecureMode,
    SimulationConfig, SyntheticSpec,
};

fn data() -> (LabeledFeatureSet, LabeledFeatureSet) {
    let all = generate_synthetic(&SyntheticSpec {
        num_classes: 4,
        dim: 12,
        samples_per_class: 300,
        class_mean_scale: 2.5,
        shared_covariance_scale: 1.0,
        seed: 8,
    })
    .unwrap();
    split_alternating(&all, 4)
}

#[test]
fn files_round_trip_into_identical_runs() {
    let (train, test) = data();
    let dir = tempfile::tempdir().unwrap();
    let (tp, sp) = (dir.path().join("train.fcgs"), dir.path().join("test.fcgs"));
    write_feature_file(&train, &tp).unwrap();
    write_feature_file(&test, &sp).unwrap();
    let (train2, test2) = (
        read_feature_file(&tp).unwrap(),
        read_feature_file(&sp).unwrap(),
    );
    assert_eq!(train, train2);
    let cfg = SimulationConfig::default();
    let a = simulate(&train, &test, &cfg).unwrap();
    let b = simulate(&train2, &test2, &cfg).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.head, b.head);
}

#[test]
fn every_scheme_gives_the_same_head_predictions() {
    let (train, test) = data();
    let pooled = build_head(&aggregate(&compute_client_stats(&train)).unwrap(), 1e-6).unwrap();
    let expected = pooled.predict_all(&test).unwrap();
    let assignment = (0..train.len()).map(|i| (i * 7) % 3).collect();
    let schemes = [
        Scheme::Uniform,
        Scheme::Dirichlet { alpha: 0.01 },
        Scheme::Dirichlet { alpha: 100.0 },
        Scheme::ByAssignment(assignment),
    ];
    for scheme in schemes {
        let spec = PartitionSpec {
            num_clients: 3,
            scheme: scheme.clone(),
            seed: 4,
        };
        let clients = partition(&train, &spec).unwrap();
        let mut stats = compute_client_stats(&clients[0]);
        for c in &clients[1..] {
            stats = merge_stats(&stats, &compute_client_stats(c)).unwrap();
        }
        let head = build_head(&aggregate(&stats).unwrap(), 1e-6).unwrap();
        assert_eq!(head.predict_all(&test).unwrap(), expected, "{scheme:?}");
    }
}

#[test]
fn many_clients_with_empty_members_under_full_masking() {
    let (train, test) = data();
    let cfg = SimulationConfig {
        clients: 200,
        alpha: Some(0.05),
        secure_agg: SecureMode::Full,
        ..Default::default()
    };
    let clients = partition(&train, &PartitionSpec::dirichlet(200, 0.05, cfg.seed)).unwrap();
    assert!(clients.iter().any(LabeledFeatureSet::is_empty));
    let masked = simulate(&train, &test, &cfg).unwrap();
    let plain = simulate(
        &train,
        &test,
        &SimulationConfig {
            secure_agg: SecureMode::Off,
            ..cfg
        },
    )
    .unwrap();
    assert_eq!(masked.predictions, plain.predictions);
    assert!(masked.report.delta_sigma < 1e-4);
}

#[test]
fn downloaded_statistics_and_head_reproduce_predictions() {
    let (train, test) = data();
    let out = simulate(&train, &test, &SimulationConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let gp = dir.path().join("global.json");
    let hp = dir.path().join("head.json");
    write_global(&out.global, &gp).unwrap();
    write_head(&out.head, &hp).unwrap();
    let global = read_global(&gp).unwrap();
    assert_eq!(global, out.global);
    let rebuilt = build_head(&global, 1e-6).unwrap();
    assert_eq!(rebuilt.predict_all(&test).unwrap(), out.predictions);
    assert_eq!(read_head(&hp).unwrap(), out.head);
}

/// Real-feature run. Point `FEDCGS_TRAIN` / `FEDCGS_TEST` at exported
/// CIFAR-10 ResNet18 feature files; the expected accuracy is 63.95 ± 0.5 %
/// for every alpha.
#[test]
#[ignore = "needs exported CIFAR-10 feature files"]
fn cifar10_resnet18_features() {
    let (Ok(train), Ok(test)) = (std::env::var("FEDCGS_TRAIN"), std::env::var("FEDCGS_TEST"))
    else {
        panic!("set FEDCGS_TRAIN and FEDCGS_TEST");
    };
    let train = read_feature_file(train).unwrap();
    let test = read_feature_file(test).unwrap();
    for alpha in [0.05, 0.1, 0.5] {
        let cfg = SimulationConfig {
            clients: 10,
            alpha: Some(alpha),
            ..Default::default()
        };
        let acc = simulate(&train, &test, &cfg).unwrap().report.accuracy * 100.0;
        println!("alpha {alpha}: {acc:.2}%");
        assert!((acc - 63.95).abs() <= 0.5, "alpha {alpha}: {acc:.2}%");
    }
}
