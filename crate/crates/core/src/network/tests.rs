use super::*;
use crate::autograd::{AdamConfig, DICE_SMOOTH};
use crate::data::generate_phantoms;
use rand::{Rng, SeedableRng};

fn small(variant: Variant, classes: usize) -> NetworkConfig {
    NetworkConfig {
        patch_size: vec![32, 32],
        num_classes: classes,
        ..NetworkConfig::desk_2d().with_variant(variant)
    }
}

fn names(net: &Network) -> Vec<String> {
    net.params().names().map(str::to_string).collect()
}

#[test]
fn baseline_has_no_global_operators() {
    let net = Network::build(&small(Variant::Baseline, 2), 0).unwrap();
    assert!(names(&net)
        .iter()
        .all(|n| !n.starts_with("hco.") && !n.starts_with("ssm.")));
}

#[test]
fn umh_layer_counts() {
    let net = Network::build(&NetworkConfig::desk_2d(), 0).unwrap();
    assert_eq!(net.config().stages, 4);
    assert_eq!(net.hco_layers().len(), 2);
    assert_eq!(net.ssm_blocks().len(), 3);
    let enc = Network::build(&NetworkConfig::desk_2d().with_variant(Variant::HcoEnc), 0).unwrap();
    assert_eq!(enc.hco_layers().len(), 3);
    assert!(enc.ssm_blocks().is_empty());
}

#[test]
fn every_variant_outputs_normalised_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let image = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
    for v in Variant::ALL {
        let net = Network::build(&small(v, 2), 1).unwrap();
        let out = net.predict(&image).unwrap();
        assert_eq!(out.probabilities().shape(), &[2, 32, 32]);
        let p = out.probabilities().data();
        for i in 0..1024 {
            assert!((p[i] + p[1024 + i] - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn volumetric_preset_preserves_shape() {
    let cfg = NetworkConfig::desk_3d();
    let net = Network::build(&cfg, 2).unwrap();
    let out = net.predict(&Tensor::full(&[1, 16, 32, 32], 0.3)).unwrap();
    assert_eq!(out.probabilities().shape(), &[3, 16, 32, 32]);
}

#[test]
fn anisotropic_pooling_preserves_shape() {
    let cfg = NetworkConfig {
        patch_size: vec![8, 32, 16],
        stages: 4,
        pooling: vec![1, 3, 2],
        ..NetworkConfig::desk_3d()
    };
    let net = Network::build(&cfg, 2).unwrap();
    let out = net.predict(&Tensor::full(&[1, 8, 32, 16], 0.5)).unwrap();
    assert_eq!(out.probabilities().shape(), &[3, 8, 32, 16]);
}

#[test]
fn parameter_counts_follow_variant_structure() {
    let cfg = NetworkConfig::desk_2d();
    let count = |v| Network::build(&cfg.clone().with_variant(v), 0).unwrap().param_count();
    assert!(count(Variant::Baseline) < count(Variant::MambaEnc));
    let e = cfg.embed_dim;
    let hco: usize = [cfg.stages - 1, cfg.stages - 2]
        .iter()
        .map(|&l| cfg.stage_shape(l).iter().product::<usize>() * e + e + 1)
        .sum();
    assert_eq!(count(Variant::HcoBot), count(Variant::Baseline) + hco);
    assert_eq!(count(Variant::Umh), count(Variant::MambaEnc) + hco);
}

#[test]
fn wrong_input_shape_is_a_contract_error() {
    let net = Network::build(&small(Variant::Baseline, 2), 0).unwrap();
    assert!(matches!(
        net.predict(&Tensor::zeros(&[1, 32, 16])),
        Err(Error::Contract(_))
    ));
}

#[test]
fn serial_bottleneck_builds_and_runs() {
    let mut cfg = small(Variant::Umh, 3);
    cfg.bottleneck = BottleneckPlacement::Serial;
    let net = Network::build(&cfg, 0).unwrap();
    assert_eq!(net.hco_layers().len(), 2);
    net.predict(&Tensor::full(&[1, 32, 32], 0.1)).unwrap();
}

#[test]
fn perfect_prediction_loss_is_tiny() {
    let labels = LabelField::new(vec![4, 4], (0..16).map(|i| (i % 3) as u32).collect()).unwrap();
    let pred = SegmentationOutput::one_hot(&labels, 3).unwrap();
    assert!(loss(&pred, &labels).unwrap() < 1e-6 + DICE_SMOOTH);
}

#[test]
fn uniform_two_class_cross_entropy_is_ln2() {
    let labels = LabelField::new(vec![3, 5], (0..15).map(|i| (i % 2) as u32).collect()).unwrap();
    let pred = SegmentationOutput::new(Tensor::full(&[2, 3, 5], 0.5)).unwrap();
    let terms = loss_terms(&pred, &labels).unwrap();
    assert!((terms.cross_entropy - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn loss_matches_straight_line_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p1: Vec<f64> = (0..64).map(|_| rng.random_range(0.01..0.99)).collect();
    let labels: Vec<u32> = (0..64).map(|_| rng.random_range(0..2)).collect();
    let mut probs = p1.iter().map(|p| 1.0 - p).collect::<Vec<_>>();
    probs.extend(&p1);
    let pred = SegmentationOutput::new(Tensor::new(vec![2, 8, 8], probs).unwrap()).unwrap();
    let target = LabelField::new(vec![8, 8], labels.clone()).unwrap();

    let mut ce = 0.0;
    let mut dice = 0.0;
    for class in 0..2u32 {
        let (mut inter, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for i in 0..64 {
            let p = if class == 1 { p1[i] } else { 1.0 - p1[i] };
            let y = (labels[i] == class) as u8 as f64;
            inter += p * y;
            ps += p;
            ts += y;
            if y == 1.0 {
                ce -= p.ln();
            }
        }
        dice += 1.0 - (2.0 * inter + 1e-5) / (ps + ts + 1e-5);
    }
    let want = dice / 2.0 + ce / 64.0;
    assert!((loss(&pred, &target).unwrap() - want).abs() < 1e-10);
}

#[test]
fn out_of_range_label_is_a_data_error() {
    let pred = SegmentationOutput::new(Tensor::full(&[2, 2, 2], 0.5)).unwrap();
    let target = LabelField::new(vec![2, 2], vec![0, 1, 2, 0]).unwrap();
    assert!(matches!(loss(&pred, &target), Err(Error::Data(_))));
}

fn quick_cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 2,
        optimizer: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        seed: 3,
        threads: 2,
    }
}

#[test]
fn zero_learning_rate_gives_a_flat_curve() {
    let cases = generate_phantoms(4, &[32, 32], 3, 1).unwrap();
    let mut net = Network::build(&small(Variant::Umh, 3), 0).unwrap();
    let report = train(&mut net, &cases, &quick_cfg(0.0, 3)).unwrap();
    let l = report.losses();
    assert!(l.iter().all(|&x| x == l[0]));
}

#[test]
fn same_seed_gives_identical_curves() {
    let cases = generate_phantoms(4, &[32, 32], 3, 1).unwrap();
    let run = |threads| {
        let mut net = Network::build(&small(Variant::Umh, 3), 0).unwrap();
        let mut cfg = quick_cfg(3e-3, 2);
        cfg.threads = threads;
        let r = train(&mut net, &cases, &cfg).unwrap();
        (r, net.checkpoint().encode())
    };
    let (a, ca) = run(1);
    let (b, cb) = run(3);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
}

#[test]
fn nan_loss_reports_divergence_step() {
    let cases = generate_phantoms(2, &[32, 32], 3, 1).unwrap();
    let mut net = Network::build(&small(Variant::Baseline, 3), 0).unwrap();
    let id = net.params().by_name("head.b").unwrap();
    net.params_mut().value_mut(id).fill(f64::NAN);
    match train(&mut net, &cases, &quick_cfg(1e-3, 1)) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn every_parameter_receives_gradient_in_every_variant() {
    let case = &generate_phantoms(1, &[32, 32], 3, 2).unwrap()[0];
    for v in Variant::ALL {
        let net = Network::build(&small(v, 3), 4).unwrap();
        let (_, grads) = net.loss_and_grads(&case.image, &case.labels).unwrap();
        assert_eq!(grads.len(), net.params().len(), "{v}");
        for (id, g) in grads {
            assert!(
                g.norm_l2() > 0.0,
                "{v}: {} has zero gradient",
                net.params().get(id).name()
            );
        }
    }
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let net = Network::build(&small(Variant::Umh, 3), 9).unwrap();
    let restored = Network::from_checkpoint(&net.checkpoint()).unwrap();
    let x = Tensor::full(&[1, 32, 32], 0.4);
    assert_eq!(net.predict(&x).unwrap(), restored.predict(&x).unwrap());
}

#[test]
fn training_report_csv_round_trip() {
    let report = TrainingReport {
        records: vec![
            EpochRecord {
                epoch: 1,
                loss: 1.25,
                train_dsc: 0.5,
            },
            EpochRecord {
                epoch: 2,
                loss: 0.1 + 0.2,
                train_dsc: 0.75,
            },
        ],
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    report.write_csv(&path).unwrap();
    assert_eq!(TrainingReport::read_csv(&path).unwrap(), report);
    assert!(std::fs::read_to_string(&path)
        .unwrap()
        .starts_with("epoch,loss,train_dsc"));
}

#[test]
fn exploding_step_size_reports_divergence() {
    let cases = generate_phantoms(2, &[32, 32], 3, 1).unwrap();
    let mut net = Network::build(&small(Variant::Baseline, 3), 0).unwrap();
    assert!(matches!(
        train(&mut net, &cases, &quick_cfg(1e300, 1)),
        Err(Error::Divergence { .. })
    ));
}
