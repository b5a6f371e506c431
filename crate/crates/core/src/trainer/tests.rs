use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::max_relative_error;
use crate::backbone::{param_role, ConvSpec, InputShape, ParamRole};
use crate::data::{generate_synthetic, SynthSpec};

fn data(ids: usize) -> LabeledDataset<f64> {
    generate_synthetic(&SynthSpec::vector(ids, 4, 4)).unwrap()
}

fn backbone() -> BackboneConfig {
    BackboneConfig {
        input_shape: InputShape::Vector { dim: 4 },
        conv_specs: vec![ConvSpec::dense(6); 3],
        verification_tap_layer: 2,
        fcv_dim: 3,
        fc_dims: vec![4],
    }
}

fn cfg(iterations: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 0.01,
        batch_size: 4,
        iterations,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let ds = data(4);
    let c = TrainConfig {
        learning_rate: 0.0,
        ..cfg(5)
    };
    let out = train(&ds, &backbone(), &c).unwrap();
    let init = ParameterSet::<f64>::init(&backbone(), c.seed).unwrap();
    assert_eq!(out.params.flat(), init.flat());
    assert_eq!(out.log.len(), 5);
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let ds = data(5);
    let bytes = || {
        let mut t = Trainer::new(&ds, backbone(), cfg(15)).unwrap();
        t.run(&RunOptions::default()).unwrap();
        t.checkpoint().unwrap().to_bytes().unwrap()
    };
    assert_eq!(bytes(), bytes());
    let mut other = Trainer::new(&ds, backbone(), TrainConfig { seed: 6, ..cfg(15) }).unwrap();
    other.run(&RunOptions::default()).unwrap();
    assert_ne!(bytes(), other.checkpoint().unwrap().to_bytes().unwrap());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let ds = data(5);
    let dir = tempfile::tempdir().unwrap();
    let mut full = Trainer::new(&ds, backbone(), cfg(20)).unwrap();
    full.run(&RunOptions::default()).unwrap();

    let c = TrainConfig {
        checkpoint_every: 10,
        ..cfg(10)
    };
    let opts = RunOptions {
        checkpoint_dir: Some(dir.path().into()),
        log_path: Some(dir.path().join("log.jsonl")),
    };
    Trainer::new(&ds, backbone(), c)
        .unwrap()
        .run(&opts)
        .unwrap();
    let saved = dir.path().join(checkpoint_name(10));
    assert!(saved.exists());
    let mut resumed = Trainer::resume_from_path(&ds, &saved, Some(&backbone()), cfg(20)).unwrap();
    assert_eq!(resumed.iteration(), 10);
    resumed.run(&opts).unwrap();
    assert_eq!(
        resumed.checkpoint().unwrap().to_bytes().unwrap(),
        full.checkpoint().unwrap().to_bytes().unwrap()
    );
    let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
    let recs: Vec<TrainLogRecord> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(recs.len(), 20);
    assert_eq!(recs.last().unwrap().iteration, 20);
}

#[test]
fn resume_rejects_mismatches() {
    let ds = data(5);
    let mut t = Trainer::new(&ds, backbone(), cfg(3)).unwrap();
    t.run(&RunOptions::default()).unwrap();
    let ck = t.checkpoint().unwrap();

    let mut other = backbone();
    other.fcv_dim = 4;
    let err = Trainer::resume(&ds, ck.clone(), Some(&other), cfg(6))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Incompatible(_)));

    let changed = TrainConfig {
        learning_rate: 0.5,
        ..cfg(6)
    };
    assert!(matches!(
        Trainer::resume(&ds, ck.clone(), None, changed)
            .err()
            .unwrap(),
        Error::Incompatible(_)
    ));

    let mut bytes = ck.to_bytes().unwrap();
    bytes[0] = b'X';
    assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());

    let bare = Checkpoint {
        train_state: None,
        ..ck
    };
    assert!(Trainer::resume(&ds, bare, None, cfg(6)).is_err());
}

#[test]
fn verification_only_leaves_identification_weights_untouched() {
    let ds = data(5);
    let c = TrainConfig {
        loss_mode: LossMode::VerificationOnly,
        learning_rate: 0.05,
        ..cfg(20)
    };
    let out = train(&ds, &backbone(), &c).unwrap();
    let init = ParameterSet::<f64>::init(&backbone(), c.seed).unwrap();
    let mut shared_moved = false;
    for ((name, a), (_, b)) in out.params.iter().zip(init.iter()) {
        match param_role(&backbone(), name) {
            ParamRole::Identification => assert_eq!(a.data(), b.data(), "{name} changed"),
            ParamRole::Shared => shared_moved |= a.data() != b.data(),
            ParamRole::Verification => {}
        }
    }
    assert!(shared_moved);
    assert!(out
        .log
        .iter()
        .all(|r| r.identification.is_none() && r.verification.is_some()));
}

#[test]
fn identification_only_leaves_projection_untouched() {
    let ds = data(5);
    let c = TrainConfig {
        loss_mode: LossMode::IdentificationOnly,
        ..cfg(10)
    };
    let out = train(&ds, &backbone(), &c).unwrap();
    let init = ParameterSet::<f64>::init(&backbone(), c.seed).unwrap();
    assert_eq!(out.params.get("fcv.weight"), init.get("fcv.weight"));
    assert_ne!(out.params.get("head.weight"), init.get("head.weight"));
}

#[test]
fn applied_update_is_the_finite_difference_gradient() {
    let ds = data(4);
    for (mode, unit) in [
        (LossMode::Joint, Unit::Quartet),
        (LossMode::Joint, Unit::Triplet),
        (LossMode::VerificationOnly, Unit::Quartet),
    ] {
        let c = TrainConfig {
            loss_mode: mode,
            unit,
            learning_rate: 1.0,
            loss: LossConfig {
                margin: 0.0,
                ..LossConfig::default()
            },
            ..cfg(1)
        };
        let mut t = Trainer::new(&ds, backbone(), c.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..t.params.len() {
            for v in t.params.tensor_at_mut(i).data_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let before = t.params.clone();
        let mut probe = t.sampler.clone();
        let units: Vec<Vec<usize>> = (0..c.batch_size).map(|_| probe.next_unit()).collect();
        let net = t.network.clone();
        let value = |params: &ParameterSet<f64>| {
            let mut g = Graph::new();
            let p = net.bind(&mut g, params, false).unwrap();
            let l = batch_loss(&mut g, &net, &p, &ds, &units, &c).unwrap();
            g.value(l.total).item()
        };
        t.step().unwrap();
        let applied: Vec<f64> = before
            .flat()
            .iter()
            .zip(t.params.flat())
            .map(|(a, b)| a - b)
            .collect();
        let h = 1e-6;
        let mut numeric = Vec::new();
        for i in 0..before.len() {
            for k in 0..before.tensor_at(i).numel() {
                let mut plus = before.clone();
                plus.tensor_at_mut(i).data_mut()[k] += h;
                let mut minus = before.clone();
                minus.tensor_at_mut(i).data_mut()[k] -= h;
                numeric.push((value(&plus) - value(&minus)) / (2.0 * h));
            }
        }
        let err = max_relative_error(&applied, &numeric);
        assert!(err < 1e-4, "{mode:?} {unit:?}: {err}");
    }
}

#[test]
fn training_reduces_loss_on_separable_data() {
    let ds: LabeledDataset<f64> = generate_synthetic(&SynthSpec::vector(8, 4, 8)).unwrap();
    let bb = BackboneConfig::vector_default(8);
    let c = TrainConfig {
        iterations: 200,
        ..TrainConfig::desk()
    };
    let log = train(&ds, &bb, &c).unwrap().log;
    let mean = |r: &[TrainLogRecord]| r.iter().map(|x| x.total).sum::<f64>() / r.len() as f64;
    assert!(mean(&log[180..]) < mean(&log[..20]));
    assert!(log.iter().all(|r| r.total.is_finite()));
    let first = &log[0];
    let m = c.loss.margin;
    assert!(
        (first.verification_literal.unwrap() - first.verification_standard.unwrap() - m).abs()
            < 1e-12
    );
}

#[test]
fn divergence_names_the_iteration() {
    let ds = data(4);
    let c = TrainConfig {
        learning_rate: 1e150,
        ..cfg(50)
    };
    match train(&ds, &backbone(), &c) {
        Err(Error::Diverged { iteration, .. }) => assert!(iteration >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.len())),
    }
}

#[test]
fn config_validation_and_shape_checks() {
    let ds = data(4);
    for bad in [
        TrainConfig {
            batch_size: 0,
            ..cfg(1)
        },
        TrainConfig {
            iterations: 0,
            ..cfg(1)
        },
        TrainConfig {
            learning_rate: -1.0,
            ..cfg(1)
        },
    ] {
        assert!(matches!(
            Trainer::new(&ds, backbone(), bad).err().unwrap(),
            Error::Config(_)
        ));
    }
    let wide = BackboneConfig::vector_default(5);
    assert!(Trainer::new(&ds, wide, cfg(1)).is_err());
    assert!(Trainer::new(&data(4).subset(&[0, 1, 4, 5]), backbone(), cfg(1)).is_err());
    let parsed: TrainConfig =
        serde_json::from_str(r#"{"iterations": 3, "unit": "triplet"}"#).unwrap();
    assert_eq!(parsed.unit, Unit::Triplet);
    assert_eq!(parsed.learning_rate, 1e-4);
    assert_eq!(parsed.batch_size, 128);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"iterationz": 3}"#).is_err());
}

#[test]
fn image_mode_trains() {
    let spec = SynthSpec {
        shape: crate::data::SynthShape::Image {
            width: 8,
            height: 8,
        },
        intra_class_stddev: 0.1,
        inter_class_separation: 1.0,
        ..SynthSpec::vector(4, 3, 1)
    };
    let ds: LabeledDataset<f64> = generate_synthetic(&spec).unwrap();
    let bb = crate::experiment::gradcheck_image_backbone();
    let out = train(
        &ds,
        &bb,
        &TrainConfig {
            batch_size: 2,
            ..cfg(4)
        },
    )
    .unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out
        .log
        .iter()
        .all(|r| r.total.is_finite() && r.identification.is_some()));
    assert_ne!(out.params, ParameterSet::init(&bb, 5).unwrap());
}
