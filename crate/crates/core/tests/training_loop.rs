use pcpmae::geometry::{synthetic_dataset, ShapeKind};
use pcpmae::model::{ModelConfig, PcpMae};
use pcpmae::tensorcore::{Tape, Tensor};
use pcpmae::training::{
    finetune_classifier, loss_pc, loss_recon, make_batch, mask_split, pretrain_forward, total_loss,
    Checkpoint, FinetuneConfig, PcLoss, RunConfig, TrainConfig, Trainer,
};
use pcpmae::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    RunConfig {
        model: ModelConfig::gradcheck(),
        train: TrainConfig {
            epochs: 40,
            batch_size: 8,
            warmup_epochs: 2,
            dataset_size: 24,
            cloud_points: 64,
            ..TrainConfig::default()
        },
    }
}

fn scalar(tape: &Tape<f64>, v: pcpmae::tensorcore::Var) -> f64 {
    tape.value(v).item()
}

#[test]
fn center_loss_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::new(&[1, 1], vec![3.0]).unwrap());
    let b = tape.constant(Tensor::new(&[1, 1], vec![1.0]).unwrap());
    let l = loss_pc(&mut tape, a, b, PcLoss::L2).unwrap();
    assert_eq!(scalar(&tape, l), 4.0);
    let z = loss_pc(&mut tape, a, a, PcLoss::L2).unwrap();
    assert_eq!(scalar(&tape, z), 0.0);

    let p = Tensor::from_fn(&[2, 3, 6], |i| (i as f64 * 0.37).sin());
    let t = Tensor::from_fn(&[2, 3, 6], |i| (i as f64 * 0.11).cos());
    let doubled = Tensor::from_fn(&[2, 3, 6], |i| 2.0 * p.data()[i] - t.data()[i]);
    let (pv, tv, dv) = (tape.constant(p), tape.constant(t), tape.constant(doubled));
    let l1 = loss_pc(&mut tape, pv, tv, PcLoss::L2).unwrap();
    let l2 = loss_pc(&mut tape, dv, tv, PcLoss::L2).unwrap();
    assert!((scalar(&tape, l2) - 4.0 * scalar(&tape, l1)).abs() < 1e-12);
    for mode in [PcLoss::L1, PcLoss::SmoothL1, PcLoss::Cosine] {
        let same = loss_pc(&mut tape, pv, pv, mode).unwrap();
        assert!(scalar(&tape, same).abs() < 1e-12, "{mode:?}");
    }
    let wrong = tape.constant(Tensor::zeros(&[2, 3, 5]));
    assert!(matches!(
        loss_pc(&mut tape, pv, wrong, PcLoss::L2),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn reconstruction_loss_examples() {
    let mut tape = Tape::new();
    let pred = tape.constant(Tensor::zeros(&[1, 4, 3]));
    let gt = Tensor::from_fn(&[1, 4, 3], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
    let l = loss_recon(&mut tape, pred, &gt).unwrap();
    assert_eq!(scalar(&tape, l), 2.0);

    let a = Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.7).sin());
    let b = Tensor::from_fn(&[2, 5, 3], |i| (i as f64 * 0.3).cos());
    // Reverse the point order inside every patch.
    let rev = Tensor::from_fn(&[2, 5, 3], |i| {
        let (p, j, c) = (i / 15, (i / 3) % 5, i % 3);
        a.data()[p * 15 + (4 - j) * 3 + c]
    });
    let av = tape.constant(a);
    let rv = tape.constant(rev);
    let x = loss_recon(&mut tape, av, &b).unwrap();
    let y = loss_recon(&mut tape, rv, &b).unwrap();
    assert!((scalar(&tape, x) - scalar(&tape, y)).abs() < 1e-12);
    let a_copy = tape.value(av).clone();
    let same = loss_recon(&mut tape, av, &a_copy).unwrap();
    assert_eq!(scalar(&tape, same), 0.0);
}

#[test]
fn objective_is_linear_in_eta() {
    let mut tape = Tape::new();
    let pc = tape.constant(Tensor::scalar(5.0));
    let rec = tape.constant(Tensor::scalar(0.0));
    let l = total_loss(&mut tape, pc, rec, 0.1).unwrap();
    assert!((scalar(&tape, l) - 0.5).abs() < 1e-15);
    let rec = tape.constant(Tensor::scalar(1.25));
    let l = total_loss(&mut tape, pc, rec, 0.0).unwrap();
    assert_eq!(scalar(&tape, l), 1.25);
    assert_eq!(TrainConfig::default().eta, 0.1);
}

#[test]
fn mask_split_partitions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1, 7, 16, 64, 128] {
        for m in [0.0, 0.2, 0.6, 0.9, 1.0] {
            let s = mask_split(n, m, &mut rng);
            assert_eq!(s.masked.len(), (m * n as f64 + 1e-9).floor() as usize);
            let mut all: Vec<usize> = s.masked.iter().chain(&s.visible).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
    let a = mask_split(64, 0.6, &mut ChaCha8Rng::seed_from_u64(9));
    let b = mask_split(64, 0.6, &mut ChaCha8Rng::seed_from_u64(9));
    assert_eq!(a, b);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let mut a: Trainer<f32> = Trainer::new(tiny()).unwrap();
    let mut b: Trainer<f32> = Trainer::new(tiny()).unwrap();
    for _ in 0..10 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    for ((_, _, x), (_, _, y)) in a.model.store.iter().zip(b.model.store.iter()) {
        assert_eq!(x, y);
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full: Trainer<f32> = Trainer::new(tiny()).unwrap();
    for _ in 0..100 {
        full.step().unwrap();
    }
    let mut first: Trainer<f32> = Trainer::new(tiny()).unwrap();
    for _ in 0..50 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let mut resumed: Trainer<f32> =
        Trainer::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(resumed.step_count(), 50);
    for _ in 0..50 {
        resumed.step().unwrap();
    }
    assert_eq!(resumed.checkpoint(), full.checkpoint());
}

#[test]
fn checkpoint_bytes_round_trip_and_errors() {
    let mut t: Trainer<f32> = Trainer::new(tiny()).unwrap();
    t.step().unwrap();
    let bytes = t.checkpoint().to_bytes();
    let again = Checkpoint::from_bytes(&bytes).unwrap().to_bytes();
    assert_eq!(bytes, again);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad),
        Err(Error::Format(_))
    ));

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&7u32.to_le_bytes());
    let err = Checkpoint::from_bytes(&newer).unwrap_err();
    assert!(matches!(
        err,
        Error::Version {
            found: 7,
            expected: 1
        }
    ));
    assert!(err.to_string().contains('7') && err.to_string().contains('1'));

    match Checkpoint::from_bytes(&bytes[..bytes.len() - 10]) {
        Err(Error::Truncated { expected, actual }) => {
            assert_eq!(actual, bytes.len() - 10);
            assert!(expected > actual);
        }
        other => panic!("expected truncation error, got {other:?}"),
    }
}

#[test]
fn projector_gets_nothing_without_center_loss() {
    let mut cfg = tiny();
    cfg.train.eta = 0.0;
    let model: PcpMae<f64> = PcpMae::new(cfg.model.clone(), 3).unwrap();
    let data = synthetic_dataset::<f64>(6, 64, 0.0, 2).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let batch = make_batch(&refs, &cfg, &cfg.train.augmentations, 0.6, &mut rng).unwrap();
        let mut tape = Tape::new();
        let out = pretrain_forward(&model, &mut tape, &batch, &cfg.train).unwrap();
        assert_eq!(tape.value(out.loss), tape.value(out.loss_recon));
        let grads = tape.backward(out.loss).unwrap();
        for id in model.projector.params() {
            assert!(grads
                .param(id)
                .is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));
        }
    }
}

#[test]
fn extreme_mask_ratios_train() {
    for m in [0.0, 1.0] {
        let mut cfg = tiny();
        cfg.train.mask_ratio = m;
        let mut t: Trainer<f32> = Trainer::new(cfg).unwrap();
        let r = t.step().unwrap();
        assert!(r.loss.is_finite());
        if m == 0.0 {
            assert_eq!((r.loss, r.masked), (0.0, 0));
        } else {
            assert_eq!(r.visible, 0);
        }
    }
}

#[test]
fn reconstruction_loss_drops_on_toy_set() {
    let cfg = RunConfig {
        train: TrainConfig {
            dataset_size: 32,
            epochs: 200,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let mut t: Trainer<f32> = Trainer::new(cfg).unwrap();
    let first = t.run_epoch().unwrap().loss_recon;
    let mut last = first;
    while !t.is_finished() {
        last = t.run_epoch().unwrap().loss_recon;
    }
    assert!(last < 0.1 * first, "epoch-1 {first}, final {last}");
}

#[test]
fn finetune_edge_cases() {
    let cfg = tiny();
    let ft = FinetuneConfig {
        epochs: 1,
        batch_size: 8,
        cloud_points: 64,
        ..FinetuneConfig::default()
    };
    let one: Vec<_> = (0..8)
        .map(|s| {
            pcpmae::geometry::gen_synthetic_shape::<f32>(ShapeKind::Sphere, 64, 0.0, s).unwrap()
        })
        .map(|c| pcpmae::geometry::PointCloud {
            label: Some(0),
            ..c
        })
        .collect();
    let model: PcpMae<f32> = PcpMae::new(cfg.model.clone(), 0).unwrap();
    let r = finetune_classifier(model.clone(), &cfg, &one, &one, 1, &ft, 0).unwrap();
    assert_eq!(r.accuracy, 1.0);

    let set = synthetic_dataset::<f32>(32, 64, 0.0, 3).unwrap();
    let r = finetune_classifier(
        model.clone(),
        &cfg,
        &set,
        &set,
        8,
        &FinetuneConfig {
            epochs: 0,
            ..ft.clone()
        },
        0,
    )
    .unwrap();
    assert!(r.initial_accuracy <= 0.3, "{}", r.initial_accuracy);
    assert!(matches!(
        finetune_classifier(model, &cfg, &set, &set, 4, &ft, 0),
        Err(Error::Config(_))
    ));
}
