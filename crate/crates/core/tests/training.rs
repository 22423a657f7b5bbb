use std::fs;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sgm_core::data::generate_set;
use sgm_core::hdr::loss_var;
use sgm_core::train::{
    scheduled_lr, train_to_dir, Adam, Checkpoint, TrainConfig, LOG_HEADER, METRICS_FILE, MODEL_FILE,
};
use sgm_core::{FusionNet, SceneSpec, SequenceBatch, Tape, TonemapConfig, Trainer};

fn small_config() -> TrainConfig {
    TrainConfig {
        features: 8,
        batch_size: 2,
        patch_size: 16,
        epochs: 3,
        eval_interval: 1,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn shuffled_order_keeps_target_and_reference() {
    let seqs = generate_set(&SceneSpec::default().with_frames(7), 2, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &seqs {
        for _ in 0..5 {
            let sh = s.shuffled(&mut rng).unwrap();
            assert_eq!(sh.hdr_gt(), s.hdr_gt());
            assert_eq!(sh.reference(), s.reference());
            assert_eq!(sh.exposure_times()[sh.ref_index()], s.exposure_times()[s.ref_index()]);
        }
    }
}

#[test]
fn same_seed_gives_identical_logs() {
    let data = generate_set(
        &SceneSpec {
            height: 24,
            width: 24,
            ..SceneSpec::default()
        },
        0,
        4,
    )
    .unwrap();
    let cfg = TrainConfig {
        shuffle_exposure_order: true,
        variable_length_set: vec![1, 2, 3],
        ..small_config()
    };
    let run = |cfg: TrainConfig| {
        let mut tr = Trainer::<f32>::new(cfg, data.clone()).unwrap();
        let log = tr.run(|_, _, _| Ok(())).unwrap();
        (log, tr.checkpoint().to_bytes())
    };
    let (a, ca) = run(cfg.clone());
    let (b, cb) = run(cfg.clone());
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let (c, _) = run(TrainConfig { seed: 6, ..cfg });
    assert_ne!(a, c);
}

#[test]
fn logged_learning_rate_follows_schedule() {
    let data = generate_set(
        &SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        },
        0,
        2,
    )
    .unwrap();
    let cfg = TrainConfig {
        features: 4,
        batch_size: 1,
        epochs: 5,
        halve_every: 2,
        learning_rate: 1e-3,
        ..small_config()
    };
    let mut tr = Trainer::<f32>::new(cfg, data).unwrap();
    let log = tr.run(|_, _, _| Ok(())).unwrap();
    assert_eq!(log.len(), 10);
    for row in &log {
        assert_eq!(row.epoch, (row.step as usize).div_ceil(2));
        assert_eq!(row.lr, scheduled_lr(1e-3, 2, row.epoch));
    }
    assert_eq!(log.last().unwrap().lr, 2.5e-4);
}

#[test]
fn fixed_batch_loss_decreases() {
    // the 8-sequence 64x64 fixture at reduced width to keep the suite fast
    let data = generate_set(&SceneSpec::default(), 7, 8).unwrap();
    let batch = SequenceBatch::<f32>::from_sequences(&data).unwrap();
    let target = batch.target.clone().unwrap();
    let mut net = FusionNet::<f32>::new(
        TrainConfig {
            features: 16,
            seed: 7,
            ..TrainConfig::default()
        }
        .net_config(),
    )
    .unwrap();
    let mut adam = Adam::new(net.params(), 0.9, 0.999, 1e-8);
    let mut losses = Vec::with_capacity(51);
    for _ in 0..=50 {
        let tape = Tape::new();
        let params = net.params().bind(&tape);
        let y = net.forward(&tape, &params, &batch).unwrap();
        let t = tape.constant(target.clone());
        let loss = loss_var(&tape, y, t, TonemapConfig::default()).unwrap();
        losses.push(tape.value(loss).item().unwrap() as f64);
        let mut grads = tape.backward(loss).unwrap();
        let grads: Vec<_> = params.vars().iter().map(|&v| grads.take(v).unwrap()).collect();
        adam.update(net.params_mut(), &grads, 2e-4).unwrap();
    }
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        decreasing >= 45,
        "loss fell in only {} of 50 steps: {:?}",
        decreasing,
        losses
    );
    assert!(losses[50] < losses[0]);
}

#[test]
fn train_to_dir_writes_model_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_set(
        &SceneSpec {
            height: 16,
            width: 16,
            ..SceneSpec::default()
        },
        3,
        3,
    )
    .unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..small_config()
    };
    let ckpt = train_to_dir::<f32>(cfg.clone(), data, dir.path()).unwrap();
    assert_eq!(ckpt.step, 6);
    assert_eq!(Checkpoint::load(&dir.path().join(MODEL_FILE)).unwrap(), ckpt);
    assert_eq!(ckpt.config().unwrap(), cfg);
    for step in [2, 4, 6] {
        assert!(dir.path().join(format!("step_{}.sgmf", step)).exists());
    }
    let metrics = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(LOG_HEADER));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.len() == 6 && r[3].is_finite()));
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]
    );
}
