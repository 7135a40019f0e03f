mod common;

use metadiff::dataset::{Split, UNCONDITIONAL};
use metadiff::denoiser::{Checkpoint, CheckpointMeta, DenoiserConfig, DenoiserModel};
use metadiff::rng::{standard_normals, stream};
use metadiff::schedule::linear_schedule;
use metadiff::trainer::{fit, plan_sample, train_step, Adam, TrainConfig, BEST_CHECKPOINT, REPORT_CSV};
use metadiff::Error;
use rand::Rng;

fn quick_config(epochs: usize, timesteps: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 16,
        timesteps,
        val_cap: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn dropout_masks_ten_percent_of_draws() {
    let mut rng = stream(0, &[]);
    let n = 100_000;
    let masked = (0..n).filter(|_| plan_sample(&mut rng, 1, 200, 0.10).masked).count();
    let frac = masked as f64 / n as f64;
    assert!((0.097..=0.103).contains(&frac), "{frac}");
}

#[test]
fn small_learning_rate_steps_reduce_a_frozen_batch_loss() {
    let sched_len = 20;
    let cfg = TrainConfig {
        learning_rate: 1e-5,
        timesteps: sched_len,
        ..TrainConfig::default()
    };
    let mut improved = 0;
    for trial in 0..100u64 {
        let mut model: DenoiserModel<f64> = common::tiny_model(4, sched_len, trial).cast();
        let mut rng = stream(trial, &[77]);
        let n = 4;
        let x = standard_normals(&mut rng, n * 16);
        let target = standard_normals(&mut rng, n * 16);
        let t: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=sched_len)).collect();
        let mut cond = Vec::new();
        for i in 0..n {
            if i == 0 {
                cond.extend(UNCONDITIONAL.iter().map(|&v| f64::from(v)));
            } else {
                cond.extend((0..55).map(|_| rng.gen_range(0.0..1.0)));
            }
        }
        let (before, grads) = model.loss_and_grad(&x, &t, &cond, &target).unwrap();
        let mut opt = Adam::new(model.num_params(), &cfg);
        opt.update(model.params_mut(), &grads).unwrap();
        let after = model.loss(&x, &t, &cond, &target).unwrap();
        if after < before {
            improved += 1;
        }
    }
    assert!(improved >= 95, "only {improved}/100 trials improved");
}

#[test]
fn parameters_stay_finite_over_a_thousand_steps() {
    let ds = common::small_dataset(100, 8, 1);
    let sched = linear_schedule(50).unwrap();
    let cfg = quick_config(1, 50);
    let mut model = common::tiny_model(4, 50, 1);
    let mut opt = Adam::new(model.num_params(), &cfg);
    let train = ds.signed_split(Split::Train).unwrap();
    let mut rng = stream(1, &[]);
    for step in 0..1000 {
        let start = (step * 8) % (train.len() - 8);
        let loss = train_step(&mut model, &mut opt, &train[start..start + 8], &sched, &mut rng, &cfg).unwrap();
        assert!(loss.is_finite(), "step {step}");
    }
    assert!(model.all_finite());
    assert_eq!(opt.steps(), 1000);
}

#[test]
fn fit_is_reproducible_down_to_the_files() {
    let ds = common::small_dataset(60, 8, 2);
    let sched = linear_schedule(20).unwrap();
    let cfg = quick_config(3, 20);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let (m, r) = fit(common::tiny_model(4, 20, 5), &ds, &sched, &cfg, Some(dir.path()), |_| {}).unwrap();
        let files = [BEST_CHECKPOINT, REPORT_CSV].map(|f| std::fs::read(dir.path().join(f)).unwrap());
        (m, r, files)
    };
    let (m1, r1, f1) = run();
    let (m2, r2, f2) = run();
    assert_eq!(m1.params(), m2.params());
    assert!(r1.same_results(&r2));
    assert_eq!(r1.records.len(), 3);
    assert_eq!(f1, f2);
}

#[test]
fn zero_epochs_keep_the_model_and_report_nothing() {
    let ds = common::small_dataset(30, 8, 3);
    let sched = linear_schedule(20).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let init = common::tiny_model(4, 20, 6);
    let mut seen = 0;
    let (m, r) = fit(init.clone(), &ds, &sched, &quick_config(0, 20), Some(dir.path()), |_| seen += 1).unwrap();
    assert_eq!(m.params(), init.params());
    assert!(r.records.is_empty());
    assert_eq!(r.best_epoch, None);
    assert_eq!(seen, 0);
    let saved = Checkpoint::load(dir.path().join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(saved.model.params(), init.params());
    assert_eq!(std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap(), "epoch,train_loss,val_mae\n");
}

#[test]
fn desk_training_beats_the_untrained_model() {
    let ds = common::small_dataset(500, 16, 4);
    let sched = linear_schedule(50).unwrap();
    // 400 training samples give few updates per epoch, so this run uses a
    // smaller batch and a larger step than the defaults.
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 5e-4,
        timesteps: 50,
        val_cap: 16,
        ..TrainConfig::default()
    };
    let model = DenoiserModel::init(DenoiserConfig::desk(50), 0).unwrap();
    let (_, report) = fit(model, &ds, &sched, &cfg, None, |_| {}).unwrap();
    let untrained = report.baseline_val_mae.unwrap();
    let last = report.records.last().unwrap().val_mae;
    assert!(last < untrained, "epoch 30 val MAE {last} vs untrained {untrained}");
}

#[test]
fn mismatched_shapes_are_refused_before_training() {
    let ds = common::small_dataset(30, 16, 3);
    let sched = linear_schedule(20).unwrap();
    let wrong_side = common::tiny_model(4, 20, 0);
    assert!(matches!(
        fit(wrong_side, &ds, &sched, &quick_config(1, 20), None, |_| {}),
        Err(Error::InvalidConfig { .. })
    ));
    let wrong_t = common::tiny_model(8, 30, 0);
    assert!(matches!(
        fit(wrong_t, &ds, &sched, &quick_config(1, 20), None, |_| {}),
        Err(Error::ScheduleMismatch { .. })
    ));
}

#[test]
fn checkpoints_round_trip_and_detect_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.mdck");
    let ck = Checkpoint::new(
        common::tiny_model(4, 20, 9),
        linear_schedule(20).unwrap(),
        CheckpointMeta {
            grid_side: 8,
            proxy: Some(common::proxy().spec()),
        },
    )
    .unwrap();
    ck.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.model.params(), ck.model.params());
    assert_eq!(back.meta, ck.meta);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    for k in [5, bytes.len() / 2, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[k] ^= 0x01;
        assert!(
            matches!(Checkpoint::from_bytes(&bad), Err(Error::CorruptContainer(_)) | Err(Error::VersionMismatch { .. })),
            "byte {k}"
        );
    }
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
