use grace_core::causal::temperature_schedule;
use grace_core::objective::{schedule, ScheduleKind};
use grace_core::scmsynth::{generate_benchmark, Benchmark, BenchmarkSpec};
use grace_core::trainer::{
    load_checkpoint, save_checkpoint, train_until, Checkpoint, TrainConfig, TrainState,
};

fn bench(p: usize, d: usize, n: usize, seed: u64) -> Benchmark {
    generate_benchmark(&BenchmarkSpec {
        p,
        d,
        n_obs: n,
        n_per_intervention: n,
        seed,
        ..BenchmarkSpec::default()
    })
    .unwrap()
}

fn small(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        hidden: 16,
        embed: 4,
        batch_size: 16,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let b = bench(3, 6, 32, 0);
    let cfg = small(2, 1);
    let mut s = TrainState::new(&cfg, &b.data, &b.context).unwrap();
    train_until(&mut s, &b.data, &cfg, 2, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    let ck = s.to_checkpoint(&cfg);
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, Some(&cfg.hash())).unwrap();
    assert_eq!(back, ck);
    let again = dir.path().join("again.bin");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let restored = TrainState::from_checkpoint(back, &cfg, &b.data, &b.context).unwrap();
    assert_eq!(restored.model.params, s.model.params);
    assert_eq!(restored.adam, s.adam);

    let other = TrainConfig { lr: 0.5, ..cfg.clone() };
    assert!(load_checkpoint(&path, Some(&other.hash())).is_err());
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let b = bench(2, 4, 20, 0);
    let cfg = small(1, 0);
    let s = TrainState::new(&cfg, &b.data, &b.context).unwrap();
    let bytes = s.to_checkpoint(&cfg).to_bytes();
    let dir = tempfile::tempdir().unwrap();
    for cut in [0, 7, 12, bytes.len() / 2, bytes.len() - 1] {
        let path = dir.path().join(format!("cut{cut}.bin"));
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let e = load_checkpoint(&path, None).unwrap_err();
        assert_eq!(e.exit_code(), 2, "{e}");
    }
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(Checkpoint::from_bytes(&flipped).is_err());
    let mut version = bytes;
    version[8] = 9;
    assert!(Checkpoint::from_bytes(&version).unwrap_err().contains("version"));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let b = bench(3, 6, 24, 2);
    let cfg = small(12, 5);
    let mut straight = TrainState::new(&cfg, &b.data, &b.context).unwrap();
    train_until(&mut straight, &b.data, &cfg, 12, |_| {}).unwrap();

    let mut first = TrainState::new(&cfg, &b.data, &b.context).unwrap();
    train_until(&mut first, &b.data, &cfg, 6, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.bin");
    save_checkpoint(&first.to_checkpoint(&cfg), &path).unwrap();
    drop(first);
    let ck = load_checkpoint(&path, Some(&cfg.hash())).unwrap();
    let mut resumed = TrainState::from_checkpoint(ck, &cfg, &b.data, &b.context).unwrap();
    assert_eq!(resumed.epoch, 6);
    train_until(&mut resumed, &b.data, &cfg, 12, |_| {}).unwrap();

    assert_eq!(resumed.model.params, straight.model.params);
    assert_eq!(resumed.log, straight.log);
    let row = resumed.log[8];
    assert_eq!(row.alpha, schedule(ScheduleKind::Alpha, 8, 12, cfg.alpha_max));
    assert_eq!(row.beta, schedule(ScheduleKind::Beta, 8, 12, cfg.beta_max));
    assert_eq!(row.temp, temperature_schedule(8, 12, cfg.temp_max));
}

#[test]
fn training_loss_decreases_on_a_tiny_instance() {
    let mut improved = 0;
    for seed in 0..10 {
        let b = bench(3, 6, 64, seed);
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        let mut s = TrainState::new(&cfg, &b.data, &b.context).unwrap();
        train_until(&mut s, &b.data, &cfg, 30, |_| {}).unwrap();
        if s.log[29].total < s.log[0].total {
            improved += 1;
        }
    }
    assert!(improved >= 9, "loss fell in only {improved}/10 seeds");
}
