use mtbit::data::{generate_tile, SynthSpec, Tile, DEFAULT_H_SCALE};
use mtbit::model::ModelConfig;
use mtbit::training::{load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer};

fn tiles(n: usize) -> Vec<Tile> {
    let spec = SynthSpec::desk(n, 5);
    (0..n).map(|i| generate_tile(&spec, i).unwrap()).collect()
}

fn trainer(epochs: u64) -> Trainer {
    let tc = TrainConfig {
        batch_size: 2,
        epochs,
        max_steps: None,
        ..TrainConfig::desk(16)
    };
    let t = tiles(4);
    Trainer::new(ModelConfig::tiny(), tc, t[..3].to_vec(), t[3..].to_vec(), DEFAULT_H_SCALE as f64).unwrap()
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut full = trainer(5);
    full.run_steps(10).unwrap();

    let mut first = trainer(5);
    first.run_steps(5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let t = tiles(4);
    let mut second = Trainer::resume(load_checkpoint(&path).unwrap(), t[..3].to_vec(), t[3..].to_vec()).unwrap();
    second.run_steps(5).unwrap();

    assert_eq!(second.state, full.state);
    assert_eq!(second.checkpoint().to_bytes(), full.checkpoint().to_bytes());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let mut a = trainer(2);
    let mut b = trainer(2);
    let la = a.run(|_| {}).unwrap();
    let lb = b.run(|_| {}).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la.len(), 2);
    assert!(la.iter().all(|r| r.f1.is_some()));
    assert_eq!(a.checkpoint().to_bytes(), b.checkpoint().to_bytes());
}

#[test]
fn zero_epochs_is_a_no_op() {
    let mut t = trainer(0);
    let before = t.state.clone();
    assert!(t.run(|_| {}).unwrap().is_empty());
    assert_eq!(t.state, before);
}

#[test]
fn step_budget_stops_mid_epoch() {
    let mut t = trainer(100);
    t.tc.max_steps = Some(3);
    t.run(|_| {}).unwrap();
    assert_eq!(t.state.step, 3);
    assert_eq!(t.state.epoch, 1);
    assert_eq!(t.state.cursor, 1);
}

#[test]
fn periodic_checkpoints_are_written() {
    let mut t = trainer(4);
    t.tc.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    t.checkpoint_dir = Some(dir.path().to_path_buf());
    t.run(|_| {}).unwrap();
    let ck: Checkpoint = load_checkpoint(&dir.path().join("epoch_0004.ckpt")).unwrap();
    assert_eq!(ck.state.epoch, 4);
    assert!(dir.path().join("epoch_0002.ckpt").exists());
    assert!(!dir.path().join("epoch_0003.ckpt").exists());
}

#[test]
fn sequential_matches_parallel() {
    let run = |parallel: bool| {
        mtbit::exec::set_parallel(parallel);
        let mut t = trainer(2);
        let log = t.run(|_| {}).unwrap();
        (log, t.checkpoint().to_bytes())
    };
    let seq = run(false);
    let par = run(true);
    assert_eq!(seq, par);
}
