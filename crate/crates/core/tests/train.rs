use std::path::Path;

use ean_core::data::{generate_split, GeneratorConfig, Scene};
use ean_core::matching::LossConfig;
use ean_core::model::{DecoderConfig, Model};
use ean_core::tensor::{read_archive, AdamState};
use ean_core::train::{stream_rng, Stream, TrainConfig, TrainSummary, Trainer};
use ean_core::Error;
use rand::Rng;

fn generator() -> GeneratorConfig {
    GeneratorConfig {
        channels: 4,
        height: 24,
        width: 12,
        ..Default::default()
    }
}

fn decoder() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        dim: 16,
        heads: 2,
        sampling_points: 2,
        groups: 8,
        points: 6,
        bev_channels: 4,
        bev_height: 24,
        bev_width: 12,
        ..Default::default()
    }
}

fn scenes() -> Vec<Scene> {
    generate_split(&generator(), 11, 0, 6).unwrap()
}

fn trainer(out: &Path, seed: u64, train: TrainConfig, loss: LossConfig) -> Trainer<'_> {
    let model = Model::new(decoder(), &mut stream_rng(seed, Stream::Init)).unwrap();
    Trainer {
        adam: AdamState::new(&model.params),
        model,
        loss,
        train,
        seed,
        epoch: 0,
        meta: Default::default(),
        out_dir: out,
    }
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, batch_size: 3, lr: 1e-3, ..Default::default() }
}

fn train(out: &Path, seed: u64, train: TrainConfig) -> (TrainSummary, Vec<u8>) {
    let mut log = Vec::new();
    let s = trainer(out, seed, train, LossConfig::default()).run(&scenes(), &mut log).unwrap();
    (s, log)
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn same_seed_gives_bit_identical_checkpoints() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, la) = train(a.path(), 5, cfg(2));
    let (sb, lb) = train(b.path(), 5, cfg(2));
    assert_eq!(bytes(&sa.final_checkpoint), bytes(&sb.final_checkpoint));
    assert_eq!(la, lb);
    assert_eq!(sa.steps, 4);
    let c = tempfile::tempdir().unwrap();
    let (sc, _) = train(c.path(), 6, cfg(2));
    assert_ne!(bytes(&sa.final_checkpoint), bytes(&sc.final_checkpoint));
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let (sf, _) = train(full.path(), 3, TrainConfig { checkpoint_every: 1, ..cfg(3) });
    let mid = full.path().join("epoch001.ckpt");
    assert!(mid.exists());
    let resumed = tempfile::tempdir().unwrap();
    let mut t = trainer(resumed.path(), 3, cfg(3), LossConfig::default());
    t.restore(&mid).unwrap();
    assert_eq!(t.epoch, 1);
    let sr = t.run(&scenes(), &mut Vec::new()).unwrap();
    assert_eq!(sr.first_epoch, 1);
    assert_eq!(sr.epoch_losses, sf.epoch_losses[1..]);
    assert_eq!(bytes(&sr.final_checkpoint), bytes(&sf.final_checkpoint));
}

#[test]
fn thread_count_does_not_change_results() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (sa, _) = train(a.path(), 2, cfg(1));
    let (sb, _) = train(b.path(), 2, TrainConfig { threads: 3, ..cfg(1) });
    assert_eq!(bytes(&sa.final_checkpoint), bytes(&sb.final_checkpoint));
}

#[test]
fn loss_decreases_on_a_tiny_split() {
    let dir = tempfile::tempdir().unwrap();
    let (s, _) = train(dir.path(), 0, cfg(6));
    assert!(s.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(s.epoch_losses[5] < s.epoch_losses[0], "{:?}", s.epoch_losses);
}

#[test]
fn zero_twin_weight_trains_the_central_branch_only() {
    let dir = tempfile::tempdir().unwrap();
    let loss = LossConfig { lambda_noncentral: 0.0, ..Default::default() };
    let mut log = Vec::new();
    trainer(dir.path(), 1, cfg(1), loss).run(&scenes(), &mut log).unwrap();
    for line in String::from_utf8(log).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["loss"]["noncentral"], 0.0);
        assert_eq!(v["loss"]["total"], v["loss"]["center"]);
        assert!(v["loss"]["layers"].as_array().unwrap().iter().all(|l| l["noncentral"].is_null()));
    }
}

#[test]
fn log_has_one_line_per_step_with_the_dropped_rate() {
    let dir = tempfile::tempdir().unwrap();
    let t = TrainConfig { lr_drop_at: Some(0.5), lr_drop_factor: 0.1, ..cfg(2) };
    let (_, log) = train(dir.path(), 0, t);
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[0]["lr"], 1e-3);
    assert!((lines[3]["lr"].as_f64().unwrap() - 1e-4).abs() < 1e-18);
    let mut seen: Vec<u64> = lines[..2]
        .iter()
        .flat_map(|l| l["scenes"].as_array().unwrap().iter().map(|s| s.as_u64().unwrap()))
        .collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..6).collect::<Vec<_>>());
}

#[test]
fn non_finite_input_dumps_state_and_reports_a_fault() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = scenes();
    data[2].bev.data_mut().fill(f64::NAN);
    let mut t = trainer(dir.path(), 0, TrainConfig { batch_size: 6, ..cfg(1) }, LossConfig::default());
    let r = t.run(&data, &mut Vec::new());
    assert!(matches!(r, Err(Error::NumericFault { .. })), "{r:?}");
    let dump: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("fault_dump.json")).unwrap()).unwrap();
    assert_eq!(dump["scene_id"], 2);
    assert!(read_archive(&dir.path().join("fault_params.ckpt")).is_ok());
}

#[test]
fn too_many_elements_for_the_groups_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = trainer(dir.path(), 0, cfg(1), LossConfig::default());
    t.model = Model::new(DecoderConfig { groups: 1, ..decoder() }, &mut stream_rng(0, Stream::Init)).unwrap();
    t.adam = AdamState::new(&t.model.params);
    let data = generate_split(&GeneratorConfig { dividers: [2, 2], ..generator() }, 0, 0, 2).unwrap();
    let r = t.run(&data, &mut Vec::new());
    assert!(matches!(r, Err(Error::Config(_))), "{r:?}");
}

#[test]
fn stream_rngs_are_independent_and_reproducible() {
    let draw = |s: Stream| stream_rng(9, s).random::<u64>();
    assert_eq!(draw(Stream::Init), draw(Stream::Init));
    assert_ne!(draw(Stream::Shuffle(0)), draw(Stream::Shuffle(1)));
    assert_ne!(draw(Stream::Iteration(3)), draw(Stream::Dropout(3)));
}
