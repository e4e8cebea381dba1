use std::collections::BTreeMap;

use accut::dataset::make_manifest;
use accut::networks::{snapshot, Module, NetConfig, Networks, ParamGroup};
use accut::objectives::{mode_weights, OperatingMode};
use accut::phantom::{generate_sample, PhantomParams, Sample};
use accut::trainer::{
    fit, load_checkpoint, mode_warnings, read_metadata, resume, save_checkpoint, train_step,
    train_step_observed, Adam, AdamHyper, DomainBatch, LossConfig, Phase, SegUpdate, StepConfig,
    TrainConfig, TrainData, TrainState,
};

fn tiny_net() -> NetConfig {
    NetConfig {
        width: 4,
        disc_width: 4,
        embed_dim: 16,
        ..NetConfig::default()
    }
}

fn sample(target: bool, seed: u64, size: usize) -> Sample {
    let base = if target { PhantomParams::target() } else { PhantomParams::source() };
    let p = PhantomParams {
        image_height: size,
        image_width: size,
        ..base
    };
    generate_sample(&p.with_seed(seed)).unwrap()
}

fn batches(size: usize, seed: u64) -> (DomainBatch<f32>, DomainBatch<f32>) {
    let s = sample(false, seed, size);
    let t = sample(true, seed + 100, size);
    (
        DomainBatch::new(&[&s.image], Some(vec![s.mask])).unwrap(),
        DomainBatch::new(&[&t.image], Some(vec![t.mask])).unwrap(),
    )
}

fn step_config(mode: OperatingMode) -> StepConfig {
    let loss = LossConfig {
        mode,
        num_patches: 32,
        ..LossConfig::default()
    };
    StepConfig::new(&loss, &TrainConfig::default())
}

/// Parameter groups whose values differ between two snapshots.
fn changed(a: &BTreeMap<String, Vec<f32>>, b: &BTreeMap<String, Vec<f32>>) -> Vec<ParamGroup> {
    let mut out: Vec<ParamGroup> = a
        .iter()
        .filter(|(k, v)| b[*k] != **v)
        .map(|(k, _)| ParamGroup::of(k).unwrap())
        .collect();
    out.sort();
    out.dedup();
    out
}

#[test]
fn phases_touch_only_their_parameter_groups() {
    use ParamGroup::*;
    for mode in OperatingMode::ALL {
        let mut state = TrainState::<f32>::new(&tiny_net(), mode, 1, String::new());
        let (src, tgt) = batches(64, 3);
        let mut snaps = vec![(None, snapshot(&state.nets))];
        train_step_observed(&mut state, &src, &tgt, &step_config(mode), &mut |phase, nets| {
            snaps.push((Some(phase), snapshot(nets)));
        })
        .unwrap();
        let phases: Vec<_> = snaps.iter().skip(1).map(|(p, _)| p.unwrap()).collect();
        if mode == OperatingMode::Cut {
            assert_eq!(phases, vec![Phase::Discriminator, Phase::Style]);
        } else {
            assert_eq!(phases, vec![Phase::Discriminator, Phase::Style, Phase::Segmentation]);
        }
        for pair in snaps.windows(2) {
            let groups = changed(&pair[0].1, &pair[1].1);
            let expected = match pair[1].0.unwrap() {
                Phase::Discriminator => vec![Discriminator],
                Phase::Style => vec![Encoder, StyleDecoder, Head],
                Phase::Segmentation => vec![Encoder, MaskDecoder],
            };
            assert_eq!(groups, expected, "{mode} {:?}", pair[1].0);
        }
    }
}

#[test]
fn plain_mode_never_moves_the_mask_decoder() {
    let mut state = TrainState::<f32>::new(&tiny_net(), OperatingMode::Cut, 2, String::new());
    let before = snapshot(&state.nets);
    let cfg = step_config(OperatingMode::Cut);
    for i in 0..5 {
        let (src, tgt) = batches(64, 10 + i);
        train_step(&mut state, &src, &tgt, &cfg).unwrap();
    }
    let after = snapshot(&state.nets);
    for (k, v) in &before {
        if ParamGroup::of(k) == Some(ParamGroup::MaskDecoder) {
            assert_eq!(&after[k], v, "{k}");
        }
    }
    assert!(changed(&before, &after).contains(&ParamGroup::Encoder));
}

#[test]
fn supervised_mode_moves_the_mask_decoder() {
    let mut state = TrainState::<f32>::new(&tiny_net(), OperatingMode::AccutS, 3, String::new());
    let before = snapshot(&state.nets);
    let (src, tgt) = batches(64, 4);
    let report = train_step(&mut state, &src, &tgt, &step_config(OperatingMode::AccutS)).unwrap();
    assert!(changed(&before, &snapshot(&state.nets)).contains(&ParamGroup::MaskDecoder));
    assert!(report.losses.seg_source > 0.0);
    assert_eq!(report.losses.seg_target, 0.0);
    assert!(report.disc.is_finite());
    assert_eq!(state.step, 1);
}

#[test]
fn joint_update_skips_the_separate_segmentation_phase() {
    let mut state = TrainState::<f32>::new(&tiny_net(), OperatingMode::AccutSt, 5, String::new());
    let mut cfg = step_config(OperatingMode::AccutSt);
    cfg.seg_update = SegUpdate::Joint;
    let (src, tgt) = batches(64, 6);
    let before = snapshot(&state.nets);
    let mut snaps = Vec::new();
    train_step_observed(&mut state, &src, &tgt, &cfg, &mut |p, n| snaps.push((p, snapshot(n))))
        .unwrap();
    assert_eq!(snaps.len(), 2);
    assert_eq!(snaps[1].0, Phase::Style);
    use ParamGroup::*;
    assert_eq!(
        changed(&snaps[0].1, &snaps[1].1),
        vec![Encoder, StyleDecoder, MaskDecoder, Head]
    );
    assert_eq!(changed(&before, &snaps[0].1), vec![Discriminator]);
}

#[test]
fn missing_masks_are_a_configuration_error() {
    let mut state = TrainState::<f32>::new(&tiny_net(), OperatingMode::AccutT, 0, String::new());
    let s = sample(false, 1, 64);
    let t = sample(true, 2, 64);
    let src = DomainBatch::new(&[&s.image], None).unwrap();
    let tgt = DomainBatch::new(&[&t.image], None).unwrap();
    let err = train_step(&mut state, &src, &tgt, &step_config(OperatingMode::AccutT)).unwrap_err();
    assert!(matches!(err, accut::Error::Config { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    // the unsupervised mode does not need them
    let mut state = TrainState::<f32>::new(&tiny_net(), OperatingMode::Cut, 0, String::new());
    train_step(&mut state, &src, &tgt, &step_config(OperatingMode::Cut)).unwrap();
}

#[test]
fn first_adam_step_moves_by_the_learning_rate() {
    let cfg = NetConfig {
        width: 2,
        disc_width: 2,
        embed_dim: 2,
        ..NetConfig::default()
    };
    let mut nets = Networks::<f64>::new(&cfg, &mut rand::SeedableRng::seed_from_u64(0));
    let w = nets.discriminator.stages[0].weight.clone();
    let loss = w.var().square().sum_all();
    let grads = loss.backward();
    let g = grads.get(&w).unwrap().clone();
    let mut opt = Adam::<f64>::new(&[ParamGroup::Discriminator]);
    let hp = AdamHyper {
        lr: 0.01,
        beta1: 0.5,
        beta2: 0.999,
    };
    opt.step(&mut nets, &grads, hp);
    let after = nets.discriminator.stages[0].weight.value().data().to_vec();
    for ((a, b), gi) in after.iter().zip(w.value().data()).zip(g.data()) {
        // bias-corrected moments make the first update lr * g / (|g| + eps)
        let expected = b - 0.01 * gi / (gi.abs() + 1e-8);
        assert!((a - expected).abs() < 1e-12);
    }
    assert_eq!(opt.steps, 1);
}

#[test]
fn checkpoints_round_trip_and_resume_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let mode = OperatingMode::AccutSt;
    let cfg = step_config(mode);
    let mut state = TrainState::<f32>::new(&tiny_net(), mode, 7, "abc".into());
    for i in 0..2 {
        let (src, tgt) = batches(64, 20 + i);
        train_step(&mut state, &src, &tgt, &cfg).unwrap();
    }
    save_checkpoint(&state, &path).unwrap();
    let mut loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(snapshot(&loaded.nets), snapshot(&state.nets));
    assert_eq!(loaded.gen_opt, state.gen_opt);
    assert_eq!(loaded.seg_opt, state.seg_opt);
    assert_eq!(loaded.disc_opt, state.disc_opt);
    assert_eq!((loaded.epoch, loaded.step, loaded.seed), (state.epoch, state.step, state.seed));
    assert_eq!(loaded.config_hash, "abc");

    let (src, tgt) = batches(64, 30);
    let a = train_step(&mut state, &src, &tgt, &cfg).unwrap();
    let b = train_step(&mut loaded, &src, &tgt, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(snapshot(&loaded.nets), snapshot(&state.nets));

    // f64 state is stored at full precision
    let state64 = TrainState::<f64>::new(&tiny_net(), mode, 7, String::new());
    save_checkpoint(&state64, &path).unwrap();
    assert_eq!(snapshot(&load_checkpoint::<f64>(&path).unwrap().nets), snapshot(&state64.nets));
    assert!(load_checkpoint::<f32>(&path).is_err());
}

#[test]
fn corrupted_checkpoint_fails_the_integrity_check() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let state = TrainState::<f32>::new(&tiny_net(), OperatingMode::Cut, 0, String::new());
    save_checkpoint(&state, &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    match load_checkpoint::<f32>(&path) {
        Err(accut::Error::Checkpoint(msg)) => assert!(msg.contains("integrity"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("corruption went unnoticed"),
    }
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(load_checkpoint::<f32>(&path).is_err());
    assert!(!dir.path().join("c.tmp").exists());
}

#[test]
fn mode_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let state = TrainState::<f32>::new(&tiny_net(), OperatingMode::AccutS, 0, String::new());
    save_checkpoint(&state, &path).unwrap();
    let meta = read_metadata(&path).unwrap();
    assert!(mode_warnings(&meta, OperatingMode::AccutS).is_empty());
    let w = mode_warnings(&meta, OperatingMode::Cut);
    assert_eq!(w.len(), 1);
    assert!(w[0].contains("accut_s") && w[0].contains("cut"));
}

fn smoke_data(dir: &std::path::Path, mode: OperatingMode) -> TrainData {
    let size = |p: PhantomParams| PhantomParams {
        image_height: 64,
        image_width: 64,
        ..p
    };
    let m = make_manifest(
        2,
        &size(PhantomParams::source()),
        &size(PhantomParams::target()),
        (1.0, 0.0, 0.0),
        dir,
        false,
    )
    .unwrap();
    TrainData::from_manifest(&m, &mode_weights(mode), [64, 64]).unwrap()
}

fn smoke_configs(epochs: usize) -> (LossConfig, TrainConfig) {
    (
        LossConfig {
            mode: OperatingMode::AccutS,
            num_patches: 32,
            ..LossConfig::default()
        },
        TrainConfig {
            epochs,
            seed: 11,
            checkpoint_interval: 0,
            image_size: [64, 64],
            ..TrainConfig::default()
        },
    )
}

#[test]
fn fit_smoke_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let data = smoke_data(&dir.path().join("data"), OperatingMode::AccutS);
    assert_eq!((data.source.len(), data.target.len()), (2, 2));
    assert!(data.source.iter().all(|i| i.mask.is_some()));
    assert!(data.target.iter().all(|i| i.mask.is_none()));

    let (loss, train) = smoke_configs(1);
    let a = fit::<f32>(&tiny_net(), &loss, &train, &data, &dir.path().join("a"), "h").unwrap();
    assert_eq!(a.checkpoints.len(), 1);
    assert!(a.checkpoints[0].exists());
    let log = std::fs::read_to_string(&a.metrics).unwrap();
    assert_eq!(log.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "step", "gan", "nce_source", "nce_target", "seg_source", "seg_target", "total", "disc"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let b = fit::<f32>(&tiny_net(), &loss, &train, &data, &dir.path().join("b"), "h").unwrap();
    assert_eq!(std::fs::read(&a.metrics).unwrap(), std::fs::read(&b.metrics).unwrap());
    assert_eq!(
        std::fs::read(&a.checkpoints[0]).unwrap(),
        std::fs::read(&b.checkpoints[0]).unwrap()
    );

    // two epochs straight vs. one epoch, reload, one more
    let (_, train2) = smoke_configs(2);
    let straight = fit::<f32>(&tiny_net(), &loss, &train2, &data, &dir.path().join("c"), "h").unwrap();
    let state = load_checkpoint::<f32>(&a.checkpoints[0]).unwrap();
    let resumed = resume(state, &loss, &train2, &data, &dir.path().join("a")).unwrap();
    assert_eq!(snapshot(&resumed.state.nets), snapshot(&straight.state.nets));
    assert_eq!(
        std::fs::read(&resumed.metrics).unwrap(),
        std::fs::read(&straight.metrics).unwrap()
    );
}

#[test]
fn invalid_training_configs_are_rejected() {
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { betas: [1.0, 0.9], ..TrainConfig::default() },
        TrainConfig { image_size: [62, 128], ..TrainConfig::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(accut::Error::Config { .. })), "{cfg:?}");
    }
    TrainConfig::default().validate().unwrap();
    let loss = LossConfig { temperature: -1.0, ..LossConfig::default() };
    assert!(loss.validate().is_err());
}

#[test]
fn networks_visit_every_optimizer_group() {
    let state = TrainState::<f32>::new(&tiny_net(), OperatingMode::Cut, 0, String::new());
    let mut n = 0;
    state.nets.visit("", &mut |name, _| {
        let g = ParamGroup::of(name).unwrap();
        assert!(state.disc_opt.owns(name) || state.gen_opt.owns(name) || state.seg_opt.owns(name));
        assert_eq!(state.disc_opt.owns(name), g == ParamGroup::Discriminator);
        n += 1;
    });
    assert!(n > 0);
}
