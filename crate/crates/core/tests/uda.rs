use std::collections::BTreeSet;

use accut::dataset::{make_manifest, DatasetManifest, ManifestEntry, Split};
use accut::imageio::{Plane, SegMask};
use accut::metrics::{dice, AbsentClass};
use accut::networks::NetConfig;
use accut::objectives::OperatingMode;
use accut::phantom::{Domain, PhantomParams, NUM_CLASSES};
use accut::trainer::{save_checkpoint, TrainState};
use accut::uda::{
    apply_augment, augment, csv_header, csv_row, fold_assignment, kfold_train, segment,
    train_segmenter, translate_corpus, write_outcome, AugmentDraw, Augmentations, Backbone,
    Labelled, UdaConfig, UdaPhase, UdaSummary,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ramp(h: usize, w: usize) -> (Plane, SegMask) {
    let img = Plane::new(h, w, (0..h * w).map(|i| (i % w) as f32 / w as f32 * 2.0 - 1.0).collect());
    let mask = SegMask::new(h, w, (0..h * w).map(|i| ((i % w) * NUM_CLASSES / w) as u8).collect());
    (img, mask)
}

#[test]
fn flip_only_mirrors_both() {
    let (img, mask) = ramp(8, 12);
    let draw = AugmentDraw {
        flip: true,
        ..AugmentDraw::identity()
    };
    let (a, m) = apply_augment(&img, &mask, &draw, [8, 12]).unwrap();
    for y in 0..8 {
        for x in 0..12 {
            assert_eq!(a.at(y, x), img.at(y, 11 - x));
            assert_eq!(m.at(y, x), mask.at(y, 11 - x));
        }
    }
    assert_eq!(m.histogram(NUM_CLASSES), mask.histogram(NUM_CLASSES));
}

#[test]
fn identity_draw_is_a_centered_crop() {
    let (img, mask) = ramp(10, 16);
    let (a, m) = apply_augment(&img, &mask, &AugmentDraw::identity(), [6, 8]).unwrap();
    assert_eq!((a.height, a.width), (6, 8));
    for y in 0..6 {
        for x in 0..8 {
            assert_eq!(a.at(y, x), img.at(y + 2, x + 4));
            assert_eq!(m.at(y, x), mask.at(y + 2, x + 4));
        }
    }
}

#[test]
fn photometric_changes_leave_the_mask_alone() {
    let (img, mask) = ramp(16, 16);
    let geo = AugmentDraw {
        flip: true,
        scale: 1.2,
        crop_y: 0.3,
        crop_x: 0.9,
        ..AugmentDraw::identity()
    };
    let photo = AugmentDraw {
        gamma: 1.4,
        shift: 0.07,
        ..geo
    };
    let (a, ma) = apply_augment(&img, &mask, &geo, [12, 12]).unwrap();
    let (b, mb) = apply_augment(&img, &mask, &photo, [12, 12]).unwrap();
    assert_eq!(ma, mb);
    assert_ne!(a, b);
}

#[test]
fn small_images_are_padded_up_to_the_crop() {
    let (img, mask) = ramp(8, 8);
    let draw = AugmentDraw {
        scale: 0.8,
        ..AugmentDraw::identity()
    };
    let (a, m) = apply_augment(&img, &mask, &draw, [10, 10]).unwrap();
    assert_eq!((a.height, a.width, m.height, m.width), (10, 10, 10, 10));
}

proptest! {
    #[test]
    fn augment_keeps_size_and_label_set(seed in 0u64..500, h in 8usize..24, w in 8usize..24) {
        let (img, mask) = ramp(h, w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, m) = augment(&img, &mask, &mut rng, &Augmentations::default(), [8, 8]).unwrap();
        prop_assert_eq!((a.height, a.width, m.height, m.width), (8, 8, 8, 8));
        let before: BTreeSet<u8> = mask.data.iter().copied().collect();
        prop_assert!(m.data.iter().all(|c| before.contains(c)));
        prop_assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn folds_partition_subjects(n in 2usize..40, k in 2usize..8, seed in 0u64..100) {
        let subjects: Vec<u32> = (0..n as u32).chain(0..n as u32).collect();
        match fold_assignment(&subjects, k, seed) {
            Err(_) => prop_assert!(n < k),
            Ok(folds) => {
                prop_assert_eq!(folds.len(), k);
                let mut all: Vec<u32> = folds.concat();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n as u32).collect::<Vec<_>>());
                prop_assert!(folds.iter().all(|f| !f.is_empty()));
            }
        }
    }
}

#[test]
fn config_validation() {
    assert!(UdaConfig::default().validate().is_ok());
    let bad = UdaConfig { folds: 1, ..UdaConfig::default() };
    assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
    let bad = UdaConfig { crop_size: [50, 96], ..UdaConfig::default() };
    assert!(bad.validate().is_err());
    let bad = UdaConfig { backbone: Backbone::EfficientnetB2, ..UdaConfig::default() };
    assert!(bad.validate().is_err());
}

fn dataset(dir: &std::path::Path, n: usize, ratios: (f64, f64, f64)) -> DatasetManifest {
    make_manifest(n, &PhantomParams::source(), &PhantomParams::target(), ratios, dir, true).unwrap()
}

fn tiny_cfg() -> UdaConfig {
    UdaConfig {
        folds: 2,
        epochs: 1,
        crop_size: [32, 64],
        backbone: Backbone::Unet { width: 4, levels: 3 },
        batch_size: 2,
        ..UdaConfig::default()
    }
}

#[test]
fn kfold_smoke_and_recomputable_summary() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 4, (0.5, 0.0, 0.5));
    let out = kfold_train(&tiny_cfg(), &m, &m).unwrap();
    assert_eq!(out.folds.len(), 2);
    for f in &out.folds {
        assert_eq!(f.val_loss.len(), 1);
        assert_eq!(f.selected_epoch, 1);
        assert!(f.val_subjects.iter().all(|s| !f.train_subjects.contains(s)));
        assert_eq!(f.per_class.len(), NUM_CLASSES);
    }
    let again = UdaSummary::from_folds(&out.folds).unwrap();
    let mean = (out.folds[0].mdice + out.folds[1].mdice) / 2.0;
    let std = ((out.folds[0].mdice - mean).powi(2) + (out.folds[1].mdice - mean).powi(2)).sqrt();
    assert_eq!(again, out.summary);
    assert!((out.summary.mdice_mean - mean).abs() < 1e-12);
    assert!((out.summary.mdice_std - std).abs() < 1e-12);

    assert_eq!(out.audit.target_reads_before_evaluation(), 0);
    assert!(out
        .audit
        .reads
        .iter()
        .all(|r| (r.domain == Domain::Target) == (r.phase == UdaPhase::Evaluation)));

    let res = tempfile::tempdir().unwrap();
    write_outcome(&out, "cut", res.path()).unwrap();
    let csv = std::fs::read_to_string(res.path().join("results.csv")).unwrap();
    assert_eq!(csv, format!("{}\n{}\n", csv_header(), csv_row("cut", &out.summary)));
    assert!(res.path().join("folds/fold_1.json").exists());
    assert!(res.path().join("mask_audit.json").exists());

    // same seed, same result
    let rerun = kfold_train(&tiny_cfg(), &m, &m).unwrap();
    assert_eq!(rerun, out);
}

#[test]
fn too_few_subjects_and_target_training_data_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 4, (0.5, 0.0, 0.5));
    let cfg = UdaConfig { folds: 5, ..tiny_cfg() };
    assert!(matches!(kfold_train(&cfg, &m, &m), Err(accut::Error::Data(_))));

    // Target images relabelled as training material must trip the mask guard.
    let mut sneaky = m.clone();
    sneaky.entries.retain(|e| e.domain == Domain::Target);
    for e in &mut sneaky.entries {
        if e.split == Split::Train {
            e.domain = Domain::Source;
        }
    }
    sneaky.entries.push(ManifestEntry {
        domain: Domain::Source,
        ..m.entries.iter().find(|e| e.domain == Domain::Target).unwrap().clone()
    });
    let cfg = tiny_cfg();
    assert!(kfold_train(&cfg, &sneaky, &m).is_ok());
    let mut guard = accut::uda::MaskAudit::default();
    let target_entry = m.entries.iter().find(|e| e.domain == Domain::Target).unwrap();
    assert!(guard.read(&m, target_entry, UdaPhase::Training).is_err());
    assert!(guard.reads.is_empty());
}

#[test]
fn translate_corpus_copies_masks_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(&dir.path().join("data"), 3, (1.0, 0.0, 0.0));
    let ckpt = dir.path().join("g.ckpt");
    let mut state = TrainState::<f32>::new(&NetConfig::default(), OperatingMode::AccutS, 0, String::new());
    save_checkpoint(&state, &ckpt).unwrap();
    assert!(translate_corpus(&ckpt, &m, &dir.path().join("t0")).is_err());
    state.epoch = 1;
    save_checkpoint(&state, &ckpt).unwrap();

    let a = translate_corpus(&ckpt, &m, &dir.path().join("t1")).unwrap();
    let b = translate_corpus(&ckpt, &m, &dir.path().join("t2")).unwrap();
    assert_eq!(a.entries.len(), m.select(Domain::Source, &Split::ALL).len());
    for e in &a.entries {
        let mask = e.mask_path.as_ref().unwrap();
        let orig = std::fs::read(m.resolve(mask)).unwrap();
        assert_eq!(std::fs::read(a.resolve(mask)).unwrap(), orig);
        assert_eq!(
            std::fs::read(a.resolve(&e.path)).unwrap(),
            std::fs::read(b.resolve(&e.path)).unwrap()
        );
    }

    let mut broken = m.clone();
    std::fs::remove_file(m.resolve(&m.entries[0].path)).unwrap();
    broken.entries[1].mask_path = Some("nowhere.png".into());
    let err = translate_corpus(&ckpt, &broken, &dir.path().join("t3")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("2 missing") && msg.contains("nowhere.png"), "{msg}");
}

#[test]
fn segmenter_overfits_a_small_set() {
    let dir = tempfile::tempdir().unwrap();
    let m = dataset(dir.path(), 4, (1.0, 0.0, 0.0));
    let items: Vec<Labelled> = m
        .select(Domain::Source, &[Split::Train])
        .into_iter()
        .map(|e| Labelled {
            image: m.read_image(e).unwrap(),
            mask: m.read_mask(e).unwrap(),
            subject_id: e.subject_id,
        })
        .collect();
    let refs: Vec<&Labelled> = items.iter().collect();
    let cfg = UdaConfig {
        epochs: 200,
        crop_size: [64, 128],
        backbone: Backbone::Unet { width: 16, levels: 4 },
        augmentations: Augmentations { flip: false, resolution: false, gamma: false, shift: false },
        batch_size: 1,
        learning_rate: 3e-3,
        ..UdaConfig::default()
    };
    let model = train_segmenter::<f32>(&cfg, 0, &refs, &refs).unwrap();
    let mean: f64 = items
        .iter()
        .map(|it| dice(&segment(&model.net, &it.image).unwrap(), &it.mask, NUM_CLASSES, AbsentClass::One).unwrap().mean)
        .sum::<f64>()
        / items.len() as f64;
    assert!(mean > 0.9, "mDice {mean}");
}
