use accut::networks::{param_count, Generator, Module, NetConfig, Networks, ParamGroup};
use accut_tensor::{no_grad, Array, Grads, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn nets(cfg: &NetConfig, seed: u64) -> Networks<f32> {
    Networks::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn noise(shape: &[usize], seed: u64) -> Var<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Var::constant(Array::from_vec(shape.to_vec(), data).unwrap())
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Largest absolute gradient entry over all parameters of `group`.
fn group_grad(nets: &Networks<f32>, grads: &Grads<f32>, group: ParamGroup) -> f32 {
    let mut worst = 0.0f32;
    nets.visit("", &mut |name, p| {
        if ParamGroup::of(name) == Some(group) {
            if let Some(g) = grads.get(p) {
                worst = worst.max(g.max_abs());
            }
        }
    });
    worst
}

#[test]
fn full_size_shape_trace() {
    let cfg = NetConfig {
        disc_layers: 3,
        ..NetConfig::default()
    };
    let n = nets(&cfg, 1);
    let x = noise(&[1, 1, 256, 256], 2);
    no_grad(|| {
        let (bottleneck, taps) = n.generator.encode(&x).unwrap();
        assert_eq!(bottleneck.shape(), &[1, 4 * cfg.width, 64, 64]);
        let res = taps.resolutions();
        assert_eq!(res.len(), 5);
        assert!(res.windows(2).all(|w| w[0].0 >= w[1].0 && w[0].1 >= w[1].1));
        assert_eq!(res[0], (256, 256));
        assert_eq!(res[4], (64, 64));

        let (logits, mask_taps) = n.generator.decode_mask(&bottleneck).unwrap();
        assert_eq!(logits.shape(), &[1, 5, 256, 256]);
        assert_eq!(mask_taps.resolutions(), vec![(64, 64), (128, 128), (256, 256)]);

        let fake = n.generator.decode_style(&bottleneck, &mask_taps, true).unwrap();
        assert_eq!(fake.shape(), &[1, 1, 256, 256]);

        let score = n.discriminator.forward(&x).unwrap();
        assert_eq!(score.shape(), &[1, 1, 30, 30]);
        assert!(n.discriminator.receptive_field() < 256);
    });
}

#[test]
fn style_decoder_stage_widths_include_mask_features() {
    let cfg = NetConfig::default();
    let g = Generator::<f32>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let w = cfg.width;
    let cin = |p: &accut_tensor::Param<f32>, axis: usize| p.value().shape()[axis];
    // own width + mask-decoder width at the same resolution
    assert_eq!(cin(&g.style_decoder.up1.weight, 0), 4 * w + 4 * w);
    assert_eq!(cin(&g.style_decoder.up2.weight, 0), 2 * w + 2 * w);
    assert_eq!(cin(&g.style_decoder.out.weight, 1), w + w);
}

#[test]
fn indivisible_input_is_a_shape_error() {
    let n = nets(&NetConfig::default(), 0);
    let x = noise(&[1, 1, 30, 32], 0);
    assert!(matches!(n.generator.encode(&x), Err(accut::Error::Shape(_))));
    assert!(n.generator.translate(&x).is_err());
}

#[test]
fn mask_resolution_mismatch_is_a_shape_error() {
    let n = nets(&NetConfig::default(), 0);
    let a = noise(&[1, 1, 32, 32], 0);
    let b = noise(&[1, 1, 16, 16], 1);
    no_grad(|| {
        let (za, _) = n.generator.encode(&a).unwrap();
        let (zb, _) = n.generator.encode(&b).unwrap();
        let (_, taps_b) = n.generator.decode_mask(&zb).unwrap();
        assert!(matches!(
            n.generator.decode_style(&za, &taps_b, true),
            Err(accut::Error::Shape(_))
        ));
        assert!(n.generator.translate_ablation(&a, &b).is_err());
    });
}

#[test]
fn forward_is_deterministic() {
    let n = nets(&NetConfig::default(), 3);
    let x = noise(&[1, 1, 32, 64], 4);
    no_grad(|| {
        let (f1, m1) = n.generator.translate(&x).unwrap();
        let (f2, m2) = n.generator.translate(&x).unwrap();
        assert_eq!(f1.value().data(), f2.value().data());
        assert_eq!(m1.value().data(), m2.value().data());
        let d1 = n.discriminator.forward(&x).unwrap();
        let d2 = n.discriminator.forward(&x).unwrap();
        assert_eq!(d1.value().data(), d2.value().data());
    });
}

#[test]
fn batch_items_are_independent() {
    let n = nets(&NetConfig::default(), 5);
    let a = noise(&[1, 1, 32, 32], 6);
    let b = noise(&[1, 1, 32, 32], 7);
    let ab = Var::constant(Array::concat_outer(&[a.value().clone(), b.value().clone()]).unwrap());
    let ba = Var::constant(Array::concat_outer(&[b.value().clone(), a.value().clone()]).unwrap());
    no_grad(|| {
        let (fa, ma) = n.generator.translate(&a).unwrap();
        let (fb, _) = n.generator.translate(&b).unwrap();
        let (fab, mab) = n.generator.translate(&ab).unwrap();
        let (fba, _) = n.generator.translate(&ba).unwrap();
        let half = fa.value().len();
        assert!(max_diff(&fab.value().data()[..half], fa.value().data()) < 1e-6);
        assert!(max_diff(&fab.value().data()[half..], fb.value().data()) < 1e-6);
        assert!(max_diff(&fba.value().data()[..half], fb.value().data()) < 1e-6);
        assert!(max_diff(&mab.value().data()[..ma.value().len()], ma.value().data()) < 1e-6);

        let da = n.discriminator.forward(&a).unwrap();
        let dab = n.discriminator.forward(&ab).unwrap();
        assert!(max_diff(&dab.value().data()[..da.value().len()], da.value().data()) < 1e-6);
    });
}

#[test]
fn mask_softmax_sums_to_one_and_output_is_bounded() {
    let n = nets(&NetConfig::default(), 8);
    // large inputs push the tanh towards saturation
    let x = noise(&[2, 1, 32, 32], 9).scale(50.0);
    no_grad(|| {
        let (fake, logits) = n.generator.translate(&x).unwrap();
        let (lo, hi) = fake.value().min_max();
        assert!((-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi));
        let (b, c, h, w) = logits.value().dims4().unwrap();
        let l = logits.value().data();
        for bi in 0..b {
            for p in 0..h * w {
                let v: Vec<f64> = (0..c).map(|k| l[(bi * c + k) * h * w + p] as f64).collect();
                let m = v.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = v.iter().map(|x| (x - m).exp()).sum();
                let s: f64 = v.iter().map(|x| (x - m).exp() / z).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    });
}

#[test]
fn zero_bottleneck_gives_periodic_logits() {
    // Transposed stride-2 upsampling leaves a fixed 2x2 pattern per stage, so a
    // constant bottleneck yields a logits map that repeats every 4 pixels away
    // from the borders.
    let cfg = NetConfig::default();
    let n = nets(&cfg, 10);
    let z = Var::constant(Array::zeros(vec![1, 4 * cfg.width, 16, 16]));
    no_grad(|| {
        let (logits, _) = n.generator.decode_mask(&z).unwrap();
        let (_, c, h, w) = logits.value().dims4().unwrap();
        let l = logits.value().data();
        let at = |k: usize, y: usize, x: usize| l[(k * h + y) * w + x];
        let mut checked = 0;
        for k in 0..c {
            for y in 8..h - 12 {
                for x in 8..w - 12 {
                    assert!((at(k, y, x) - at(k, y + 4, x)).abs() < 1e-5);
                    assert!((at(k, y, x) - at(k, y, x + 4)).abs() < 1e-5);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    });
}

#[test]
fn severed_mask_features_block_style_gradients() {
    let n = nets(&NetConfig::default(), 11);
    let x = noise(&[1, 1, 16, 16], 12);
    let style_loss = |sever: bool| {
        let (z, _) = n.generator.encode(&x).unwrap();
        let (_, taps) = n.generator.decode_mask(&z).unwrap();
        let fake = n.generator.decode_style(&z, &taps, sever).unwrap();
        let score = n.discriminator.forward(&fake).unwrap();
        score.add_scalar(-1.0).square().mean_all().backward()
    };
    let severed = style_loss(true);
    assert_eq!(group_grad(&n, &severed, ParamGroup::MaskDecoder), 0.0);
    assert!(group_grad(&n, &severed, ParamGroup::StyleDecoder) > 0.0);
    assert!(group_grad(&n, &severed, ParamGroup::Encoder) > 0.0);

    let open = style_loss(false);
    assert!(group_grad(&n, &open, ParamGroup::MaskDecoder) > 0.0);

    // translate always severs
    let (fake, _) = n.generator.translate(&x).unwrap();
    let g = fake.square().mean_all().backward();
    assert_eq!(group_grad(&n, &g, ParamGroup::MaskDecoder), 0.0);
}

#[test]
fn segmentation_loss_reaches_encoder_and_mask_decoder_only() {
    let n = nets(&NetConfig::default(), 13);
    let x = noise(&[1, 1, 16, 16], 14);
    let (fake, logits) = n.generator.translate(&x).unwrap();
    let targets: Vec<usize> = (0..256).map(|i| i % 5).collect();
    let ce = logits.channels_to_rows().unwrap().cross_entropy_rows(&targets, 1e-12).unwrap();
    let g = ce.backward();
    assert!(group_grad(&n, &g, ParamGroup::Encoder) > 0.0);
    assert!(group_grad(&n, &g, ParamGroup::MaskDecoder) > 0.0);
    assert_eq!(group_grad(&n, &g, ParamGroup::StyleDecoder), 0.0);
    assert_eq!(group_grad(&n, &g, ParamGroup::Discriminator), 0.0);
    assert_eq!(group_grad(&n, &g, ParamGroup::Head), 0.0);
    drop(fake);
}

#[test]
fn translate_matches_its_composition() {
    let n = nets(&NetConfig::default(), 15);
    let x = noise(&[1, 1, 32, 32], 16);
    let y = noise(&[1, 1, 32, 32], 17);
    no_grad(|| {
        let (fake, _) = n.generator.translate(&x).unwrap();
        let (z, _) = n.generator.encode(&x).unwrap();
        let (_, taps) = n.generator.decode_mask(&z).unwrap();
        let manual = n.generator.decode_style(&z, &taps, true).unwrap();
        assert_eq!(fake.value().data(), manual.value().data());

        let same = n.generator.translate_ablation(&x, &x).unwrap();
        assert_eq!(same.value().data(), fake.value().data());

        let swapped = n.generator.translate_ablation(&x, &y).unwrap();
        assert_eq!(swapped.shape(), x.shape());
    });
}

#[test]
fn projections_are_unit_norm_and_reusable() {
    let cfg = NetConfig::default();
    let n = nets(&cfg, 18);
    let x = noise(&[2, 1, 32, 32], 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    no_grad(|| {
        let (_, taps) = n.generator.encode(&x).unwrap();
        let feats = taps.features();
        let p = n.head.project(&feats, 16, None, &mut rng).unwrap();
        assert_eq!(p.embeddings.len(), 5);
        for (e, ids) in p.embeddings.iter().zip(&p.ids) {
            assert_eq!(e.shape(), &[2 * 16, cfg.embed_dim]);
            assert_eq!(ids.len(), 16);
            for row in e.value().data().chunks(cfg.embed_dim) {
                let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
            }
        }
        let again = n.head.project(&feats, 16, Some(&p.ids), &mut rng).unwrap();
        for (a, b) in p.embeddings.iter().zip(&again.embeddings) {
            assert_eq!(a.value().data(), b.value().data());
        }
        assert_eq!(again.ids, p.ids);

        let one = n.head.project(&feats, 1, None, &mut rng).unwrap();
        assert!(one.embeddings.iter().all(|e| e.shape() == [2, cfg.embed_dim]));
    });
}

#[test]
fn projection_rejects_bad_requests() {
    let n = nets(&NetConfig::default(), 21);
    let x = noise(&[1, 1, 16, 16], 22);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    no_grad(|| {
        let (_, taps) = n.generator.encode(&x).unwrap();
        let feats = taps.features();
        // the bottleneck taps are 4x4
        assert!(n.head.project(&feats, 17, None, &mut rng).is_err());
        let mut ids = vec![vec![0usize]; 5];
        ids[3] = vec![16];
        let err = n.head.project(&feats, 1, Some(&ids), &mut rng).unwrap_err();
        assert!(matches!(err, accut::Error::Tensor(accut_tensor::TensorError::Index { .. })));
    });
}

#[test]
fn parameter_names_are_unique_and_grouped() {
    let n = nets(&NetConfig::default(), 0);
    let mut names = Vec::new();
    n.visit("", &mut |name, _| names.push(name.to_string()));
    let total = names.len();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), total);
    assert!(names.iter().all(|s| ParamGroup::of(s).is_some()));
    for g in ParamGroup::ALL {
        assert!(names.iter().any(|s| ParamGroup::of(s) == Some(g)), "{g:?}");
    }
    assert!(param_count(&n) > 0);
}
