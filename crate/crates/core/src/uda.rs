//! Downstream domain-adaptation experiment: a segmenter trained on (translated) source
//! images with k-fold cross-validation and tested on real target images.

use std::fs;
use std::path::{Path, PathBuf};

use accut_tensor::{cat_channels, no_grad, Array, Float, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::imageio::{self, Plane, SegMask};
use crate::metrics::{argmax_mask, dice_over_subjects, plane_var, trained_generator, translate_plane, AbsentClass};
use crate::networks::{join, Conv, ConvTranspose, Module};
use crate::objectives::segmentation_ce;
use crate::phantom::{Class, Domain, NUM_CLASSES};
use crate::trainer::{Adam, AdamHyper};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augmentations {
    pub flip: bool,
    pub resolution: bool,
    pub gamma: bool,
    pub shift: bool,
}

impl Default for Augmentations {
    fn default() -> Self {
        Self {
            flip: true,
            resolution: true,
            gamma: true,
            shift: true,
        }
    }
}

pub const SCALE_RANGE: (f64, f64) = (0.8, 1.25);
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);
pub const SHIFT_RANGE: (f64, f64) = (-0.1, 0.1);

/// Segmentation network used downstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Backbone {
    Unet { width: usize, levels: usize },
    /// Accepted by the schema but not bundled with this build.
    EfficientnetB2,
}

impl Default for Backbone {
    fn default() -> Self {
        Backbone::Unet { width: 16, levels: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UdaConfig {
    pub folds: usize,
    pub epochs: usize,
    /// (height, width) of training crops.
    pub crop_size: [usize; 2],
    pub backbone: Backbone,
    pub augmentations: Augmentations,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub absent_class: AbsentClass,
}

impl Default for UdaConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            epochs: 15,
            crop_size: [48, 96],
            backbone: Backbone::default(),
            augmentations: Augmentations::default(),
            seed: 0,
            learning_rate: 1e-3,
            batch_size: 8,
            absent_class: AbsentClass::One,
        }
    }
}

impl UdaConfig {
    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("eval.uda.{k}");
        if self.folds < 2 {
            return Err(Error::config(key("folds"), "need at least 2 folds"));
        }
        if self.epochs == 0 {
            return Err(Error::config(key("epochs"), "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(key("batch_size"), "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(key("learning_rate"), "must be positive and finite"));
        }
        match self.backbone {
            Backbone::Unet { width, levels } => {
                if width == 0 || levels == 0 {
                    return Err(Error::config(key("backbone"), "width and levels must be positive"));
                }
                let m = 1 << (levels - 1);
                if self.crop_size.iter().any(|&c| c == 0 || c % m != 0) {
                    return Err(Error::config(
                        key("crop_size"),
                        format!("{:?} must be positive multiples of {m} for {levels} levels", self.crop_size),
                    ));
                }
            }
            Backbone::EfficientnetB2 => {
                return Err(Error::config(
                    key("backbone.kind"),
                    "efficientnet_b2 is not available in this build; use unet",
                ))
            }
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        match self.backbone {
            Backbone::Unet { levels, .. } => levels,
            Backbone::EfficientnetB2 => 1,
        }
    }
}

/// The random choices behind one augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Mirror around the vertical axis.
    pub flip: bool,
    pub scale: f64,
    /// Crop offsets as fractions of the available slack, in [0, 1].
    pub crop_y: f64,
    pub crop_x: f64,
    pub gamma: f64,
    pub shift: f64,
}

impl AugmentDraw {
    /// Centered crop, nothing else.
    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            crop_y: 0.5,
            crop_x: 0.5,
            gamma: 1.0,
            shift: 0.0,
        }
    }

    pub fn sample(rng: &mut impl Rng, aug: &Augmentations) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
        let crop_y = rng.random::<f64>();
        let crop_x = rng.random::<f64>();
        let gamma = rng.random_range(GAMMA_RANGE.0..=GAMMA_RANGE.1);
        let shift = rng.random_range(SHIFT_RANGE.0..=SHIFT_RANGE.1);
        Self {
            flip: aug.flip && flip,
            scale: if aug.resolution { scale } else { 1.0 },
            crop_y,
            crop_x,
            gamma: if aug.gamma { gamma } else { 1.0 },
            shift: if aug.shift { shift } else { 0.0 },
        }
    }
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

/// Bilinear resize with half-pixel centers and clamped borders.
pub fn resize_bilinear(p: &Plane, h: usize, w: usize) -> Plane {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = source_coord(y, p.height, h).clamp(0.0, (p.height - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(p.height - 1);
        for x in 0..w {
            let sx = source_coord(x, p.width, w).clamp(0.0, (p.width - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(p.width - 1);
            let top = p.at(y0, x0) as f64 * (1.0 - fx) + p.at(y0, x1) as f64 * fx;
            let bottom = p.at(y1, x0) as f64 * (1.0 - fx) + p.at(y1, x1) as f64 * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Plane::new(h, w, out)
}

/// Nearest-neighbour resize; never invents labels.
pub fn resize_nearest(m: &SegMask, h: usize, w: usize) -> SegMask {
    let pick = |d: usize, src: usize, dst: usize| {
        (source_coord(d, src, dst).round().max(0.0) as usize).min(src - 1)
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = pick(y, m.height, h);
        for x in 0..w {
            out.push(m.at(sy, pick(x, m.width, w)));
        }
    }
    SegMask::new(h, w, out)
}

/// Pads by edge replication so that both sides reach at least `min_h x min_w`.
fn pad_to<V: Copy>(data: &[V], h: usize, w: usize, min_h: usize, min_w: usize) -> (Vec<V>, usize, usize) {
    let (nh, nw) = (h.max(min_h), w.max(min_w));
    let (top, left) = ((nh - h) / 2, (nw - w) / 2);
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = y.saturating_sub(top).min(h - 1);
        for x in 0..nw {
            out.push(data[sy * w + x.saturating_sub(left).min(w - 1)]);
        }
    }
    (out, nh, nw)
}

fn crop<V: Copy>(data: &[V], w: usize, y0: usize, x0: usize, ch: usize, cw: usize) -> Vec<V> {
    (y0..y0 + ch)
        .flat_map(|y| data[y * w + x0..y * w + x0 + cw].iter().copied())
        .collect()
}

/// Applies `draw`: flip, resize, pad-if-needed and crop act on image and mask alike;
/// gamma and intensity shift touch the image only.
pub fn apply_augment(image: &Plane, mask: &SegMask, draw: &AugmentDraw, crop_size: [usize; 2]) -> Result<(Plane, SegMask)> {
    if (image.height, image.width) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "image {}x{} and mask {}x{} differ",
            image.height, image.width, mask.height, mask.width
        )));
    }
    let (mut img, mut msk) = (image.clone(), mask.clone());
    if draw.flip {
        for y in 0..img.height {
            img.data[y * img.width..(y + 1) * img.width].reverse();
            msk.data[y * msk.width..(y + 1) * msk.width].reverse();
        }
    }
    if draw.scale != 1.0 {
        let h = ((img.height as f64 * draw.scale).round() as usize).max(1);
        let w = ((img.width as f64 * draw.scale).round() as usize).max(1);
        img = resize_bilinear(&img, h, w);
        msk = resize_nearest(&msk, h, w);
    }
    let [ch, cw] = crop_size;
    let (idata, h, w) = pad_to(&img.data, img.height, img.width, ch, cw);
    let (mdata, _, _) = pad_to(&msk.data, msk.height, msk.width, ch, cw);
    let y0 = ((h - ch) as f64 * draw.crop_y.clamp(0.0, 1.0)).round() as usize;
    let x0 = ((w - cw) as f64 * draw.crop_x.clamp(0.0, 1.0)).round() as usize;
    let mut out = Plane::new(ch, cw, crop(&idata, w, y0, x0, ch, cw));
    let out_mask = SegMask::new(ch, cw, crop(&mdata, w, y0, x0, ch, cw));
    if draw.gamma != 1.0 || draw.shift != 0.0 {
        for v in &mut out.data {
            let u = ((*v as f64 + 1.0) / 2.0).clamp(0.0, 1.0).powf(draw.gamma);
            *v = (2.0 * u - 1.0 + draw.shift).clamp(-1.0, 1.0) as f32;
        }
    }
    Ok((out, out_mask))
}

pub fn augment(
    image: &Plane,
    mask: &SegMask,
    rng: &mut impl Rng,
    aug: &Augmentations,
    crop_size: [usize; 2],
) -> Result<(Plane, SegMask)> {
    apply_augment(image, mask, &AugmentDraw::sample(rng, aug), crop_size)
}

#[derive(Clone, Debug)]
struct Stage<T> {
    first: Conv<T>,
    second: Conv<T>,
}

impl<T: Float> Stage<T> {
    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = self.first.forward(x)?.instance_norm(NORM_EPS)?.relu();
        Ok(self.second.forward(&y)?.instance_norm(NORM_EPS)?.relu())
    }

    fn visit_both(&self, prefix: &str, f: &mut dyn FnMut(&str, &accut_tensor::Param<T>)) {
        self.first.visit(&join(prefix, "conv1"), f);
        self.second.visit(&join(prefix, "conv2"), f);
    }

    fn visit_both_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut accut_tensor::Param<T>)) {
        self.first.visit_mut(&join(prefix, "conv1"), f);
        self.second.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Encoder-decoder with skip connections. Level `i` has `width * 2^i` channels; every
/// level below the first starts with a stride-2 convolution.
#[derive(Clone, Debug)]
pub struct UNet<T> {
    down: Vec<Stage<T>>,
    up: Vec<(ConvTranspose<T>, Stage<T>)>,
    head: Conv<T>,
}

impl<T: Float> UNet<T> {
    pub fn new(width: usize, levels: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let ch = |i: usize| width << i;
        let conv = |cin, cout, stride, rng: &mut ChaCha8Rng| Conv::new(cin, cout, 3, stride, 1.0, rng).zero_padded(1);
        let mut down = Vec::with_capacity(levels);
        for i in 0..levels {
            let (cin, stride) = if i == 0 { (1, 1) } else { (ch(i - 1), 2) };
            let first = conv(cin, ch(i), stride, rng);
            let second = conv(ch(i), ch(i), 1, rng);
            down.push(Stage { first, second });
        }
        let mut up = Vec::with_capacity(levels.saturating_sub(1));
        for i in (0..levels.saturating_sub(1)).rev() {
            let t = ConvTranspose::new(ch(i + 1), ch(i), 1.0, rng);
            let first = conv(2 * ch(i), ch(i), 1, rng);
            let second = conv(ch(i), ch(i), 1, rng);
            up.push((t, Stage { first, second }));
        }
        let head = Conv::new(width, classes, 1, 1, 1.0, rng);
        Self { down, up, head }
    }

    pub fn from_config(cfg: &UdaConfig, classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        match cfg.backbone {
            Backbone::Unet { width, levels } => Ok(Self::new(width, levels, classes, rng)),
            Backbone::EfficientnetB2 => unreachable!("rejected by validate"),
        }
    }

    /// `[N, 1, H, W]` to `[N, classes, H, W]` logits.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let m = 1usize << (self.down.len() - 1);
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::Shape(format!(
                "segmenter expects [N,1,H,W] with H and W divisible by {m}, got {s:?}"
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut y = x.clone();
        for stage in &self.down {
            y = stage.forward(&y)?;
            skips.push(y.clone());
        }
        skips.pop();
        for (t, stage) in &self.up {
            let skip = skips.pop().expect("one skip per decoder stage");
            let upsampled = t.forward(&y)?.instance_norm(NORM_EPS)?.relu();
            y = stage.forward(&cat_channels(&[upsampled, skip])?)?;
        }
        Ok(self.head.forward(&y)?)
    }
}

impl<T: Float> Module<T> for UNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &accut_tensor::Param<T>)) {
        for (i, s) in self.down.iter().enumerate() {
            s.visit_both(&join(prefix, &format!("down{i}")), f);
        }
        for (i, (t, s)) in self.up.iter().enumerate() {
            let p = join(prefix, &format!("up{i}"));
            t.visit(&join(&p, "upsample"), f);
            s.visit_both(&p, f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut accut_tensor::Param<T>)) {
        for (i, s) in self.down.iter_mut().enumerate() {
            s.visit_both_mut(&join(prefix, &format!("down{i}")), f);
        }
        for (i, (t, s)) in self.up.iter_mut().enumerate() {
            let p = join(prefix, &format!("up{i}"));
            t.visit_mut(&join(&p, "upsample"), f);
            s.visit_both_mut(&p, f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

fn stack<T: Float>(planes: &[&Plane]) -> Result<Var<T>> {
    let (h, w) = (planes[0].height, planes[0].width);
    let mut data = Vec::with_capacity(planes.len() * h * w);
    for p in planes {
        if (p.height, p.width) != (h, w) {
            return Err(Error::Shape("batch images differ in size".into()));
        }
        data.extend(p.data.iter().map(|&v| T::from_f64(v as f64)));
    }
    Ok(Var::constant(Array::from_vec(vec![planes.len(), 1, h, w], data)?))
}

/// Stage of the experiment at which a mask was read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UdaPhase {
    /// Segmenter training and source-validation model selection.
    Training,
    /// Final scoring of the selected models on the target test set.
    Evaluation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRead {
    pub phase: UdaPhase,
    pub domain: Domain,
    /// Mask path relative to its manifest.
    pub path: String,
}

/// Every mask read by the harness. Target masks are refused outside evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskAudit {
    pub reads: Vec<MaskRead>,
}

impl MaskAudit {
    pub fn read(&mut self, manifest: &DatasetManifest, entry: &ManifestEntry, phase: UdaPhase) -> Result<SegMask> {
        let path = manifest.mask_file(entry)?;
        if entry.domain == Domain::Target && phase != UdaPhase::Evaluation {
            return Err(Error::Runtime(format!(
                "target-domain mask {} requested during {phase:?}",
                path.display()
            )));
        }
        self.reads.push(MaskRead {
            phase,
            domain: entry.domain,
            path: entry.mask_path.clone().unwrap_or_default(),
        });
        imageio::read_mask(&path)
    }

    /// Target masks read before the evaluation phase began. Zero for a sound run.
    pub fn target_reads_before_evaluation(&self) -> usize {
        let first_eval = self
            .reads
            .iter()
            .position(|r| r.phase == UdaPhase::Evaluation)
            .unwrap_or(self.reads.len());
        let early = self.reads[..first_eval].iter().filter(|r| r.domain == Domain::Target).count();
        let mislabelled = self
            .reads
            .iter()
            .filter(|r| r.domain == Domain::Target && r.phase != UdaPhase::Evaluation)
            .count();
        early.max(mislabelled)
    }
}

/// Splits the distinct subject ids into `folds` disjoint groups (shuffled, round-robin).
pub fn fold_assignment(subjects: &[u32], folds: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut ids = subjects.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if folds < 2 {
        return Err(Error::config("eval.uda.folds", "need at least 2 folds"));
    }
    if ids.len() < folds {
        return Err(Error::Data(format!(
            "{} subjects cannot fill {folds} folds",
            ids.len()
        )));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xf01d));
    let mut out = vec![Vec::new(); folds];
    for (i, id) in ids.into_iter().enumerate() {
        out[i % folds].push(id);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labelled {
    pub image: Plane,
    pub mask: SegMask,
    pub subject_id: u32,
}

/// The model of the epoch with the lowest validation loss, plus both loss curves.
#[derive(Clone, Debug)]
pub struct SelectedModel<T> {
    pub net: UNet<T>,
    pub epoch: usize,
    pub val_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold_id: usize,
    pub val_subjects: Vec<u32>,
    pub train_subjects: Vec<u32>,
    /// 1-based epoch with the lowest source validation loss.
    pub selected_epoch: usize,
    pub val_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    /// Dice per class on the target test set, averaged over subjects.
    pub per_class: Vec<f64>,
    pub mdice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaSummary {
    pub folds: usize,
    pub per_class_mean: Vec<f64>,
    pub mdice_mean: f64,
    /// Sample standard deviation (n - 1) of the fold mDice values.
    pub mdice_std: f64,
}

impl UdaSummary {
    pub fn from_folds(folds: &[FoldResult]) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::Data("no fold results to summarize".into()));
        }
        let n = folds.len() as f64;
        let classes = folds[0].per_class.len();
        let per_class_mean = (0..classes)
            .map(|c| folds.iter().map(|f| f.per_class[c]).sum::<f64>() / n)
            .collect();
        let mdice_mean = folds.iter().map(|f| f.mdice).sum::<f64>() / n;
        let mdice_std = if folds.len() > 1 {
            (folds.iter().map(|f| (f.mdice - mdice_mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            folds: folds.len(),
            per_class_mean,
            mdice_mean,
            mdice_std,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UdaOutcome {
    pub folds: Vec<FoldResult>,
    pub summary: UdaSummary,
    pub audit: MaskAudit,
}

fn ce_value<T: Float>(net: &UNet<T>, item: &Labelled) -> Result<f64> {
    no_grad(|| {
        let logits = net.forward(&plane_var(&item.image)?)?;
        Ok(segmentation_ce(&logits, &[&item.mask])?.item().as_f64())
    })
}

/// Trains one segmenter on `train` and keeps the epoch that minimizes the loss on `val`.
/// `fold_id` selects the random streams.
pub fn train_segmenter<T: Float>(
    cfg: &UdaConfig,
    fold_id: usize,
    train: &[&Labelled],
    val: &[&Labelled],
) -> Result<SelectedModel<T>> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("segmenter needs training and validation images".into()));
    }
    let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
    init.set_stream(2 * fold_id as u64 + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2 * fold_id as u64 + 2);
    let mut net = UNet::<T>::from_config(cfg, NUM_CLASSES, &mut init)?;
    let mut opt = Adam::new(&[]);
    let hp = AdamHyper {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
    };
    let (mut best, mut best_epoch, mut best_loss) = (net.clone(), 0, f64::INFINITY);
    let (mut val_curve, mut train_curve) = (Vec::new(), Vec::new());
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (im, m) = augment(&train[i].image, &train[i].mask, &mut rng, &cfg.augmentations, cfg.crop_size)?;
                imgs.push(im);
                masks.push(m);
            }
            let x = stack::<T>(&imgs.iter().collect::<Vec<_>>())?;
            let loss = segmentation_ce(&net.forward(&x)?, &masks.iter().collect::<Vec<_>>())?;
            let value = loss.item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite("uda.segmentation"));
            }
            epoch_loss += value;
            batches += 1;
            let grads = loss.backward();
            opt.step_module(&mut net, &grads, hp);
        }
        train_curve.push(epoch_loss / batches as f64);
        let v = val.iter().map(|item| ce_value(&net, item)).sum::<Result<f64>>()? / val.len() as f64;
        log::debug!("fold {fold_id} epoch {epoch}: train {:.4} val {v:.4}", epoch_loss / batches as f64);
        val_curve.push(v);
        if v < best_loss {
            best_loss = v;
            best_epoch = epoch;
            best = net.clone();
        }
    }
    if best_epoch == 0 {
        return Err(Error::NonFinite("uda.validation"));
    }
    Ok(SelectedModel {
        net: best,
        epoch: best_epoch,
        val_loss: val_curve,
        train_loss: train_curve,
    })
}

/// Predicted mask of `image`.
pub fn segment<T: Float>(net: &UNet<T>, image: &Plane) -> Result<SegMask> {
    no_grad(|| argmax_mask(&net.forward(&plane_var(image)?)?))
}

/// k-fold training on every source-domain entry of `train`, model selection on the
/// held-out source fold, scoring on the target-domain test split of `target_test`.
pub fn kfold_train(cfg: &UdaConfig, train: &DatasetManifest, target_test: &DatasetManifest) -> Result<UdaOutcome> {
    cfg.validate()?;
    let mut audit = MaskAudit::default();
    let entries: Vec<&ManifestEntry> = train.entries.iter().filter(|e| e.domain == Domain::Source).collect();
    if entries.is_empty() {
        return Err(Error::Data("training manifest has no source-domain images".into()));
    }
    let test_entries = target_test.select(Domain::Target, &[Split::Test]);
    if test_entries.is_empty() {
        return Err(Error::Data("test manifest has no target-domain test images".into()));
    }
    let subjects: Vec<u32> = entries.iter().map(|e| e.subject_id).collect();
    let folds = fold_assignment(&subjects, cfg.folds, cfg.seed)?;

    let m = 1usize << (cfg.levels() - 1);
    let check = |p: &Plane, path: &str| -> Result<()> {
        if p.height % m != 0 || p.width % m != 0 {
            return Err(Error::Data(format!(
                "{path} is {}x{}; the segmenter needs multiples of {m}",
                p.height, p.width
            )));
        }
        Ok(())
    };
    let mut data = Vec::with_capacity(entries.len());
    for e in &entries {
        let image = train.read_image(e)?;
        check(&image, &e.path)?;
        let mask = audit.read(train, e, UdaPhase::Training)?;
        data.push(Labelled {
            image,
            mask,
            subject_id: e.subject_id,
        });
    }

    let mut models = Vec::with_capacity(folds.len());
    for (fold_id, val_subjects) in folds.iter().enumerate() {
        let (val, rest): (Vec<&Labelled>, Vec<&Labelled>) =
            data.iter().partition(|d| val_subjects.contains(&d.subject_id));
        let mut train_subjects: Vec<u32> = rest.iter().map(|d| d.subject_id).collect();
        train_subjects.sort_unstable();
        train_subjects.dedup();
        let model = train_segmenter::<f32>(cfg, fold_id, &rest, &val)?;
        log::info!(
            "fold {fold_id}: selected epoch {} (val loss {:.4})",
            model.epoch,
            model.val_loss[model.epoch - 1]
        );
        models.push((model, train_subjects));
    }

    // Target masks become readable only now, after every model has been selected.
    let mut test = Vec::with_capacity(test_entries.len());
    for e in &test_entries {
        let image = target_test.read_image(e)?;
        check(&image, &e.path)?;
        let mask = audit.read(target_test, e, UdaPhase::Evaluation)?;
        test.push((e.subject_id, image, mask));
    }
    let mut results = Vec::with_capacity(models.len());
    for (fold_id, (model, train_subjects)) in models.into_iter().enumerate() {
        let preds = test
            .iter()
            .map(|(_, image, _)| segment(&model.net, image))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<(u32, &SegMask, &SegMask)> = test
            .iter()
            .zip(&preds)
            .map(|((sid, _, gt), p)| (*sid, p, gt))
            .collect();
        let report = dice_over_subjects(&items, NUM_CLASSES, cfg.absent_class)?;
        results.push(FoldResult {
            fold_id,
            val_subjects: folds[fold_id].clone(),
            train_subjects,
            selected_epoch: model.epoch,
            val_loss: model.val_loss,
            train_loss: model.train_loss,
            per_class: report.per_class,
            mdice: report.mean,
        });
    }
    let summary = UdaSummary::from_folds(&results)?;
    Ok(UdaOutcome {
        folds: results,
        summary,
        audit,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn csv_header() -> String {
    let mut cols = vec!["variant".to_string()];
    cols.extend(Class::ALL.iter().map(|c| c.name().to_string()));
    cols.extend(["mdice".to_string(), "mdice_std".to_string()]);
    cols.join(",")
}

pub fn csv_row(variant: &str, s: &UdaSummary) -> String {
    let mut cols = vec![variant.to_string()];
    cols.extend(s.per_class_mean.iter().map(|v| format!("{v:.4}")));
    cols.extend([format!("{:.4}", s.mdice_mean), format!("{:.4}", s.mdice_std)]);
    cols.join(",")
}

/// Writes `results.csv`, `summary.json`, `mask_audit.json` and `folds/fold_<i>.json`.
pub fn write_outcome(outcome: &UdaOutcome, variant: &str, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let folds_dir = out_dir.join("folds");
    fs::create_dir_all(&folds_dir).map_err(|e| Error::io(&folds_dir, e))?;
    let mut written = Vec::new();
    for f in &outcome.folds {
        let p = folds_dir.join(format!("fold_{}.json", f.fold_id));
        write_json(&p, f)?;
        written.push(p);
    }
    let csv = out_dir.join("results.csv");
    fs::write(&csv, format!("{}\n{}\n", csv_header(), csv_row(variant, &outcome.summary)))
        .map_err(|e| Error::io(&csv, e))?;
    written.push(csv);
    for (name, value) in [
        ("summary.json", serde_json::to_value(&outcome.summary)),
        ("mask_audit.json", serde_json::to_value(&outcome.audit)),
    ] {
        let p = out_dir.join(name);
        write_json(&p, &value.map_err(|e| Error::Runtime(e.to_string()))?)?;
        written.push(p);
    }
    Ok(written)
}

/// Translates every source-domain image of `source` with a trained checkpoint into
/// `out_dir`, copying masks unchanged, and writes the translated manifest.
pub fn translate_corpus(checkpoint: &Path, source: &DatasetManifest, out_dir: &Path) -> Result<DatasetManifest> {
    let entries: Vec<&ManifestEntry> = source.entries.iter().filter(|e| e.domain == Domain::Source).collect();
    if entries.is_empty() {
        return Err(Error::Data("manifest has no source-domain images".into()));
    }
    let mut missing = Vec::new();
    for e in &entries {
        if !source.resolve(&e.path).is_file() {
            missing.push(e.path.clone());
        }
        if let Some(m) = &e.mask_path {
            if !source.resolve(m).is_file() {
                missing.push(m.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} missing file(s):\n  {}",
            missing.len(),
            missing.join("\n  ")
        )));
    }
    let generator = trained_generator(checkpoint)?;
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let image = source.read_image(e)?;
        let (fake, _) = translate_plane(&generator, &image)?;
        imageio::write_image(&out_dir.join(&e.path), &fake)?;
        if let Some(m) = &e.mask_path {
            let dst = out_dir.join(m);
            if let Some(parent) = dst.parent() {
                fs::create_dir_all(parent).map_err(|err| Error::io(parent, err))?;
            }
            fs::copy(source.resolve(m), &dst).map_err(|err| Error::io(&dst, err))?;
        }
        out.push(e.clone());
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries: out,
    };
    manifest.save()?;
    Ok(manifest)
}
