//! Optimization loop: a discriminator update, a style update and a segmentation update
//! per step, plus checkpointing.

mod adam;
mod checkpoint;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use accut_tensor::{Array, Float, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamHyper, Moments};
pub use checkpoint::{
    load_checkpoint, metadata, mode_warnings, read_metadata, save_checkpoint, CheckpointMeta,
    RngState,
};

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::imageio::{Plane, SegMask};
use crate::networks::{FeaturePyramid, NetConfig, Networks, ParamGroup, Translation};
use crate::objectives::{
    discriminator_loss, generator_adversarial_loss, mode_weights, patch_nce_with, segmentation_ce,
    total_loss, LossBreakdown, LossComponents, LossWeights, OperatingMode, DEFAULT_TEMPERATURE,
};
use crate::phantom::Domain;

/// How segmentation gradients reach the shared encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegUpdate {
    /// Style and segmentation updates are separate optimizer steps.
    Separate,
    /// One backward pass and one encoder update over the summed objective.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: OperatingMode,
    pub temperature: f64,
    /// Patches sampled per tapped layer for the contrastive loss.
    pub num_patches: usize,
    /// Replaces the mode's weight table when set.
    pub weights: Option<LossWeights>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: OperatingMode::AccutS,
            temperature: DEFAULT_TEMPERATURE,
            num_patches: 256,
            weights: None,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        self.weights.unwrap_or_else(|| mode_weights(self.mode))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::config("loss.temperature", "must be > 0"));
        }
        if self.num_patches == 0 {
            return Err(Error::config("loss.num_patches", "must be >= 1"));
        }
        self.weights()
            .validate()
            .map_err(|e| Error::config("loss.weights", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only after the last epoch).
    pub checkpoint_interval: usize,
    /// `[height, width]` every training image must have.
    pub image_size: [usize; 2],
    pub seg_update: SegUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 1,
            learning_rate: 2e-4,
            betas: [0.5, 0.999],
            seed: 0,
            checkpoint_interval: 50,
            image_size: [64, 128],
            seg_update: SegUpdate::Separate,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be > 0"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "each beta must lie in [0, 1)"));
        }
        let [h, w] = self.image_size;
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::config(
                "train.image_size",
                format!("{h}x{w} must be non-empty and divisible by 4"),
            ));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.betas[0],
            beta2: self.betas[1],
        }
    }
}

/// Everything a single step needs besides the state and the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepConfig {
    pub weights: LossWeights,
    pub num_patches: usize,
    pub temperature: f64,
    pub adam: AdamHyper,
    pub seg_update: SegUpdate,
}

impl StepConfig {
    pub fn new(loss: &LossConfig, train: &TrainConfig) -> Self {
        Self {
            weights: loss.weights(),
            num_patches: loss.num_patches,
            temperature: loss.temperature,
            adam: train.adam(),
            seg_update: train.seg_update,
        }
    }
}

pub struct TrainState<T> {
    pub nets: Networks<T>,
    pub net_config: NetConfig,
    pub disc_opt: Adam<T>,
    pub gen_opt: Adam<T>,
    pub seg_opt: Adam<T>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub mode: OperatingMode,
    pub seed: u64,
    pub config_hash: String,
}

impl<T: Float> TrainState<T> {
    /// Fresh networks from `seed` (stream 0); sampling and data order use stream 1.
    pub fn new(net: &NetConfig, mode: OperatingMode, seed: u64, config_hash: String) -> Self {
        let nets = Networks::new(net, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            nets,
            net_config: net.clone(),
            disc_opt: Adam::new(&[ParamGroup::Discriminator]),
            gen_opt: Adam::new(&[ParamGroup::Encoder, ParamGroup::StyleDecoder, ParamGroup::Head]),
            seg_opt: Adam::new(&[ParamGroup::Encoder, ParamGroup::MaskDecoder]),
            epoch: 0,
            step: 0,
            rng,
            mode,
            seed,
            config_hash,
        }
    }
}

/// Images (and optional masks) of one domain for one step.
#[derive(Clone, Debug)]
pub struct DomainBatch<T: Float> {
    pub images: Var<T>,
    pub masks: Option<Vec<SegMask>>,
}

impl<T: Float> DomainBatch<T> {
    pub fn new(planes: &[&Plane], masks: Option<Vec<SegMask>>) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "batch mixes {h}x{w} and {}x{} images",
                    p.height, p.width
                )));
            }
            data.extend(p.data.iter().map(|&v| T::from_f64(v as f64)));
        }
        if let Some(m) = &masks {
            if m.len() != planes.len() {
                return Err(Error::Data(format!("{} images but {} masks", planes.len(), m.len())));
            }
        }
        Ok(Self {
            images: Var::constant(Array::from_vec(vec![planes.len(), 1, h, w], data)?),
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn mask_refs(&self, domain: &str) -> Result<Vec<&SegMask>> {
        self.masks
            .as_ref()
            .map(|m| m.iter().collect())
            .ok_or_else(|| {
                Error::config(
                    format!("loss.weights.seg_{domain}"),
                    format!("segmentation weight is positive but the {domain} batch has no masks"),
                )
            })
    }
}

/// Loss graphs of the generator side for one batch pair.
pub struct GeneratorLosses<T: Float> {
    pub fake: Var<T>,
    pub nce_source: Option<Var<T>>,
    pub nce_target: Option<Var<T>>,
    pub seg_source: Option<Var<T>>,
    pub seg_target: Option<Var<T>>,
}

fn nce_term<T: Float>(
    nets: &Networks<T>,
    real_taps: &FeaturePyramid<T>,
    fake: &Var<T>,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
    stop: bool,
) -> Result<Var<T>> {
    let batch = fake.shape()[0];
    let smallest = real_taps
        .resolutions()
        .iter()
        .map(|(h, w)| h * w)
        .min()
        .unwrap_or(0);
    let patches = cfg.num_patches.min(smallest);
    let keys = nets.head.project(&real_taps.features(), patches, None, rng)?;
    let (_, fake_taps) = nets.generator.encode(fake)?;
    let queries = nets
        .head
        .project(&fake_taps.features(), patches, Some(&keys.ids), rng)?;
    patch_nce_with(&queries.embeddings, &keys.embeddings, cfg.temperature, batch, stop)
}

/// Whether the training-time gradient stops are in place: severed mask features in the
/// style decoder and detached contrastive keys. Without them the objective is an ordinary
/// differentiable function, which is what finite differences measure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientStops {
    Training,
    None,
}

/// Forward pass for every active generator-side term. Terms with zero weight are not built.
pub fn generator_losses<T: Float>(
    nets: &Networks<T>,
    src: &DomainBatch<T>,
    tgt: &DomainBatch<T>,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
    stops: GradientStops,
) -> Result<GeneratorLosses<T>> {
    let stop = stops == GradientStops::Training;
    let w = &cfg.weights;
    let src_masks = if w.seg_source > 0.0 { Some(src.mask_refs("source")?) } else { None };
    let tgt_masks = if w.seg_target > 0.0 { Some(tgt.mask_refs("target")?) } else { None };
    if src.images.shape()[1..] != tgt.images.shape()[1..] {
        return Err(Error::Shape(format!(
            "source batch {:?} and target batch {:?} differ",
            src.images.shape(),
            tgt.images.shape()
        )));
    }

    let translate = |x: &Var<T>| -> Result<Translation<T>> {
        let (bottleneck, taps) = nets.generator.encode(x)?;
        let (mask_logits, mask_taps) = nets.generator.decode_mask(&bottleneck)?;
        let fake = nets.generator.decode_style(&bottleneck, &mask_taps, stop)?;
        Ok(Translation {
            fake,
            mask_logits,
            bottleneck,
            taps,
        })
    };
    let tr_s = translate(&src.images)?;
    let nce_source = if w.nce_source > 0.0 {
        Some(nce_term(nets, &tr_s.taps, &tr_s.fake, cfg, rng, stop)?)
    } else {
        None
    };
    let (nce_target, logits_t) = if w.nce_target > 0.0 {
        let tr_t = translate(&tgt.images)?;
        let nce = nce_term(nets, &tr_t.taps, &tr_t.fake, cfg, rng, stop)?;
        (Some(nce), Some(tr_t.mask_logits))
    } else if tgt_masks.is_some() {
        let (z, _) = nets.generator.encode(&tgt.images)?;
        (None, Some(nets.generator.decode_mask(&z)?.0))
    } else {
        (None, None)
    };
    let seg_source = match src_masks {
        Some(m) => Some(segmentation_ce(&tr_s.mask_logits, &m)?),
        None => None,
    };
    let seg_target = match (tgt_masks, logits_t) {
        (Some(m), Some(l)) => Some(segmentation_ce(&l, &m)?),
        _ => None,
    };
    Ok(GeneratorLosses {
        fake: tr_s.fake,
        nce_source,
        nce_target,
        seg_source,
        seg_target,
    })
}

fn weighted_sum<T: Float>(terms: &[(f64, &Option<Var<T>>)]) -> Result<Option<Var<T>>> {
    let mut acc: Option<Var<T>> = None;
    for (w, term) in terms {
        let Some(term) = term else { continue };
        if *w == 0.0 {
            continue;
        }
        let scaled = if *w == 1.0 { term.clone() } else { term.scale(T::from_f64(*w)) };
        acc = Some(match acc {
            Some(a) => a.add(&scaled)?,
            None => scaled,
        });
    }
    Ok(acc)
}

fn value<T: Float>(v: &Option<Var<T>>) -> f64 {
    v.as_ref().map_or(0.0, |v| v.item().as_f64())
}

/// The full weighted objective seen by the generator, for a fixed discriminator.
pub fn generator_objective<T: Float>(
    nets: &Networks<T>,
    src: &DomainBatch<T>,
    tgt: &DomainBatch<T>,
    cfg: &StepConfig,
    rng: &mut ChaCha8Rng,
    stops: GradientStops,
) -> Result<Var<T>> {
    let l = generator_losses(nets, src, tgt, cfg, rng, stops)?;
    let gan = Some(generator_adversarial_loss(&nets.discriminator.forward(&l.fake)?));
    let w = &cfg.weights;
    weighted_sum(&[
        (1.0, &gan),
        (w.nce_source, &l.nce_source),
        (w.nce_target, &l.nce_target),
        (w.seg_source, &l.seg_source),
        (w.seg_target, &l.seg_target),
    ])
    .map(|v| v.expect("adversarial term is always present"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Discriminator,
    Style,
    Segmentation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    #[serde(flatten)]
    pub losses: LossBreakdown,
    pub disc: f64,
}

pub fn train_step<T: Float>(
    state: &mut TrainState<T>,
    src: &DomainBatch<T>,
    tgt: &DomainBatch<T>,
    cfg: &StepConfig,
) -> Result<StepReport> {
    train_step_observed(state, src, tgt, cfg, &mut |_, _| {})
}

/// [`train_step`] with a callback after each phase's parameter update.
pub fn train_step_observed<T: Float>(
    state: &mut TrainState<T>,
    src: &DomainBatch<T>,
    tgt: &DomainBatch<T>,
    cfg: &StepConfig,
    observe: &mut dyn FnMut(Phase, &Networks<T>),
) -> Result<StepReport> {
    let w = cfg.weights;
    let l = generator_losses(&state.nets, src, tgt, cfg, &mut state.rng, GradientStops::Training)?;

    // discriminator on the detached translation
    let d_real = state.nets.discriminator.forward(&tgt.images)?;
    let d_fake = state.nets.discriminator.forward(&l.fake.detach())?;
    let loss_d = discriminator_loss(&d_real, &d_fake)?;
    let disc = loss_d.item().as_f64();
    if !disc.is_finite() {
        return Err(Error::NonFinite("disc"));
    }
    let grads = loss_d.backward();
    state.disc_opt.step(&mut state.nets, &grads, cfg.adam);
    observe(Phase::Discriminator, &state.nets);

    let gan = Some(generator_adversarial_loss(&state.nets.discriminator.forward(&l.fake)?));
    let losses = total_loss(
        &LossComponents {
            gan: value(&gan),
            nce_source: value(&l.nce_source),
            nce_target: value(&l.nce_target),
            seg_source: value(&l.seg_source),
            seg_target: value(&l.seg_target),
        },
        &w,
    )?;
    let style = weighted_sum(&[
        (1.0, &gan),
        (w.nce_source, &l.nce_source),
        (w.nce_target, &l.nce_target),
    ])?
    .expect("adversarial term is always present");
    let seg = weighted_sum(&[(w.seg_source, &l.seg_source), (w.seg_target, &l.seg_target)])?;

    match (cfg.seg_update, seg) {
        (SegUpdate::Joint, Some(seg)) => {
            let grads = style.add(&seg)?.backward();
            state.gen_opt.step(&mut state.nets, &grads, cfg.adam);
            state
                .seg_opt
                .step_only(&mut state.nets, &grads, cfg.adam, &[ParamGroup::MaskDecoder]);
            observe(Phase::Style, &state.nets);
        }
        (_, seg) => {
            let grads = style.backward();
            state.gen_opt.step(&mut state.nets, &grads, cfg.adam);
            observe(Phase::Style, &state.nets);
            if let Some(seg) = seg {
                let grads = seg.backward();
                state.seg_opt.step(&mut state.nets, &grads, cfg.adam);
                observe(Phase::Segmentation, &state.nets);
            }
        }
    }
    state.step += 1;
    Ok(StepReport { losses, disc })
}

/// One training image with its optional mask.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub image: Plane,
    pub mask: Option<SegMask>,
    pub subject_id: u32,
}

#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<TrainItem>,
    pub target: Vec<TrainItem>,
}

impl TrainData {
    /// Training-split images of both domains. Masks are read only for domains whose
    /// segmentation weight is positive.
    pub fn from_manifest(
        manifest: &DatasetManifest,
        weights: &LossWeights,
        image_size: [usize; 2],
    ) -> Result<Self> {
        let load = |domain: Domain, with_masks: bool| -> Result<Vec<TrainItem>> {
            let entries = manifest.select(domain, &[Split::Train]);
            if entries.is_empty() {
                return Err(Error::Data(format!(
                    "manifest has no {domain:?} training images"
                )));
            }
            entries
                .into_iter()
                .map(|e| {
                    let image = manifest.read_image(e)?;
                    if [image.height, image.width] != image_size {
                        return Err(Error::Data(format!(
                            "{} is {}x{}, training expects {}x{}",
                            e.path,
                            image.height,
                            image.width,
                            image_size[0],
                            image_size[1]
                        )));
                    }
                    let mask = if with_masks {
                        Some(manifest.read_mask(e)?)
                    } else {
                        None
                    };
                    Ok(TrainItem {
                        image,
                        mask,
                        subject_id: e.subject_id,
                    })
                })
                .collect()
        };
        Ok(Self {
            source: load(Domain::Source, weights.seg_source > 0.0)?,
            target: load(Domain::Target, weights.seg_target > 0.0)?,
        })
    }

    fn batch<T: Float>(items: &[&TrainItem]) -> Result<DomainBatch<T>> {
        let planes: Vec<&Plane> = items.iter().map(|i| &i.image).collect();
        let masks: Option<Vec<SegMask>> = items.iter().map(|i| i.mask.clone()).collect();
        DomainBatch::new(&planes, masks)
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
struct StepRecord {
    epoch: usize,
    step: u64,
    #[serde(flatten)]
    report: StepReport,
}

pub struct FitOutcome<T> {
    pub state: TrainState<T>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Trains from scratch, truncating any previous metrics log in `out_dir`.
pub fn fit<T: Float>(
    net: &NetConfig,
    loss: &LossConfig,
    train: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    config_hash: &str,
) -> Result<FitOutcome<T>> {
    loss.validate()?;
    train.validate()?;
    let state = TrainState::new(net, loss.mode, train.seed, config_hash.to_string());
    let metrics = out_dir.join("metrics.jsonl");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    fs::File::create(&metrics).map_err(|e| Error::io(&metrics, e))?;
    resume(state, loss, train, data, out_dir)
}

/// Continues training from `state.epoch` up to `train.epochs`, appending to the metrics log.
pub fn resume<T: Float>(
    mut state: TrainState<T>,
    loss: &LossConfig,
    train: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
) -> Result<FitOutcome<T>> {
    loss.validate()?;
    train.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::Data("training needs images from both domains".into()));
    }
    let cfg = StepConfig::new(loss, train);
    let metrics_path = out_dir.join("metrics.jsonl");
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let mut log = BufWriter::new(file);
    let mut checkpoints = Vec::new();

    let (n_src, n_tgt, b) = (data.source.len(), data.target.len(), train.batch_size);
    let steps = (n_src / b).max(1);
    while state.epoch < train.epochs {
        let mut src_order: Vec<usize> = (0..n_src).collect();
        let mut tgt_order: Vec<usize> = (0..n_tgt).collect();
        src_order.shuffle(&mut state.rng);
        tgt_order.shuffle(&mut state.rng);
        let epoch = state.epoch + 1;
        let (mut sum_total, mut sum_disc) = (0.0, 0.0);
        for s in 0..steps {
            let src: Vec<&TrainItem> = (0..b)
                .map(|i| &data.source[src_order[(s * b + i) % n_src]])
                .collect();
            let tgt: Vec<&TrainItem> = (0..b)
                .map(|i| &data.target[tgt_order[(s * b + i) % n_tgt]])
                .collect();
            let report = train_step(
                &mut state,
                &TrainData::batch(&src)?,
                &TrainData::batch(&tgt)?,
                &cfg,
            )?;
            sum_total += report.losses.total;
            sum_disc += report.disc;
            let line = serde_json::to_string(&StepRecord {
                epoch,
                step: state.step,
                report,
            })
            .map_err(|e| Error::Runtime(format!("metrics encoding failed: {e}")))?;
            writeln!(log, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        }
        log.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch = epoch;
        log::info!(
            "epoch {epoch}/{}: generator {:.4}, discriminator {:.4}",
            train.epochs,
            sum_total / steps as f64,
            sum_disc / steps as f64
        );
        let due = train.checkpoint_interval > 0 && epoch % train.checkpoint_interval == 0;
        if due || epoch == train.epochs {
            let path = checkpoint_path(out_dir, epoch);
            save_checkpoint(&state, &path)?;
            checkpoints.push(path);
        }
    }
    Ok(FitOutcome {
        state,
        checkpoints,
        metrics: metrics_path,
    })
}
