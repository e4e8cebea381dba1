//! Command-line entry point. Every subcommand writes the resolved configuration next to
//! its artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_config, LoadedConfig};
use crate::dataset::{make_manifest, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::metrics::{dice_over_subjects, image_fid, run_ablation, segment_plane, trained_generator};
use crate::phantom::Domain;
use crate::trainer::{fit, load_checkpoint, mode_warnings, resume, TrainData};
use crate::uda::{kfold_train, translate_corpus, write_outcome};

pub const OUTPUT_ROOT_ENV: &str = "ACCUT_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "accut", version, about = "Anatomy-conditioned contrastive image translation")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Val => vec![Split::Val],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => Split::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom dataset described by the `data` section.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Replace the contents of a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a translator on the training split of a dataset.
    Train {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint up to `train.epochs`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate every source image of a dataset with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feature-distribution distance between real target images and a set of images.
    EvalFid {
        /// Dataset whose target-domain images are the reference set.
        #[arg(long)]
        real: PathBuf,
        /// Dataset whose `--fake-domain` images are compared against the reference.
        #[arg(long)]
        fake: PathBuf,
        #[arg(long, value_enum, default_value = "source")]
        fake_domain: DomainArg,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice of a checkpoint's own segmentation decoder.
    EvalDice {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        domain: DomainArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Downstream k-fold segmentation experiment.
    EvalUda {
        /// Labelled (translated or raw) source dataset.
        #[arg(long)]
        train_manifest: PathBuf,
        /// Dataset providing the target-domain test split.
        #[arg(long)]
        target_test: PathBuf,
        /// Row label in the results table.
        #[arg(long, default_value = "run")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Swap style and mask inputs and check which one the output follows.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Number of (style, mask) pairs drawn from consecutive source images.
        #[arg(long, default_value_t = 10)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Relative output paths are placed under `$ACCUT_OUTPUT_ROOT` when it is set.
pub fn resolve_output(out: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if out.is_relative() && !root.is_empty() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct FidReport<'a> {
    fid: f64,
    n_real: usize,
    n_fake: usize,
    extractor: String,
    fake_domain: Domain,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct DiceOutput<'a> {
    report: &'a crate::metrics::DiceReport,
    domain: Domain,
    config_hash: &'a str,
}

fn read_images(m: &DatasetManifest, domain: Domain, splits: &[Split]) -> Result<Vec<crate::imageio::Plane>> {
    let entries = m.select(domain, splits);
    if entries.is_empty() {
        return Err(Error::Data(format!("no {domain:?} images in {}", m.root.display())));
    }
    entries.into_iter().map(|e| m.read_image(e)).collect()
}

/// Runs one subcommand with an already loaded configuration. Returns the artifact directory.
pub fn execute(command: &Command, cfg: &LoadedConfig) -> Result<PathBuf> {
    let c = &cfg.config;
    let out = match command {
        Command::GenData { out, .. }
        | Command::Train { out, .. }
        | Command::Translate { out, .. }
        | Command::EvalFid { out, .. }
        | Command::EvalDice { out, .. }
        | Command::EvalUda { out, .. }
        | Command::Ablate { out, .. } => resolve_output(out),
    };
    match command {
        Command::GenData { overwrite, .. } => {
            let r = c.data.split_ratios;
            let m = make_manifest(c.data.n_subjects, &c.data.source, &c.data.target, (r[0], r[1], r[2]), &out, *overwrite)?;
            log::info!("wrote {} images to {}", m.entries.len(), out.display());
        }
        Command::Train { data, resume: from, .. } => {
            let manifest = DatasetManifest::open(data)?;
            let td = TrainData::from_manifest(&manifest, &c.loss.weights(), c.train.image_size)?;
            let outcome = match from {
                None => fit::<f32>(&c.model, &c.loss, &c.train, &td, &out, &cfg.hash)?,
                Some(path) => {
                    let mut state = load_checkpoint::<f32>(path)?;
                    let meta = crate::trainer::metadata(&state);
                    mode_warnings(&meta, c.loss.mode);
                    if meta.config_hash != cfg.hash {
                        log::warn!("resuming a checkpoint written under config {}", meta.config_hash);
                    }
                    state.config_hash = cfg.hash.clone();
                    resume(state, &c.loss, &c.train, &td, &out)?
                }
            };
            log::info!("trained {} epochs; {} checkpoint(s)", outcome.state.epoch, outcome.checkpoints.len());
        }
        Command::Translate { checkpoint, data, .. } => {
            let manifest = DatasetManifest::open(data)?;
            let t = translate_corpus(checkpoint, &manifest, &out)?;
            log::info!("translated {} images", t.entries.len());
        }
        Command::EvalFid { real, fake, fake_domain, split, .. } => {
            let splits = split.splits();
            let real_imgs = read_images(&DatasetManifest::open(real)?, Domain::Target, &splits)?;
            let fake_imgs = read_images(&DatasetManifest::open(fake)?, (*fake_domain).into(), &splits)?;
            let value = image_fid(&real_imgs, &fake_imgs, &c.eval.fid)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(
                &out.join("fid.json"),
                &FidReport {
                    fid: value,
                    n_real: real_imgs.len(),
                    n_fake: fake_imgs.len(),
                    extractor: c.eval.fid.describe(),
                    fake_domain: (*fake_domain).into(),
                    config_hash: &cfg.hash,
                },
            )?;
            log::info!("fid {value:.6}");
        }
        Command::EvalDice { checkpoint, data, domain, split, .. } => {
            let g = trained_generator(checkpoint)?;
            let manifest = DatasetManifest::open(data)?;
            let domain: Domain = (*domain).into();
            let entries = manifest.select(domain, &split.splits());
            if entries.is_empty() {
                return Err(Error::Data(format!("no {domain:?} images selected")));
            }
            let mut items = Vec::with_capacity(entries.len());
            for e in entries {
                let pred = segment_plane(&g, &manifest.read_image(e)?)?;
                items.push((e.subject_id, pred, manifest.read_mask(e)?));
            }
            let refs: Vec<_> = items.iter().map(|(s, p, g)| (*s, p, g)).collect();
            let report = dice_over_subjects(&refs, c.model.classes, c.eval.absent_class)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            write_json(
                &out.join("dice.json"),
                &DiceOutput {
                    report: &report,
                    domain,
                    config_hash: &cfg.hash,
                },
            )?;
            let table = report.table();
            std::fs::write(out.join("dice.txt"), &table).map_err(|e| Error::io(&out, e))?;
            log::info!("dice per class (%):\n{table}");
        }
        Command::EvalUda { train_manifest, target_test, variant, .. } => {
            let train = DatasetManifest::open(train_manifest)?;
            let test = DatasetManifest::open(target_test)?;
            let outcome = kfold_train(&c.eval.uda, &train, &test)?;
            write_outcome(&outcome, variant, &out)?;
            log::info!(
                "{variant}: mDice {:.4} ± {:.4} over {} folds",
                outcome.summary.mdice_mean, outcome.summary.mdice_std, outcome.summary.folds
            );
        }
        Command::Ablate { checkpoint, data, pairs, .. } => {
            if *pairs == 0 {
                return Err(Error::config("--pairs", "must be positive"));
            }
            let g = trained_generator(checkpoint)?;
            let manifest = DatasetManifest::open(data)?;
            let imgs = read_images(&manifest, Domain::Source, &Split::ALL)?;
            if imgs.len() < 2 {
                return Err(Error::Data("ablation needs at least two source images".into()));
            }
            let list: Vec<_> = (0..*pairs)
                .map(|i| (imgs[i % imgs.len()].clone(), imgs[(i + 1) % imgs.len()].clone()))
                .collect();
            let res = run_ablation(&g, &list, Some(&out))?;
            log::info!("output follows the mask input in {}/{} pairs", res.report.follows_mask, list.len());
        }
    }
    cfg.write_into(&out)?;
    Ok(out)
}

/// Parses `args` (including the program name) and runs the command. Returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let loaded = match &cli.config {
        Some(p) => parse_config(p),
        None => Ok(LoadedConfig::defaults()),
    };
    match loaded.and_then(|cfg| execute(&cli.command, &cfg)) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
