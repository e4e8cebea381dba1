//! Segmentation overlap, feature-distribution distance and the mask-swap ablation.

use std::path::Path;

use accut_tensor::{no_grad, Array, Float, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Plane, SegMask};
use crate::networks::Generator;
use crate::phantom::Class;

/// Score of a class that is absent from both prediction and ground truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentClass {
    /// Counts as a perfect score.
    #[default]
    One,
    /// Reported as NaN and left out of every mean.
    Exclude,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectDice {
    pub subject_id: u32,
    pub per_class: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub per_class: Vec<f64>,
    /// Mean of the per-class entries that are not NaN.
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_subject: Vec<SubjectDice>,
}

fn nan_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-class `2|P∩G| / (|P|+|G|)` for one image.
pub fn dice(pred: &SegMask, gt: &SegMask, classes: usize, absent: AbsentClass) -> Result<DiceReport> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut inter = vec![0usize; classes];
    let mut p_count = vec![0usize; classes];
    let mut g_count = vec![0usize; classes];
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let (p, g) = (p as usize, g as usize);
        if p >= classes || g >= classes {
            return Err(Error::Data(format!(
                "class id {} is out of range for {classes} classes",
                p.max(g)
            )));
        }
        p_count[p] += 1;
        g_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| match p_count[c] + g_count[c] {
            0 => match absent {
                AbsentClass::One => 1.0,
                AbsentClass::Exclude => f64::NAN,
            },
            denom => 2.0 * inter[c] as f64 / denom as f64,
        })
        .collect();
    Ok(DiceReport {
        mean: nan_mean(per_class.iter().copied()),
        per_class,
        per_subject: Vec::new(),
    })
}

/// Dice over a test set: per-class scores are averaged over subjects (NaN entries skipped).
pub fn dice_over_subjects(
    items: &[(u32, &SegMask, &SegMask)],
    classes: usize,
    absent: AbsentClass,
) -> Result<DiceReport> {
    if items.is_empty() {
        return Err(Error::Data("no prediction/ground-truth pairs to score".into()));
    }
    let mut per_subject = Vec::with_capacity(items.len());
    for &(subject_id, pred, gt) in items {
        let r = dice(pred, gt, classes, absent)?;
        per_subject.push(SubjectDice {
            subject_id,
            per_class: r.per_class,
            mean: r.mean,
        });
    }
    let per_class: Vec<f64> = (0..classes)
        .map(|c| nan_mean(per_subject.iter().map(|s| s.per_class[c])))
        .collect();
    Ok(DiceReport {
        mean: nan_mean(per_class.iter().copied()),
        per_class,
        per_subject,
    })
}

impl DiceReport {
    /// Fixed-width table, one column per class.
    pub fn table(&self) -> String {
        let names: Vec<&str> = Class::ALL.iter().map(|c| c.name()).collect();
        let mut head = String::new();
        let mut row = String::new();
        for (i, v) in self.per_class.iter().enumerate() {
            let name = names.get(i).copied().unwrap_or("class");
            head.push_str(&format!("{name:>10}"));
            row.push_str(&format!("{:>10.2}", 100.0 * v));
        }
        format!("{head}{:>10}\n{row}{:>10.2}\n", "mean", 100.0 * self.mean)
    }
}

fn moments(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov)
}

const EIG_FLOOR: f64 = 1e-10;

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig
        .eigenvalues
        .map(|v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn trace_sqrt(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    eig.eigenvalues
        .iter()
        .map(|&v| if v < EIG_FLOOR { 0.0 } else { v.sqrt() })
        .sum()
}

/// Fréchet distance between Gaussians fitted to two feature sets (rows are samples).
pub fn fid(real: &DMatrix<f64>, fake: &DMatrix<f64>) -> Result<f64> {
    let d = real.ncols();
    if d == 0 || fake.ncols() != d {
        return Err(Error::Shape(format!(
            "feature dimensions differ or are empty: {} vs {}",
            d,
            fake.ncols()
        )));
    }
    if real.nrows() < 2 || fake.nrows() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 samples per set, got {} and {}",
            real.nrows(),
            fake.nrows()
        )));
    }
    if real.nrows() < d || fake.nrows() < d {
        log::warn!(
            "fewer samples ({} / {}) than feature dimensions ({d}); covariance is rank deficient",
            real.nrows(),
            fake.nrows()
        );
    }
    if real.iter().chain(fake.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }
    let (mu_r, cov_r) = moments(real);
    let (mu_f, cov_f) = moments(fake);
    let root = symmetric_sqrt(&cov_r);
    let cross = trace_sqrt(&(&root * &cov_f * &root));
    let value = (mu_r - mu_f).norm_squared() + cov_r.trace() + cov_f.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Row-per-sample matrix from feature vectors.
pub fn feature_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature rows have different lengths".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

/// Feature extractor for the distribution distance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorSpec {
    /// Three stride-2 3x3 conv + ReLU stages with fixed random weights, then global
    /// average pooling. Gray images are replicated to `input_channels`.
    RandomConv {
        seed: u64,
        input_channels: usize,
        widths: [usize; 3],
    },
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        ExtractorSpec::RandomConv {
            seed: 1234,
            input_channels: 3,
            widths: [8, 16, 32],
        }
    }
}

impl ExtractorSpec {
    pub fn dim(&self) -> usize {
        match self {
            ExtractorSpec::RandomConv { widths, .. } => widths[2],
        }
    }

    /// One-line description of the preprocessing, for report headers.
    pub fn describe(&self) -> String {
        match self {
            ExtractorSpec::RandomConv {
                seed,
                input_channels,
                widths,
            } => format!(
                "random-conv extractor (seed {seed}, widths {widths:?}, d={}); gray input replicated to {input_channels} channels, no resizing",
                widths[2]
            ),
        }
    }
}

pub struct FeatureExtractor {
    spec: ExtractorSpec,
    layers: Vec<(Var<f64>, Var<f64>)>,
    input_channels: usize,
}

impl FeatureExtractor {
    pub fn new(spec: &ExtractorSpec) -> Result<Self> {
        match *spec {
            ExtractorSpec::RandomConv {
                seed,
                input_channels,
                widths,
            } => {
                if input_channels == 0 || widths.contains(&0) {
                    return Err(Error::config("eval.extractor", "channel counts must be >= 1"));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut cin = input_channels;
                let mut layers = Vec::new();
                for &cout in &widths {
                    let fan_in = cin * 9;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let w: Vec<f64> = (0..cout * fan_in)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    let b: Vec<f64> = (0..cout)
                        .map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    layers.push((
                        Var::constant(Array::from_vec(vec![cout, cin, 3, 3], w)?),
                        Var::constant(Array::from_vec(vec![cout], b)?),
                    ));
                    cin = cout;
                }
                Ok(Self {
                    spec: spec.clone(),
                    layers,
                    input_channels,
                })
            }
        }
    }

    pub fn spec(&self) -> &ExtractorSpec {
        &self.spec
    }

    pub fn extract_one(&self, image: &Plane) -> Result<Vec<f64>> {
        let plane: Vec<f64> = image.data.iter().map(|&v| v as f64).collect();
        let data = plane.repeat(self.input_channels);
        let shape = vec![1, self.input_channels, image.height, image.width];
        no_grad(|| {
            let mut x = Var::constant(Array::from_vec(shape, data)?);
            for (w, b) in &self.layers {
                x = x.conv2d(w, Some(b), 2, 1)?.relu();
            }
            Ok(x.spatial_mean()?.value().data().to_vec())
        })
    }

    /// One row per image.
    pub fn extract(&self, images: &[Plane]) -> Result<DMatrix<f64>> {
        let rows = images
            .iter()
            .map(|im| self.extract_one(im))
            .collect::<Result<Vec<_>>>()?;
        feature_matrix(&rows)
    }
}

/// Distance between two image sets under `spec`.
pub fn image_fid(real: &[Plane], fake: &[Plane], spec: &ExtractorSpec) -> Result<f64> {
    let ex = FeatureExtractor::new(spec)?;
    fid(&ex.extract(real)?, &ex.extract(fake)?)
}

pub(crate) fn plane_var<T: Float>(p: &Plane) -> Result<Var<T>> {
    Ok(Var::constant(Array::from_vec(
        vec![1, 1, p.height, p.width],
        p.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
    )?))
}

pub(crate) fn var_plane<T: Float>(v: &Var<T>) -> Plane {
    let s = v.shape();
    Plane::new(s[2], s[3], v.value().data().iter().map(|x| x.as_f64() as f32).collect())
}

/// Per-pixel argmax of `[1, C, H, W]` logits.
pub fn argmax_mask<T: Float>(logits: &Var<T>) -> Result<SegMask> {
    let (_, c, h, w) = logits.value().dims4()?;
    let l = logits.value().data();
    let data = (0..h * w)
        .map(|p| {
            (0..c)
                .max_by(|&a, &b| {
                    l[a * h * w + p]
                        .partial_cmp(&l[b * h * w + p])
                        .unwrap_or(std::cmp::Ordering::Equal)
                })
                .unwrap_or(0) as u8
        })
        .collect();
    Ok(SegMask::new(h, w, data))
}

/// Translation and segmentation of one image.
pub fn translate_plane<T: Float>(g: &Generator<T>, image: &Plane) -> Result<(Plane, SegMask)> {
    no_grad(|| {
        let (fake, logits) = g.translate(&plane_var(image)?)?;
        Ok((var_plane(&fake), argmax_mask(&logits)?))
    })
}

/// Segmentation of `image` by the generator's own mask decoder.
pub fn segment_plane<T: Float>(g: &Generator<T>, image: &Plane) -> Result<SegMask> {
    Ok(translate_plane(g, image)?.1)
}

/// Mean row index of the pixels labelled `class`, or None if there are none.
pub fn mean_row(mask: &SegMask, class: Class) -> Option<f64> {
    let (mut sum, mut n) = (0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.at(y, x) == class as u8 {
                sum += y;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub index: usize,
    /// Mean retina row of each image under the generator's mask decoder.
    pub style_row: Option<f64>,
    pub mask_row: Option<f64>,
    pub output_row: Option<f64>,
    /// The swapped output's retina is closer to the mask image's than to the style image's.
    pub follows_mask: bool,
    pub identical_inputs_match: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub pairs: Vec<AblationPair>,
    pub follows_mask: usize,
    /// Grid image file name, relative to the output directory.
    pub grid: Option<String>,
}

pub struct AblationOutputs {
    pub report: AblationReport,
    /// `(style image, mask image, swapped output, plain translation of the style image)`.
    pub images: Vec<[Plane; 4]>,
}

pub const GRID_FILE: &str = "ablation_grid.png";

/// Feeds each `(style image, mask image)` pair through the swapped path and measures where
/// the retina ends up. With `out_dir`, writes `ablation.json` and a 4-column grid image.
pub fn run_ablation<T: Float>(
    g: &Generator<T>,
    pairs: &[(Plane, Plane)],
    out_dir: Option<&Path>,
) -> Result<AblationOutputs> {
    let mut report = Vec::with_capacity(pairs.len());
    let mut images = Vec::with_capacity(pairs.len());
    for (index, (style, mask)) in pairs.iter().enumerate() {
        if (style.height, style.width) != (mask.height, mask.width) {
            return Err(Error::Shape(format!("pair {index}: images differ in size")));
        }
        let (swapped, plain, same) = no_grad(|| -> Result<_> {
            let (s, m) = (plane_var::<T>(style)?, plane_var::<T>(mask)?);
            let swapped = g.translate_ablation(&s, &m)?;
            let same = g.translate_ablation(&s, &s)?;
            let (plain, _) = g.translate(&s)?;
            let same = same.value().data() == plain.value().data();
            Ok((var_plane(&swapped), var_plane(&plain), same))
        })?;
        let row = |p: &Plane| -> Result<Option<f64>> { Ok(mean_row(&segment_plane(g, p)?, Class::Retina)) };
        let (style_row, mask_row, output_row) = (row(style)?, row(mask)?, row(&swapped)?);
        let follows_mask = match (style_row, mask_row, output_row) {
            (Some(s), Some(m), Some(o)) => (o - m).abs() < (o - s).abs(),
            _ => false,
        };
        report.push(AblationPair {
            index,
            style_row,
            mask_row,
            output_row,
            follows_mask,
            identical_inputs_match: same,
        });
        images.push([style.clone(), mask.clone(), swapped, plain]);
    }
    let follows = report.iter().filter(|p| p.follows_mask).count();
    let mut report = AblationReport {
        pairs: report,
        follows_mask: follows,
        grid: None,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        imageio::write_image(&dir.join(GRID_FILE), &grid(&images)?)?;
        report.grid = Some(GRID_FILE.into());
        let json = dir.join("ablation.json");
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
    }
    Ok(AblationOutputs { report, images })
}

/// Tiles rows of equally sized images with a 2-pixel dark gutter.
pub fn grid(rows: &[[Plane; 4]]) -> Result<Plane> {
    let first = rows
        .first()
        .ok_or_else(|| Error::Data("nothing to tile".into()))?;
    let (h, w) = (first[0].height, first[0].width);
    const GAP: usize = 2;
    let cols = 4;
    let gh = rows.len() * h + (rows.len() - 1) * GAP;
    let gw = cols * w + (cols - 1) * GAP;
    let mut out = Plane::filled(gh, gw, -1.0);
    for (r, row) in rows.iter().enumerate() {
        for (c, p) in row.iter().enumerate() {
            if (p.height, p.width) != (h, w) {
                return Err(Error::Shape("grid tiles differ in size".into()));
            }
            for y in 0..h {
                let oy = r * (h + GAP) + y;
                let ox = c * (w + GAP);
                out.data[oy * gw + ox..oy * gw + ox + w].copy_from_slice(&p.data[y * w..(y + 1) * w]);
            }
        }
    }
    Ok(out)
}

/// Loads the generator from a checkpoint written after at least one epoch.
pub fn trained_generator(path: &Path) -> Result<Generator<f32>> {
    let state = crate::trainer::load_checkpoint::<f32>(path)?;
    if state.epoch == 0 {
        return Err(Error::Checkpoint(format!(
            "{} holds an untrained model (epoch 0)",
            path.display()
        )));
    }
    Ok(state.nets.generator)
}
