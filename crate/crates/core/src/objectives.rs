//! Loss terms and operating-mode weights.

use std::fmt;
use std::str::FromStr;

use accut_tensor::{Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::SegMask;

/// Log clamp used by the segmentation cross-entropy.
pub const SEG_LOG_EPS: f64 = 1e-12;
/// Default softmax temperature for the contrastive loss.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
// Contrastive logits are bounded by 1/tau, so a much smaller clamp never bites in practice.
const NCE_LOG_EPS: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatingMode {
    /// Plain contrastive translation, no segmentation supervision.
    Cut,
    /// Segmentation supervised on source images.
    AccutS,
    /// Segmentation supervised on target images.
    AccutT,
    /// Both, at half weight each.
    AccutSt,
}

impl OperatingMode {
    pub const ALL: [OperatingMode; 4] = [
        OperatingMode::Cut,
        OperatingMode::AccutS,
        OperatingMode::AccutT,
        OperatingMode::AccutSt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperatingMode::Cut => "cut",
            OperatingMode::AccutS => "accut_s",
            OperatingMode::AccutT => "accut_t",
            OperatingMode::AccutSt => "accut_st",
        }
    }

    pub fn weights(self) -> LossWeights {
        mode_weights(self)
    }
}

impl fmt::Display for OperatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        OperatingMode::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::Param {
                name: "mode",
                message: format!("unknown mode `{s}` (expected cut, accut_s, accut_t or accut_st)"),
            })
    }
}

/// Coefficients of the five loss terms; the adversarial term always has weight 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub nce_source: f64,
    pub nce_target: f64,
    pub seg_source: f64,
    pub seg_target: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("nce_source", self.nce_source),
            ("nce_target", self.nce_target),
            ("seg_source", self.seg_source),
            ("seg_target", self.seg_target),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Param {
                    name: "loss weight",
                    message: format!("{name} must be finite and >= 0, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// True when any segmentation term is active.
    pub fn supervises_segmentation(&self) -> bool {
        self.seg_source > 0.0 || self.seg_target > 0.0
    }
}

pub fn mode_weights(mode: OperatingMode) -> LossWeights {
    let (seg_source, seg_target) = match mode {
        OperatingMode::Cut => (0.0, 0.0),
        OperatingMode::AccutS => (1.0, 0.0),
        OperatingMode::AccutT => (0.0, 1.0),
        OperatingMode::AccutSt => (0.5, 0.5),
    };
    LossWeights {
        nce_source: 1.0,
        nce_target: 1.0,
        seg_source,
        seg_target,
    }
}

/// Pixel-mean categorical cross-entropy of `[N, C, H, W]` logits against `N` masks.
pub fn segmentation_ce<T: Float>(logits: &Var<T>, masks: &[&SegMask]) -> Result<Var<T>> {
    let (n, c, h, w) = logits.value().dims4()?;
    if masks.len() != n {
        return Err(Error::Shape(format!("{n} logit maps but {} masks", masks.len())));
    }
    let mut targets = Vec::with_capacity(n * h * w);
    for m in masks {
        if (m.height, m.width) != (h, w) {
            return Err(Error::Shape(format!(
                "mask is {}x{}, logits are {h}x{w}",
                m.height, m.width
            )));
        }
        if let Some(&bad) = m.data.iter().find(|&&v| v as usize >= c) {
            return Err(Error::Data(format!("mask class {bad} is out of range for {c} classes")));
        }
        targets.extend(m.data.iter().map(|&v| v as usize));
    }
    Ok(logits.channels_to_rows()?.cross_entropy_rows(&targets, SEG_LOG_EPS)?)
}

fn same_shape<T: Float>(a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "real scores {:?} and fake scores {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Least-squares discriminator loss: `0.5 * mean((real - 1)^2) + 0.5 * mean(fake^2)`.
pub fn discriminator_loss<T: Float>(real: &Var<T>, fake: &Var<T>) -> Result<Var<T>> {
    same_shape(real, fake)?;
    let half = T::from_f64(0.5);
    let r = real.add_scalar(-T::one()).square().mean_all().scale(half);
    let f = fake.square().mean_all().scale(half);
    Ok(r.add(&f)?)
}

/// Least-squares generator loss: `mean((fake - 1)^2)`.
pub fn generator_adversarial_loss<T: Float>(fake: &Var<T>) -> Var<T> {
    fake.add_scalar(-T::one()).square().mean_all()
}

/// `(discriminator loss, generator loss)` for one pair of score maps.
pub fn gan_losses<T: Float>(real: &Var<T>, fake: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    Ok((discriminator_loss(real, fake)?, generator_adversarial_loss(fake)))
}

/// Patch contrastive loss. `queries[l]` and `keys[l]` are `[batch * P, E]` (batch-major,
/// row `i` of each image matched by position). Each query is classified against the keys
/// of its own image; keys receive no gradient. Returns the mean over layers of the mean
/// per-query cross-entropy.
pub fn patch_nce<T: Float>(
    queries: &[Var<T>],
    keys: &[Var<T>],
    temperature: f64,
    batch: usize,
) -> Result<Var<T>> {
    patch_nce_with(queries, keys, temperature, batch, true)
}

/// [`patch_nce`], optionally letting gradient reach the keys.
pub fn patch_nce_with<T: Float>(
    queries: &[Var<T>],
    keys: &[Var<T>],
    temperature: f64,
    batch: usize,
    detach_keys: bool,
) -> Result<Var<T>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Param {
            name: "temperature",
            message: format!("must be > 0, got {temperature}"),
        });
    }
    if queries.len() != keys.len() || queries.is_empty() {
        return Err(Error::Shape(format!(
            "{} query layers vs {} key layers",
            queries.len(),
            keys.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Shape("batch size is zero".into()));
    }
    let inv_tau = T::from_f64(1.0 / temperature);
    let mut layers = Vec::with_capacity(queries.len());
    for (l, (q, k)) in queries.iter().zip(keys).enumerate() {
        if q.shape() != k.shape() || q.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "layer {l}: queries {:?} vs keys {:?}",
                q.shape(),
                k.shape()
            )));
        }
        let rows = q.shape()[0];
        if rows == 0 || rows % batch != 0 {
            return Err(Error::Shape(format!(
                "layer {l}: {rows} rows cannot split into {batch} images"
            )));
        }
        let p = rows / batch;
        let k = if detach_keys { k.detach() } else { k.clone() };
        let targets: Vec<usize> = (0..p).collect();
        let mut per_image = Vec::with_capacity(batch);
        for b in 0..batch {
            let qb = q.narrow_rows(b * p, p)?;
            let kb = k.narrow_rows(b * p, p)?;
            let logits = qb.matmul_nt(&kb)?.scale(inv_tau);
            per_image.push(logits.cross_entropy_rows(&targets, NCE_LOG_EPS)?);
        }
        layers.push(accut_tensor::sum_vars(&per_image)?.scale(T::from_f64(1.0 / batch as f64)));
    }
    let n = layers.len();
    Ok(accut_tensor::sum_vars(&layers)?.scale(T::from_f64(1.0 / n as f64)))
}

/// Unweighted values of the five loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub gan: f64,
    pub nce_source: f64,
    pub nce_target: f64,
    pub seg_source: f64,
    pub seg_target: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("gan", self.gan),
            ("nce_source", self.nce_source),
            ("nce_target", self.nce_target),
            ("seg_source", self.seg_source),
            ("seg_target", self.seg_target),
        ]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gan: f64,
    pub nce_source: f64,
    pub nce_target: f64,
    pub seg_source: f64,
    pub seg_target: f64,
    pub total: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossBreakdown> {
    if let Some((name, _)) = c.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(name));
    }
    let total = c.gan
        + w.nce_source * c.nce_source
        + w.nce_target * c.nce_target
        + w.seg_source * c.seg_source
        + w.seg_target * c.seg_target;
    Ok(LossBreakdown {
        gan: c.gan,
        nce_source: c.nce_source,
        nce_target: c.nce_target,
        seg_source: c.seg_source,
        seg_target: c.seg_target,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in OperatingMode::ALL {
            assert_eq!(m.as_str().parse::<OperatingMode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert_eq!("ACCUT-S".parse::<OperatingMode>().unwrap(), OperatingMode::AccutS);
        assert!("accut".parse::<OperatingMode>().is_err());
    }

    #[test]
    fn negative_weight_is_rejected() {
        let mut w = mode_weights(OperatingMode::Cut);
        assert!(w.validate().is_ok());
        w.seg_target = -0.1;
        assert!(w.validate().is_err());
    }
}
