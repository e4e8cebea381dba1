//! Synthetic two-domain retinal phantoms with 5-class ground truth.
//!
//! Each column is scanned top to bottom as vitreous, retina, choroid. A PED is a
//! localized downward bump of the retina/choroid boundary; an SRF is an elliptical
//! hypo-intense pocket inside the lower retina. The target domain applies a gamma
//! shift to the class intensities and multiplicative speckle on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{Plane, SegMask};

pub const NUM_CLASSES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Class {
    Vitreous = 0,
    Retina = 1,
    Choroid = 2,
    Srf = 3,
    Ped = 4,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [
        Class::Vitreous,
        Class::Retina,
        Class::Choroid,
        Class::Srf,
        Class::Ped,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Class::Vitreous => "vitreous",
            Class::Retina => "retina",
            Class::Choroid => "choroid",
            Class::Srf => "srf",
            Class::Ped => "ped",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStyle {
    SourceClean,
    TargetNoisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassIntensity {
    pub mean: f64,
    pub std: f64,
}

/// Mean/std intensity per class, in the normalized [-1, 1] range, indexed by class id.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IntensityProfile(pub [ClassIntensity; NUM_CLASSES]);

impl Default for IntensityProfile {
    fn default() -> Self {
        let c = |mean, std| ClassIntensity { mean, std };
        IntensityProfile([
            c(-0.75, 0.06),
            c(0.35, 0.10),
            c(-0.05, 0.08),
            c(-0.60, 0.05),
            c(-0.35, 0.06),
        ])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub image_height: usize,
    pub image_width: usize,
    /// Mean retina thickness is drawn uniformly from this range (pixels).
    pub retina_thickness_range: (f64, f64),
    /// Retina center row, as a fraction of the image height.
    pub retina_center_range: (f64, f64),
    /// Spectral decay exponent of the boundary undulation; larger is smoother.
    pub boundary_smoothness: f64,
    pub ped_probability: f64,
    pub srf_probability: f64,
    pub domain_style: DomainStyle,
    pub speckle_strength: f64,
    /// Exponent applied to class intensities (mapped to [0, 1]) in the target style.
    pub gamma: f64,
    pub intensity_profile: IntensityProfile,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self::source()
    }
}

impl PhantomParams {
    pub fn source() -> Self {
        Self {
            image_height: 64,
            image_width: 128,
            retina_thickness_range: (12.0, 18.0),
            retina_center_range: (0.38, 0.52),
            boundary_smoothness: 1.5,
            ped_probability: 0.4,
            srf_probability: 0.4,
            domain_style: DomainStyle::SourceClean,
            speckle_strength: 0.0,
            gamma: 1.0,
            intensity_profile: IntensityProfile::default(),
            seed: 0,
        }
    }

    /// Noisy target style with systematically thicker, lower retinas.
    pub fn target() -> Self {
        Self {
            retina_thickness_range: (18.0, 26.0),
            retina_center_range: (0.48, 0.62),
            domain_style: DomainStyle::TargetNoisy,
            speckle_strength: 0.45,
            gamma: 1.6,
            ..Self::source()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, message: String| Err(Error::Param { name, message });
        if self.image_height < 64 || self.image_width < 64 {
            return bad(
                "image_height/image_width",
                format!("need at least 64x64, got {}x{}", self.image_height, self.image_width),
            );
        }
        for (name, p) in [
            ("ped_probability", self.ped_probability),
            ("srf_probability", self.srf_probability),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, format!("{p} is not in [0, 1]"));
            }
        }
        let (lo, hi) = self.retina_thickness_range;
        if !(lo >= 2.0 && lo <= hi && hi <= 0.5 * self.image_height as f64) {
            return bad(
                "retina_thickness_range",
                format!("({lo}, {hi}) must satisfy 2 <= lo <= hi <= height/2"),
            );
        }
        let (clo, chi) = self.retina_center_range;
        if !(0.0 < clo && clo <= chi && chi < 1.0) {
            return bad("retina_center_range", format!("({clo}, {chi}) must lie in (0, 1)"));
        }
        if !(self.speckle_strength >= 0.0 && self.speckle_strength.is_finite()) {
            return bad("speckle_strength", format!("{} must be >= 0", self.speckle_strength));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad("gamma", format!("{} must be > 0", self.gamma));
        }
        if !(self.boundary_smoothness >= 0.0) {
            return bad("boundary_smoothness", "must be >= 0".into());
        }
        for ci in self.intensity_profile.0 {
            if !(-1.0..=1.0).contains(&ci.mean) || !(ci.std >= 0.0) {
                return bad("intensity_profile", format!("{ci:?} out of range"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Plane,
    pub mask: SegMask,
    pub domain: Domain,
    pub subject_id: u32,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Smooth periodic curve with peak amplitude at most `amplitude`.
fn smooth_curve(rng: &mut ChaCha8Rng, width: usize, amplitude: f64, decay: f64) -> Vec<f64> {
    const HARMONICS: usize = 4;
    let comps: Vec<(f64, f64)> = (1..=HARMONICS)
        .map(|k| {
            let amp = uniform(rng, (0.5, 1.0)) / (k as f64).powf(decay);
            let phase = uniform(rng, (0.0, std::f64::consts::TAU));
            (amp, phase)
        })
        .collect();
    let norm: f64 = (1..=HARMONICS).map(|k| 1.0 / (k as f64).powf(decay)).sum();
    (0..width)
        .map(|x| {
            let t = x as f64 / width as f64 * std::f64::consts::TAU;
            let s: f64 = comps
                .iter()
                .enumerate()
                .map(|(i, (a, p))| a * ((i + 1) as f64 * t + p).sin())
                .sum();
            amplitude * s / norm
        })
        .collect()
}

fn layout(params: &PhantomParams) -> SegMask {
    let (h, w) = (params.image_height, params.image_width);
    let hf = h as f64;
    let mut rng = rng_stream(params.seed, 0);

    let center = uniform(&mut rng, params.retina_center_range) * hf;
    let thickness = uniform(&mut rng, params.retina_thickness_range);
    let center_wave = smooth_curve(&mut rng, w, 0.08 * hf, params.boundary_smoothness);
    let thick_wave = smooth_curve(&mut rng, w, 0.25, params.boundary_smoothness);

    // Draw every lesion parameter unconditionally so the stream stays aligned.
    let ped_draw = rng.random::<f64>();
    let ped_x = uniform(&mut rng, (0.15, 0.85)) * w as f64;
    let ped_sigma = uniform(&mut rng, (0.04, 0.08)) * w as f64;
    let ped_height = uniform(&mut rng, (0.25, 0.5)) * thickness;
    let srf_draw = rng.random::<f64>();
    let srf_x = uniform(&mut rng, (0.2, 0.8)) * w as f64;
    let srf_a = uniform(&mut rng, (0.05, 0.1)) * w as f64;
    let srf_b = (0.3 * thickness).max(1.0);
    let has_ped = ped_draw < params.ped_probability;
    let has_srf = srf_draw < params.srf_probability;

    let mut top = vec![0usize; w];
    let mut bottom = vec![0usize; w];
    for x in 0..w {
        let t = thickness * (1.0 + thick_wave[x]);
        let c = center + center_wave[x];
        let ti = ((c - 0.5 * t).round().max(1.0) as usize).min(h - 3);
        let bi = ((c + 0.5 * t).round() as usize).clamp(ti + 1, h - 2);
        top[x] = ti;
        bottom[x] = bi;
    }

    let mut data = vec![Class::Choroid as u8; h * w];
    for x in 0..w {
        for y in 0..bottom[x] {
            data[y * w + x] = if y < top[x] {
                Class::Vitreous as u8
            } else {
                Class::Retina as u8
            };
        }
        if has_ped {
            let d = x as f64 - ped_x;
            let bump = ped_height * (-(d * d) / (2.0 * ped_sigma * ped_sigma)).exp();
            let rows = (bump.round() as usize).min(h - 1 - bottom[x]);
            for y in bottom[x]..bottom[x] + rows {
                data[y * w + x] = Class::Ped as u8;
            }
        }
    }
    if has_ped {
        // The peak column always carries at least one PED pixel.
        let px = (ped_x as usize).min(w - 1);
        data[bottom[px] * w + px] = Class::Ped as u8;
    }
    if has_srf {
        let sx = (srf_x as usize).min(w - 1);
        let lowest = bottom[sx] - 1;
        let sy = lowest.saturating_sub((0.6 * srf_b).floor() as usize).max(top[sx]);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - sx as f64) / srf_a;
                let dy = (y as f64 - sy as f64) / srf_b;
                if dx * dx + dy * dy <= 1.0 && data[y * w + x] == Class::Retina as u8 {
                    data[y * w + x] = Class::Srf as u8;
                }
            }
        }
    }
    SegMask::new(h, w, data)
}

fn render(params: &PhantomParams, mask: &SegMask) -> Plane {
    let profile = &params.intensity_profile.0;
    let mut texture = rng_stream(params.seed, 1);
    let mut speckle = rng_stream(params.seed, 2);
    let data = mask
        .data
        .iter()
        .map(|&c| {
            let ci = profile[c as usize];
            let n: f64 = texture.sample(StandardNormal);
            let v = match params.domain_style {
                DomainStyle::SourceClean => ci.mean + ci.std * n,
                DomainStyle::TargetNoisy => {
                    let m: f64 = speckle.sample(StandardNormal);
                    let base = ((ci.mean + 1.0) * 0.5).powf(params.gamma);
                    let u = (base + 0.5 * ci.std * n) * (1.0 + params.speckle_strength * m).max(0.0);
                    2.0 * u - 1.0
                }
            };
            v.clamp(-1.0, 1.0) as f32
        })
        .collect();
    Plane::new(mask.height, mask.width, data)
}

/// Generates one phantom. Pure function of `params` (including its seed).
pub fn generate_sample(params: &PhantomParams) -> Result<Sample> {
    params.validate()?;
    let mask = layout(params);
    let image = render(params, &mask);
    let domain = match params.domain_style {
        DomainStyle::SourceClean => Domain::Source,
        DomainStyle::TargetNoisy => Domain::Target,
    };
    Ok(Sample {
        image,
        mask,
        domain,
        subject_id: 0,
    })
}

/// Mean absolute 4-neighbour Laplacian over interior pixels.
pub fn laplacian_energy(plane: &Plane) -> f64 {
    let (h, w) = (plane.height, plane.width);
    let mut acc = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = plane.at(y, x) as f64;
            let lap = plane.at(y - 1, x) as f64
                + plane.at(y + 1, x) as f64
                + plane.at(y, x - 1) as f64
                + plane.at(y, x + 1) as f64
                - 4.0 * c;
            acc += lap.abs();
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}
