//! Generator, discriminator and projection head.

mod discriminator;
mod generator;
mod head;
mod layers;

pub use discriminator::Discriminator;
pub use generator::{Encoder, FeaturePyramid, Generator, MaskDecoder, StyleDecoder, Tap, Translation};
pub use head::{Projection, ProjectionHead};
pub use layers::{Conv, ConvTranspose, Linear, ResBlock};

use accut_tensor::{Float, Param};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Anything owning named parameters.
pub trait Module<T: Float> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn param_count<T: Float>(m: &impl Module<T>) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, p| n += p.value().len());
    n
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Generator base width; the bottleneck has 4x this many channels.
    pub width: usize,
    pub classes: usize,
    pub disc_width: usize,
    /// Number of stride-2 stages in the patch discriminator.
    pub disc_layers: usize,
    pub embed_dim: usize,
    /// Gain of the Xavier-normal initialization.
    pub init_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 8,
            classes: crate::phantom::NUM_CLASSES,
            disc_width: 8,
            disc_layers: 2,
            embed_dim: 256,
            init_gain: 0.02,
        }
    }
}

impl NetConfig {
    /// Channel widths of the encoder taps used for the contrastive loss.
    pub fn tap_channels(&self) -> Vec<usize> {
        let w = self.width;
        vec![w, 2 * w, 4 * w, 4 * w, 4 * w]
    }
}

/// The four trainable networks, owned together.
#[derive(Clone, Debug)]
pub struct Networks<T> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    pub head: ProjectionHead<T>,
}

/// Parameter groups, by their role in the training step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    StyleDecoder,
    MaskDecoder,
    Discriminator,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::StyleDecoder,
        ParamGroup::MaskDecoder,
        ParamGroup::Discriminator,
        ParamGroup::Head,
    ];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::StyleDecoder => "style_decoder",
            ParamGroup::MaskDecoder => "mask_decoder",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Head => "head",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        let first = name.split('.').next()?;
        ParamGroup::ALL.into_iter().find(|g| g.prefix() == first)
    }
}

impl<T: Float> Networks<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            generator: Generator::new(cfg, rng),
            discriminator: Discriminator::new(cfg, rng),
            head: ProjectionHead::new(&cfg.tap_channels(), cfg.embed_dim, cfg.init_gain, rng),
        }
    }
}

impl<T: Float> Module<T> for Networks<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.generator.visit(prefix, f);
        self.discriminator.visit(&join(prefix, "discriminator"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.generator.visit_mut(prefix, f);
        self.discriminator.visit_mut(&join(prefix, "discriminator"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Snapshot of parameter values by name, for before/after comparisons.
pub fn snapshot<T: Float>(m: &impl Module<T>) -> std::collections::BTreeMap<String, Vec<T>> {
    let mut out = std::collections::BTreeMap::new();
    m.visit("", &mut |name, p| {
        out.insert(name.to_string(), p.value().data().to_vec());
    });
    out
}
