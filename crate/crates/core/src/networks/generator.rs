use accut_tensor::{cat_channels, Float, Param, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ConvTranspose, ResBlock, IN_EPS};
use super::{join, Module, NetConfig};
use crate::error::{Error, Result};

/// A named feature map.
#[derive(Clone, Debug)]
pub struct Tap<T: Float> {
    pub name: &'static str,
    pub feature: Var<T>,
}

/// Ordered multi-resolution feature maps, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Float> {
    pub taps: Vec<Tap<T>>,
}

impl<T: Float> FeaturePyramid<T> {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn features(&self) -> Vec<Var<T>> {
        self.taps.iter().map(|t| t.feature.clone()).collect()
    }

    /// `(height, width)` of each tap.
    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.taps
            .iter()
            .map(|t| (t.feature.shape()[2], t.feature.shape()[3]))
            .collect()
    }

    /// Same values, no gradient path back through any tap.
    pub fn detached(&self) -> Self {
        Self {
            taps: self
                .taps
                .iter()
                .map(|t| Tap {
                    name: t.name,
                    feature: t.feature.detach(),
                })
                .collect(),
        }
    }
}

fn conv_in_relu<T: Float>(conv: &Conv<T>, x: &Var<T>) -> Result<Var<T>> {
    Ok(conv.forward(x)?.instance_norm(IN_EPS)?.relu())
}

fn up_in_relu<T: Float>(up: &ConvTranspose<T>, x: &Var<T>) -> Result<Var<T>> {
    Ok(up.forward(x)?.instance_norm(IN_EPS)?.relu())
}

/// Shared encoder: 7x7 stem, two stride-2 convs, four residual blocks.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub stem: Conv<T>,
    pub down1: Conv<T>,
    pub down2: Conv<T>,
    pub blocks: Vec<ResBlock<T>>,
}

impl<T: Float> Encoder<T> {
    pub const TAP_NAMES: [&'static str; 5] = ["stem", "down1", "down2", "res2", "res4"];

    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, g) = (cfg.width, cfg.init_gain);
        Self {
            stem: Conv::new(1, w, 7, 1, g, rng).reflect_padded(3),
            down1: Conv::new(w, 2 * w, 3, 2, g, rng).zero_padded(1),
            down2: Conv::new(2 * w, 4 * w, 3, 2, g, rng).zero_padded(1),
            blocks: (0..4).map(|_| ResBlock::new(4 * w, g, rng)).collect(),
        }
    }

    /// Returns the bottleneck and the five contrastive taps
    /// (stem, both downsampling convs, residual blocks 2 and 4).
    pub fn forward(&self, image: &Var<T>) -> Result<(Var<T>, FeaturePyramid<T>)> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "expected a [N, 1, H, W] image, got {shape:?}"
            )));
        }
        if shape[2] % 4 != 0 || shape[3] % 4 != 0 {
            return Err(Error::Shape(format!(
                "image size {}x{} is not divisible by 4",
                shape[2], shape[3]
            )));
        }
        let mut taps = Vec::with_capacity(5);
        let x = conv_in_relu(&self.stem, image)?;
        taps.push(Tap { name: "stem", feature: x.clone() });
        let x = conv_in_relu(&self.down1, &x)?;
        taps.push(Tap { name: "down1", feature: x.clone() });
        let mut x = conv_in_relu(&self.down2, &x)?;
        taps.push(Tap { name: "down2", feature: x.clone() });
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if i == 1 {
                taps.push(Tap { name: "res2", feature: x.clone() });
            }
        }
        taps.push(Tap { name: "res4", feature: x.clone() });
        Ok((x, FeaturePyramid { taps }))
    }
}

impl<T: Float> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.down1.visit(&join(prefix, "down1"), f);
        self.down2.visit(&join(prefix, "down2"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.down1.visit_mut(&join(prefix, "down1"), f);
        self.down2.visit_mut(&join(prefix, "down2"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// Segmentation decoder: two residual blocks, two upsampling stages, 1x1 classifier.
#[derive(Clone, Debug)]
pub struct MaskDecoder<T> {
    pub blocks: Vec<ResBlock<T>>,
    pub up1: ConvTranspose<T>,
    pub up2: ConvTranspose<T>,
    pub classifier: Conv<T>,
}

impl<T: Float> MaskDecoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, g) = (cfg.width, cfg.init_gain);
        Self {
            blocks: (0..2).map(|_| ResBlock::new(4 * w, g, rng)).collect(),
            up1: ConvTranspose::new(4 * w, 2 * w, g, rng),
            up2: ConvTranspose::new(2 * w, w, g, rng),
            classifier: Conv::new(w, cfg.classes, 1, 1, g, rng),
        }
    }

    /// Per-pixel class logits plus the post-activation output of each stage
    /// (bottleneck, half and full resolution), which condition the style decoder.
    pub fn forward(&self, bottleneck: &Var<T>) -> Result<(Var<T>, FeaturePyramid<T>)> {
        let mut x = bottleneck.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let s0 = x;
        let s1 = up_in_relu(&self.up1, &s0)?;
        let s2 = up_in_relu(&self.up2, &s1)?;
        let logits = self.classifier.forward(&s2)?;
        let taps = vec![
            Tap { name: "mask_res", feature: s0 },
            Tap { name: "mask_up1", feature: s1 },
            Tap { name: "mask_up2", feature: s2 },
        ];
        Ok((logits, FeaturePyramid { taps }))
    }
}

impl<T: Float> Module<T> for MaskDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.up1.visit(&join(prefix, "up1"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Style decoder. Each convolution stage after the residual blocks consumes its own
/// features concatenated with the same-resolution mask-decoder features.
#[derive(Clone, Debug)]
pub struct StyleDecoder<T> {
    pub blocks: Vec<ResBlock<T>>,
    pub up1: ConvTranspose<T>,
    pub up2: ConvTranspose<T>,
    pub out: Conv<T>,
}

impl<T: Float> StyleDecoder<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let (w, g) = (cfg.width, cfg.init_gain);
        Self {
            blocks: (0..2).map(|_| ResBlock::new(4 * w, g, rng)).collect(),
            up1: ConvTranspose::new(4 * w + 4 * w, 2 * w, g, rng),
            up2: ConvTranspose::new(2 * w + 2 * w, w, g, rng),
            out: Conv::new(w + w, 1, 7, 1, g, rng).reflect_padded(3),
        }
    }

    pub fn forward(
        &self,
        bottleneck: &Var<T>,
        mask_taps: &FeaturePyramid<T>,
        sever_mask_gradient: bool,
    ) -> Result<Var<T>> {
        if mask_taps.len() != 3 {
            return Err(Error::Shape(format!(
                "style decoder needs 3 mask features, got {}",
                mask_taps.len()
            )));
        }
        let severed;
        let mask_taps = if sever_mask_gradient {
            severed = mask_taps.detached();
            &severed
        } else {
            mask_taps
        };
        let m = mask_taps.features();
        let fuse = |own: &Var<T>, mask: &Var<T>| -> Result<Var<T>> {
            let (a, b) = (own.shape(), mask.shape());
            if a[0] != b[0] || a[2..] != b[2..] {
                return Err(Error::Shape(format!(
                    "mask feature {b:?} does not match style feature {a:?}"
                )));
            }
            Ok(cat_channels(&[own.clone(), mask.clone()])?)
        };
        let mut x = bottleneck.clone();
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = up_in_relu(&self.up1, &fuse(&x, &m[0])?)?;
        let x = up_in_relu(&self.up2, &fuse(&x, &m[1])?)?;
        Ok(self.out.forward(&fuse(&x, &m[2])?)?.tanh())
    }
}

impl<T: Float> Module<T> for StyleDecoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.up1.visit(&join(prefix, "up1"), f);
        self.up2.visit(&join(prefix, "up2"), f);
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.up1.visit_mut(&join(prefix, "up1"), f);
        self.up2.visit_mut(&join(prefix, "up2"), f);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Output of a full translation pass.
#[derive(Clone, Debug)]
pub struct Translation<T: Float> {
    pub fake: Var<T>,
    pub mask_logits: Var<T>,
    pub bottleneck: Var<T>,
    pub taps: FeaturePyramid<T>,
}

#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub encoder: Encoder<T>,
    pub mask_decoder: MaskDecoder<T>,
    pub style_decoder: StyleDecoder<T>,
}

impl<T: Float> Generator<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        Self {
            encoder: Encoder::new(cfg, rng),
            mask_decoder: MaskDecoder::new(cfg, rng),
            style_decoder: StyleDecoder::new(cfg, rng),
        }
    }

    pub fn encode(&self, image: &Var<T>) -> Result<(Var<T>, FeaturePyramid<T>)> {
        self.encoder.forward(image)
    }

    pub fn decode_mask(&self, bottleneck: &Var<T>) -> Result<(Var<T>, FeaturePyramid<T>)> {
        self.mask_decoder.forward(bottleneck)
    }

    pub fn decode_style(
        &self,
        bottleneck: &Var<T>,
        mask_taps: &FeaturePyramid<T>,
        sever_mask_gradient: bool,
    ) -> Result<Var<T>> {
        self.style_decoder.forward(bottleneck, mask_taps, sever_mask_gradient)
    }

    /// encode, decode_mask, then decode_style with the mask gradient severed.
    pub fn translate_full(&self, image: &Var<T>) -> Result<Translation<T>> {
        let (bottleneck, taps) = self.encode(image)?;
        let (mask_logits, mask_taps) = self.decode_mask(&bottleneck)?;
        let fake = self.decode_style(&bottleneck, &mask_taps, true)?;
        Ok(Translation {
            fake,
            mask_logits,
            bottleneck,
            taps,
        })
    }

    pub fn translate(&self, image: &Var<T>) -> Result<(Var<T>, Var<T>)> {
        let t = self.translate_full(image)?;
        Ok((t.fake, t.mask_logits))
    }

    /// Style path from `image_style`, anatomical conditioning from `image_mask`.
    pub fn translate_ablation(&self, image_style: &Var<T>, image_mask: &Var<T>) -> Result<Var<T>> {
        if image_style.shape() != image_mask.shape() {
            return Err(Error::Shape(format!(
                "ablation inputs differ in shape: {:?} vs {:?}",
                image_style.shape(),
                image_mask.shape()
            )));
        }
        let (style_bottleneck, _) = self.encode(image_style)?;
        let (mask_bottleneck, _) = self.encode(image_mask)?;
        let (_, mask_taps) = self.decode_mask(&mask_bottleneck)?;
        self.decode_style(&style_bottleneck, &mask_taps, true)
    }
}

impl<T: Float> Module<T> for Generator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.mask_decoder.visit(&join(prefix, "mask_decoder"), f);
        self.style_decoder.visit(&join(prefix, "style_decoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.mask_decoder.visit_mut(&join(prefix, "mask_decoder"), f);
        self.style_decoder.visit_mut(&join(prefix, "style_decoder"), f);
    }
}
