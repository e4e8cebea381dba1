use accut_tensor::{Float, Param, Var};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, IN_EPS};
use super::{join, Module, NetConfig};
use crate::error::{Error, Result};

const SLOPE: f64 = 0.2;

/// Fully convolutional patch discriminator: `disc_layers` stride-2 4x4 stages,
/// then two stride-1 4x4 convs, the last producing one score per patch.
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub stages: Vec<Conv<T>>,
}

impl<T: Float> Discriminator<T> {
    pub fn new(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let g = cfg.init_gain;
        let mut stages = Vec::with_capacity(cfg.disc_layers + 2);
        let mut cin = 1;
        let mut cout = cfg.disc_width;
        for i in 0..cfg.disc_layers {
            stages.push(Conv::new(cin, cout, 4, 2, g, rng).zero_padded(1));
            cin = cout;
            if i + 1 < cfg.disc_layers {
                cout = (cout * 2).min(cfg.disc_width * 8);
            }
        }
        let wide = (cin * 2).min(cfg.disc_width * 8);
        stages.push(Conv::new(cin, wide, 4, 1, g, rng).zero_padded(1));
        stages.push(Conv::new(wide, 1, 4, 1, g, rng).zero_padded(1));
        Self { stages }
    }

    /// Side length in pixels of the input region seen by one output score.
    pub fn receptive_field(&self) -> usize {
        self.stages
            .iter()
            .rev()
            .fold(1, |rf, c| (rf - 1) * c.stride + c.weight.value().shape()[2])
    }

    /// Raw (unbounded) patch scores, `[N, 1, h, w]`.
    pub fn forward(&self, image: &Var<T>) -> Result<Var<T>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(Error::Shape(format!(
                "expected a [N, 1, H, W] image, got {shape:?}"
            )));
        }
        let last = self.stages.len() - 1;
        let mut x = image.clone();
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(&x)?;
            if i == last {
                break;
            }
            if i > 0 {
                x = x.instance_norm(IN_EPS)?;
            }
            x = x.leaky_relu(T::from_f64(SLOPE));
        }
        Ok(x)
    }
}

impl<T: Float> Module<T> for Discriminator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, c) in self.stages.iter().enumerate() {
            c.visit(&join(prefix, &format!("stage{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, c) in self.stages.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("stage{i}")), f);
        }
    }
}
