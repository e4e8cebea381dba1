use accut_tensor::{Array, Float, Param, Result, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{join, Module};

fn xavier<T: Float>(shape: &[usize], fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Param<T> {
    let std = gain * (2.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Param::new(Array::from_vec(shape.to_vec(), data).expect("init shape"))
}

fn zeros<T: Float>(n: usize) -> Param<T> {
    Param::new(Array::zeros(vec![n]))
}

/// Convolution with optional reflection padding (applied before a zero-padded conv).
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub stride: usize,
    pub zero_pad: usize,
    pub reflect_pad: usize,
}

impl<T: Float> Conv<T> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: xavier(&[cout, cin, k, k], cin * k * k, cout * k * k, gain, rng),
            bias: zeros(cout),
            stride,
            zero_pad: 0,
            reflect_pad: 0,
        }
    }

    pub fn zero_padded(mut self, pad: usize) -> Self {
        self.zero_pad = pad;
        self
    }

    pub fn reflect_padded(mut self, pad: usize) -> Self {
        self.reflect_pad = pad;
        self
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let padded;
        let input = if self.reflect_pad > 0 {
            padded = x.reflect_pad(self.reflect_pad)?;
            &padded
        } else {
            x
        };
        input.conv2d(&self.weight.var(), Some(&self.bias.var()), self.stride, self.zero_pad)
    }
}

impl<T: Float> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// 3x3 stride-2 transposed convolution that exactly doubles the spatial size.
#[derive(Clone, Debug)]
pub struct ConvTranspose<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> ConvTranspose<T> {
    pub fn new(cin: usize, cout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: xavier(&[cin, cout, 3, 3], cout * 9, cin * 9, gain, rng),
            bias: zeros(cout),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.conv_transpose2d(&self.weight.var(), Some(&self.bias.var()), 2, 1, 1)
    }
}

impl<T: Float> Module<T> for ConvTranspose<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub(crate) const IN_EPS: f64 = 1e-5;

/// `x + IN(conv(relu(IN(conv(x)))))` with reflection padding.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

impl<T: Float> ResBlock<T> {
    pub fn new(channels: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv1: Conv::new(channels, channels, 3, 1, gain, rng).reflect_padded(1),
            conv2: Conv::new(channels, channels, 3, 1, gain, rng).reflect_padded(1),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv1.forward(x)?.instance_norm(IN_EPS)?.relu();
        let y = self.conv2.forward(&y)?.instance_norm(IN_EPS)?;
        x.add(&y)
    }
}

impl<T: Float> Module<T> for ResBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(fin: usize, fout: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: xavier(&[fout, fin], fin, fout, gain, rng),
            bias: zeros(fout),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        x.linear(&self.weight.var(), Some(&self.bias.var()))
    }
}

impl<T: Float> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}
