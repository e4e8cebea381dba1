use accut_tensor::{Float, Param, Var};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::{join, Module};
use crate::error::{Error, Result};

/// One two-layer MLP per encoder tap, mapping sampled feature vectors
/// to unit-norm embeddings.
#[derive(Clone, Debug)]
pub struct ProjectionHead<T> {
    pub mlps: Vec<(Linear<T>, Linear<T>)>,
    pub embed_dim: usize,
}

/// Embeddings of one tap: `[batch * patches, embed_dim]`, batch-major.
#[derive(Clone, Debug)]
pub struct Projection<T: Float> {
    pub embeddings: Vec<Var<T>>,
    /// Flat spatial indices sampled per tap (shared by every image in the batch).
    pub ids: Vec<Vec<usize>>,
}

impl<T: Float> ProjectionHead<T> {
    pub fn new(tap_channels: &[usize], embed_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mlps = tap_channels
            .iter()
            .map(|&c| {
                (
                    Linear::new(c, embed_dim, gain, rng),
                    Linear::new(embed_dim, embed_dim, gain, rng),
                )
            })
            .collect();
        Self { mlps, embed_dim }
    }

    /// Samples `num_patches` distinct locations per tap (or reuses `ids`) and embeds
    /// the feature vector at each one.
    pub fn project(
        &self,
        taps: &[Var<T>],
        num_patches: usize,
        ids: Option<&[Vec<usize>]>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Projection<T>> {
        if taps.len() != self.mlps.len() {
            return Err(Error::Shape(format!(
                "head has {} branches but got {} feature maps",
                self.mlps.len(),
                taps.len()
            )));
        }
        if let Some(ids) = ids {
            if ids.len() != taps.len() {
                return Err(Error::Shape(format!(
                    "got {} id lists for {} feature maps",
                    ids.len(),
                    taps.len()
                )));
            }
        }
        let mut embeddings = Vec::with_capacity(taps.len());
        let mut used = Vec::with_capacity(taps.len());
        for (l, (tap, (fc1, fc2))) in taps.iter().zip(&self.mlps).enumerate() {
            let shape = tap.shape();
            if shape.len() != 4 {
                return Err(Error::Shape(format!("feature map {l} has shape {shape:?}")));
            }
            let hw = shape[2] * shape[3];
            let positions = match ids {
                Some(ids) => ids[l].clone(),
                None => {
                    if num_patches > hw {
                        return Err(Error::Shape(format!(
                            "cannot sample {num_patches} patches from a {}x{} feature map",
                            shape[2], shape[3]
                        )));
                    }
                    sample(rng, hw, num_patches).into_vec()
                }
            };
            let rows = tap.select_positions(&positions)?;
            let z = fc2.forward(&fc1.forward(&rows)?.relu())?.l2_normalize_rows()?;
            embeddings.push(z);
            used.push(positions);
        }
        Ok(Projection { embeddings, ids: used })
    }
}

impl<T: Float> Module<T> for ProjectionHead<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, (a, b)) in self.mlps.iter().enumerate() {
            a.visit(&join(prefix, &format!("mlp{i}.fc1")), f);
            b.visit(&join(prefix, &format!("mlp{i}.fc2")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, (a, b)) in self.mlps.iter_mut().enumerate() {
            a.visit_mut(&join(prefix, &format!("mlp{i}.fc1")), f);
            b.visit_mut(&join(prefix, &format!("mlp{i}.fc2")), f);
        }
    }
}
