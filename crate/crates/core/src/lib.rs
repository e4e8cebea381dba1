//! Anatomically conditioned contrastive unpaired image-to-image translation.
//!
//! A shared encoder feeds two decoders: a segmentation decoder whose multi-resolution
//! features are concatenated into a style decoder. Style losses never reach the
//! segmentation decoder. The crate also ships the phantom data generator, the
//! evaluation metrics (Dice, FID, mask-swap ablation) and the downstream
//! domain-adaptation harness.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics;
pub mod networks;
pub mod objectives;
pub mod phantom;
pub mod trainer;
pub mod uda;

pub use error::{Error, Result};
