//! Experiment configuration: a TOML file with five sections, merged over defaults and
//! validated strictly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::{AbsentClass, ExtractorSpec};
use crate::networks::NetConfig;
use crate::phantom::PhantomParams;
use crate::trainer::{LossConfig, TrainConfig};
use crate::uda::UdaConfig;

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_subjects: usize,
    /// Train / val / test fractions over subjects.
    pub split_ratios: [f64; 3],
    pub source: PhantomParams,
    pub target: PhantomParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_subjects: 38,
            split_ratios: [0.6, 0.2, 0.2],
            source: PhantomParams::source(),
            target: PhantomParams::target(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub fid: ExtractorSpec,
    pub uda: UdaConfig,
    pub absent_class: AbsentClass,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: NetConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A validated configuration with its canonical TOML text and hash.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub hash: String,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_subjects == 0 {
            return Err(Error::config("data.n_subjects", "must be positive"));
        }
        let s: f64 = d.split_ratios.iter().sum();
        if d.split_ratios.iter().any(|&r| !(r >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split_ratios", "must be non-negative and sum to 1"));
        }
        for (key, p) in [("data.source", &d.source), ("data.target", &d.target)] {
            p.validate().map_err(|e| Error::config(key, e.to_string()))?;
        }
        if [d.source.image_height, d.source.image_width] != [d.target.image_height, d.target.image_width] {
            return Err(Error::config("data.target", "source and target image sizes differ"));
        }
        if self.train.image_size != [d.source.image_height, d.source.image_width] {
            return Err(Error::config(
                "train.image_size",
                format!(
                    "{:?} differs from the phantom size {}x{}",
                    self.train.image_size, d.source.image_height, d.source.image_width
                ),
            ));
        }
        let m = &self.model;
        for (key, v) in [
            ("model.width", m.width),
            ("model.classes", m.classes),
            ("model.disc_width", m.disc_width),
            ("model.disc_layers", m.disc_layers),
            ("model.embed_dim", m.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if m.classes != crate::phantom::NUM_CLASSES {
            return Err(Error::config(
                "model.classes",
                format!("phantom masks have {} classes", crate::phantom::NUM_CLASSES),
            ));
        }
        if !(m.init_gain > 0.0 && m.init_gain.is_finite()) {
            return Err(Error::config("model.init_gain", "must be positive"));
        }
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.uda.validate()?;
        let ExtractorSpec::RandomConv { input_channels, widths, .. } = &self.eval.fid;
        if *input_channels == 0 || widths.contains(&0) {
            return Err(Error::config("eval.fid", "channel counts must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes to JSON");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Overlays `user` on `base`. Tables merge key by key, except tagged tables (with a
/// `kind` key), which replace the default wholesale.
fn merge(base: &mut toml::Value, user: toml::Value) {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                match b.get_mut(&k) {
                    Some(existing) if existing.is_table() && v.is_table() && !v.as_table().unwrap().contains_key("kind") => {
                        merge(existing, v)
                    }
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, u) => *b = u,
    }
}

pub fn parse_config_str(text: &str) -> Result<LoadedConfig> {
    let user: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string().trim_end()))?;
    let mut merged = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
    merge(&mut merged, toml::Value::Table(user));
    let config: ExperimentConfig = serde_path_to_error::deserialize(merged).map_err(|e| {
        let key = e.path().to_string();
        Error::config(key, e.into_inner().to_string())
    })?;
    config.validate()?;
    let hash = config.hash();
    Ok(LoadedConfig { config, hash })
}

pub fn parse_config(path: &Path) -> Result<LoadedConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    parse_config_str(&text)
}

impl LoadedConfig {
    pub fn defaults() -> Self {
        let config = ExperimentConfig::default();
        let hash = config.hash();
        Self { config, hash }
    }

    /// Writes the resolved configuration into `dir` and returns its path.
    pub fn write_into(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let text = format!("# config hash {}\n{}", self.hash, self.config.to_toml());
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
