use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use accut_tensor::{Array, Float};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::adam::{Adam, Moments};
use super::TrainState;
use crate::error::{Error, Result};
use crate::networks::{Module, NetConfig, Networks};
use crate::objectives::OperatingMode;

const MAGIC: &[u8; 8] = b"ACCUTCKP";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Position of a random stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("bad rng {what} in checkpoint"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: OperatingMode,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    pub dtype: String,
    pub net: NetConfig,
    pub rng: RngState,
    pub optimizer_steps: BTreeMap<String, u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

fn optimizers<T>(state: &TrainState<T>) -> [(&'static str, &Adam<T>); 3] {
    [
        ("disc", &state.disc_opt),
        ("gen", &state.gen_opt),
        ("seg", &state.seg_opt),
    ]
}

fn push_values<T: Float>(out: &mut Vec<u8>, values: &[T]) {
    if T::NAME == "f32" {
        for v in values {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    } else {
        for v in values {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
}

fn read_values<T: Float>(bytes: &[u8]) -> Vec<T> {
    if T::NAME == "f32" {
        bytes
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect()
    } else {
        bytes
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect()
    }
}

pub fn metadata<T: Float>(state: &TrainState<T>) -> CheckpointMeta {
    CheckpointMeta {
        mode: state.mode,
        epoch: state.epoch,
        step: state.step,
        seed: state.seed,
        config_hash: state.config_hash.clone(),
        dtype: T::NAME.to_string(),
        net: state.net_config.clone(),
        rng: RngState::capture(&state.rng),
        optimizer_steps: optimizers(state)
            .iter()
            .map(|(k, o)| (k.to_string(), o.steps))
            .collect(),
    }
}

/// Serializes the full training state. The file is written next to `path` and renamed
/// into place, so readers never see a partial checkpoint.
pub fn save_checkpoint<T: Float>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0usize;
    let mut add = |name: String, shape: Vec<usize>, values: &[T]| {
        tensors.push(TensorEntry {
            name,
            shape,
            offset,
        });
        offset += values.len();
        push_values(&mut payload, values);
    };
    state.nets.visit("", &mut |name, p| {
        add(format!("param/{name}"), p.value().shape().to_vec(), p.value().data());
    });
    for (opt_name, opt) in optimizers(state) {
        for (name, m) in &opt.moments {
            add(format!("adam/{opt_name}/first/{name}"), vec![m.first.len()], &m.first);
            add(format!("adam/{opt_name}/second/{name}"), vec![m.second.len()], &m.second);
        }
    }
    let header = serde_json::to_vec(&Header {
        meta: metadata(state),
        tensors,
    })
    .map_err(|e| Error::Checkpoint(format!("header encoding failed: {e}")))?;

    let mut bytes = Vec::with_capacity(header.len() + payload.len() + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(digest.as_slice());

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Decoded {
    header: Header,
    payload: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |what: &str| Error::Checkpoint(format!("{}: {what}", path.display()));
    if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != stored {
        return Err(corrupt("integrity check failed (checksum mismatch)"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(corrupt(&format!("unsupported format version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(hlen).filter(|&e| e <= body.len());
    let header_end = header_end.ok_or_else(|| corrupt("truncated header"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    Ok(Decoded {
        header,
        payload: body[header_end..].to_vec(),
    })
}

/// Reads only the metadata record.
pub fn read_metadata(path: &Path) -> Result<CheckpointMeta> {
    Ok(decode(path)?.header.meta)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<TrainState<T>> {
    let Decoded { header, payload } = decode(path)?;
    let meta = header.meta;
    if meta.dtype != T::NAME {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, expected {}",
            meta.dtype,
            T::NAME
        )));
    }
    let width = if T::NAME == "f32" { 4 } else { 8 };
    let mut table: BTreeMap<String, Array<T>> = BTreeMap::new();
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let (start, end) = (t.offset * width, (t.offset + len) * width);
        if end > payload.len() {
            return Err(Error::Checkpoint(format!("tensor `{}` runs past the payload", t.name)));
        }
        let arr = Array::from_vec(t.shape.clone(), read_values(&payload[start..end]))?;
        table.insert(t.name.clone(), arr);
    }

    let mut nets = Networks::<T>::new(&meta.net, &mut ChaCha8Rng::seed_from_u64(0));
    let mut missing = None;
    nets.visit_mut("", &mut |name, p| match table.remove(&format!("param/{name}")) {
        Some(arr) if arr.shape() == p.value().shape() => *p.value_mut() = arr,
        _ => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!(
            "parameter `{name}` is missing or has the wrong shape"
        )));
    }

    let mut state = TrainState::new(&meta.net, meta.mode, meta.seed, meta.config_hash.clone());
    state.nets = nets;
    state.epoch = meta.epoch;
    state.step = meta.step;
    state.rng = meta.rng.restore()?;
    for (opt_name, opt) in [
        ("disc", &mut state.disc_opt),
        ("gen", &mut state.gen_opt),
        ("seg", &mut state.seg_opt),
    ] {
        opt.steps = meta.optimizer_steps.get(opt_name).copied().unwrap_or(0);
        let prefix = format!("adam/{opt_name}/first/");
        let names: Vec<String> = table
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix).map(str::to_string))
            .collect();
        for name in names {
            let first = table.remove(&format!("{prefix}{name}"));
            let second = table.remove(&format!("adam/{opt_name}/second/{name}"));
            let (Some(first), Some(second)) = (first, second) else {
                return Err(Error::Checkpoint(format!("incomplete moments for `{name}`")));
            };
            opt.moments.insert(
                name,
                Moments {
                    first: first.into_vec(),
                    second: second.into_vec(),
                },
            );
        }
    }
    Ok(state)
}

/// Human-readable warnings when a checkpoint does not match the requested setup.
pub fn mode_warnings(meta: &CheckpointMeta, mode: OperatingMode) -> Vec<String> {
    let mut out = Vec::new();
    if meta.mode != mode {
        out.push(format!(
            "checkpoint was trained in mode {} but the configuration requests {}",
            meta.mode, mode
        ));
    }
    for w in &out {
        log::warn!("{w}");
    }
    out
}
