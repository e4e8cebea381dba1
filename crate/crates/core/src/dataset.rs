//! On-disk phantom datasets: PNG files plus a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, Plane, SegMask};
use crate::phantom::{generate_sample, Domain, PhantomParams};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Image path, relative to the manifest's directory.
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<String>,
    pub domain: Domain,
    pub subject_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("manifest {}: {e}", path.display())))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    /// Loads `DIR/manifest.json` or a manifest file path.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            Self::load(&path.join(MANIFEST_FILE))
        } else {
            Self::load(path)
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.entries).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn select(&self, domain: Domain, splits: &[Split]) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.domain == domain && splits.contains(&e.split))
            .collect()
    }

    pub fn read_image(&self, entry: &ManifestEntry) -> Result<Plane> {
        imageio::read_image(&self.resolve(&entry.path))
    }

    pub fn read_mask(&self, entry: &ManifestEntry) -> Result<SegMask> {
        imageio::read_mask(&self.mask_file(entry)?)
    }

    pub fn mask_file(&self, entry: &ManifestEntry) -> Result<PathBuf> {
        entry
            .mask_path
            .as_deref()
            .map(|m| self.resolve(m))
            .ok_or_else(|| Error::Data(format!("{} has no mask", entry.path)))
    }
}

/// Assigns subjects to splits by largest remainder; every subject lands in exactly one split.
pub fn assign_splits(n_subjects: usize, ratios: (f64, f64, f64), seed: u64) -> Result<Vec<Split>> {
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|&v| !(v >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Param {
            name: "split_ratios",
            message: format!("{ratios:?} must be non-negative and sum to 1"),
        });
    }
    let exact: Vec<f64> = r.iter().map(|v| v * n_subjects as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .partial_cmp(&(exact[a] - exact[a].floor()))
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut missing = n_subjects - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[i] += 1;
        missing -= 1;
    }
    let mut subjects: Vec<usize> = (0..n_subjects).collect();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5157_11d5));
    let mut splits = vec![Split::Train; n_subjects];
    let mut it = subjects.into_iter();
    for (split, &count) in Split::ALL.iter().zip(&counts) {
        for s in it.by_ref().take(count) {
            splits[s] = *split;
        }
    }
    Ok(splits)
}

/// Per-sample seed derived from a base seed, subject and domain (splitmix64 finalizer).
pub fn derive_seed(base: u64, subject: u32, domain: Domain) -> u64 {
    let tag = match domain {
        Domain::Source => 0x0051_u64,
        Domain::Target => 0x0074_u64,
    };
    let mut z = base
        .wrapping_add((subject as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn dir_is_nonempty(dir: &Path) -> Result<bool> {
    match std::fs::read_dir(dir) {
        Ok(mut it) => Ok(it.next().is_some()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
        Err(e) => Err(Error::io(dir, e)),
    }
}

/// Generates `n_subjects` source and target phantoms into `out_dir` and writes the manifest.
pub fn make_manifest(
    n_subjects: usize,
    params_source: &PhantomParams,
    params_target: &PhantomParams,
    split_ratios: (f64, f64, f64),
    out_dir: &Path,
    overwrite: bool,
) -> Result<DatasetManifest> {
    if n_subjects == 0 {
        return Err(Error::Param {
            name: "n_subjects",
            message: "need at least one subject".into(),
        });
    }
    params_source.validate()?;
    params_target.validate()?;
    let splits = assign_splits(n_subjects, split_ratios, params_source.seed)?;
    if !overwrite && dir_is_nonempty(out_dir)? {
        return Err(Error::Data(format!(
            "output directory {} is not empty (pass overwrite to replace)",
            out_dir.display()
        )));
    }
    let mut entries = Vec::with_capacity(2 * n_subjects);
    for (domain, params) in [(Domain::Source, params_source), (Domain::Target, params_target)] {
        let dname = match domain {
            Domain::Source => "source",
            Domain::Target => "target",
        };
        for (sid, &split) in splits.iter().enumerate() {
            let sid = sid as u32;
            let p = params.clone().with_seed(derive_seed(params.seed, sid, domain));
            let sample = generate_sample(&p)?;
            let path = format!("{dname}/images/subject_{sid:03}.png");
            let mask_path = format!("{dname}/masks/subject_{sid:03}.png");
            imageio::write_image(&out_dir.join(&path), &sample.image)?;
            imageio::write_mask(&out_dir.join(&mask_path), &sample.mask)?;
            entries.push(ManifestEntry {
                path,
                mask_path: Some(mask_path),
                domain,
                subject_id: sid,
                split,
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}

/// Subject ids grouped by split, for disjointness checks.
pub fn subjects_by_split(entries: &[ManifestEntry]) -> BTreeMap<Split, Vec<u32>> {
    let mut map: BTreeMap<Split, Vec<u32>> = BTreeMap::new();
    for e in entries {
        let v = map.entry(e.split).or_default();
        if !v.contains(&e.subject_id) {
            v.push(e.subject_id);
        }
    }
    map
}
