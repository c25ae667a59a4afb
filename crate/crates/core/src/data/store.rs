//! On-disk dataset: one record file per scene plus `manifest.toml`.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{decode_scene, encode_scene, Dataset, DatasetConfig, GeneratorConfig, Scene, Split};
use crate::error::{Error, Result};

/// Bumped whenever the generator's output for a given seed changes.
pub const GENERATOR_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub file: String,
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub created_unix: u64,
    pub generator: GeneratorConfig,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| Error::malformed(&path, e.to_string()))?;
        if m.records.len() != m.n_train + m.n_val {
            return Err(Error::malformed(&path, format!("{} records for counts {}+{}", m.records.len(), m.n_train, m.n_val)));
        }
        Ok(m)
    }

    /// Everything except the creation time, for comparing two generations.
    pub fn checksums(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.sha256.as_str()).collect()
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn record_name(split: Split, index: usize) -> String {
    match split {
        Split::Train => format!("train_{index:05}.lmxs"),
        Split::Val => format!("val_{index:05}.lmxs"),
    }
}

/// Generates the dataset and writes it to `dir`. A non-empty `dir` is
/// refused unless `force` is set, in which case old record files are removed.
pub fn write_dataset(config: &DatasetConfig, dir: &Path, force: bool) -> Result<Manifest> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(Error::Config(format!("{} is not empty (use --force to overwrite)", dir.display())));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let data = Dataset::generate(config)?;
    let mut records = Vec::with_capacity(config.n_train + config.n_val);
    for (split, scenes) in [(Split::Train, &data.train), (Split::Val, &data.val)] {
        for (index, scene) in scenes.iter().enumerate() {
            let bytes = encode_scene(scene);
            let file = record_name(split, index);
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            records.push(ManifestRecord {
                file,
                split,
                index,
                seed: config.scene_seed(split, index),
                sha256: sha256_hex(&bytes),
            });
        }
    }
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed: config.seed,
        n_train: config.n_train,
        n_val: config.n_val,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        generator: config.generator.clone(),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads a dataset directory, verifying every record against its checksum.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Dataset)> {
    let manifest = Manifest::read(dir)?;
    if manifest.generator_version != GENERATOR_VERSION {
        return Err(Error::malformed(
            dir.join(MANIFEST_FILE),
            format!("generator version {} (expected {GENERATOR_VERSION})", manifest.generator_version),
        ));
    }
    let mut train: Vec<Option<Scene>> = vec![None; manifest.n_train];
    let mut val: Vec<Option<Scene>> = vec![None; manifest.n_val];
    for rec in &manifest.records {
        let path = dir.join(&rec.file);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(Error::malformed(&path, "checksum mismatch"));
        }
        let scene = decode_scene(&bytes).map_err(|e| Error::malformed(&path, e.to_string()))?;
        let slot = match rec.split {
            Split::Train => train.get_mut(rec.index),
            Split::Val => val.get_mut(rec.index),
        };
        match slot {
            Some(s @ None) => *s = Some(scene),
            _ => return Err(Error::malformed(&path, format!("duplicate or out-of-range index {}", rec.index))),
        }
    }
    let collect = |v: Vec<Option<Scene>>| v.into_iter().collect::<Option<Vec<_>>>();
    let missing = || Error::malformed(dir.join(MANIFEST_FILE), "missing record");
    Ok((
        manifest,
        Dataset {
            train: collect(train).ok_or_else(missing)?,
            val: collect(val).ok_or_else(missing)?,
        },
    ))
}
