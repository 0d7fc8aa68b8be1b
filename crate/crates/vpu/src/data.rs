//! Synthetic datasets on disk: one RGB PNG and one mask PNG per instance,
//! plus `manifest.json` with SHA-256 digests of every file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vpu_core::synth::{generate_instance_sized, InstanceMeta, InstanceSample, ShapeKind};

use crate::error::{AppError, Result};
use crate::pngio;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub seed: u64,
    pub image_sha256: String,
    pub mask_sha256: String,
    pub kind: ShapeKind,
    pub distractors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: Split,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Generates `count` instances with seeds `seed + i` and writes them to `dir`.
pub fn write_dataset(dir: &Path, count: usize, seed: u64, split: Split, size: usize) -> Result<DatasetManifest> {
    if size < 8 {
        return Err(AppError::Invalid(format!("image size {size} is too small")));
    }
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let sample = generate_instance_sized(s, size)?;
        let image = format!("{i:05}_image.png");
        let mask = format!("{i:05}_mask.png");
        let ib = pngio::encode_image(&sample.image)?;
        let mb = pngio::encode_mask(&sample.gt)?;
        write(&dir.join(&image), &ib)?;
        write(&dir.join(&mask), &mb)?;
        entries.push(ManifestEntry {
            image,
            mask,
            seed: s,
            image_sha256: sha256_hex(&ib),
            mask_sha256: sha256_hex(&mb),
            kind: sample.meta.kind,
            distractors: sample.meta.distractors,
        });
    }
    let manifest = DatasetManifest { version: MANIFEST_VERSION, split, seed, entries };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| AppError::Invalid(e.to_string()))?;
    write(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

fn read_checked(dir: &Path, name: &str, digest: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    let bytes = fs::read(&path).map_err(|e| AppError::io(&path, e))?;
    if sha256_hex(&bytes) != digest {
        return Err(AppError::Corrupt(format!("{} does not match its manifest digest", path.display())));
    }
    Ok(bytes)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| AppError::io(&path, e))?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| AppError::Corrupt(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(AppError::Corrupt(format!("unsupported manifest version {}", m.version)));
    }
    Ok(m)
}

/// Reads every instance listed in the manifest, verifying digests.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<InstanceSample>)> {
    let m = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(m.entries.len());
    for e in &m.entries {
        let image = pngio::decode_image(&read_checked(dir, &e.image, &e.image_sha256)?)?;
        let gt = pngio::decode_mask(&read_checked(dir, &e.mask, &e.mask_sha256)?)?;
        if image.width() != gt.width() || image.height() != gt.height() {
            return Err(AppError::Corrupt(format!("{} and {} differ in size", e.image, e.mask)));
        }
        let meta = InstanceMeta { kind: e.kind, seed: e.seed, distractors: e.distractors };
        samples.push(InstanceSample { image, gt, meta });
    }
    Ok((m, samples))
}
