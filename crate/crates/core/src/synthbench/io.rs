//! Dataset directory format.
//!
//! ```text
//! manifest.json     spec, N, C, H, W, format_version, payload checksums
//! images.f32        N·H·W little-endian f32, sample-row-column order
//! labels.u32        N little-endian u32
//! true_labels.u32   N little-endian u32
//! flip_mask.u8      N bytes, 0 or 1
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{count_labels, Dataset, DatasetSpec};
use crate::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub spec: DatasetSpec,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// SHA-256 (hex) of each payload file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a file that must be exactly `expected` bytes long.
pub(crate) fn read_exact_file(path: &Path, expected: u64) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let found = fs::metadata(path)?.len();
    if found != expected {
        return Err(Error::SizeMismatch { file: path.to_path_buf(), expected, found });
    }
    Ok(fs::read(path)?)
}

fn u32_bytes(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn payloads(d: &Dataset) -> [(&'static str, Vec<u8>); 4] {
    [
        ("images.f32", d.images.iter().flat_map(|x| x.to_le_bytes()).collect()),
        ("labels.u32", u32_bytes(&d.labels)),
        ("true_labels.u32", u32_bytes(&d.true_labels)),
        ("flip_mask.u8", d.flip_mask.iter().map(|&f| u8::from(f)).collect()),
    ]
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir)?;
    let mut checksums = BTreeMap::new();
    for (name, bytes) in payloads(dataset) {
        checksums.insert(name.to_string(), sha256_hex(&bytes));
        fs::write(dir.join(name), bytes)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        spec: dataset.spec.clone(),
        n: dataset.len(),
        c: dataset.num_classes(),
        h: dataset.resolution,
        w: dataset.resolution,
        checksums,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: DATASET_FORMAT_VERSION, found: manifest.format_version });
    }
    if manifest.h != manifest.w || manifest.c != manifest.spec.num_classes {
        return Err(Error::Validation("manifest header is inconsistent with its parameters".into()));
    }
    let n = manifest.n as u64;
    let load = |name: &str, len: u64| -> Result<Vec<u8>> {
        let path = dir.join(name);
        let bytes = read_exact_file(&path, len)?;
        match manifest.checksums.get(name) {
            Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
            _ => Err(Error::Checksum(path)),
        }
    };
    let images = load("images.f32", n * (manifest.h * manifest.w) as u64 * 4)?;
    let labels = load("labels.u32", n * 4)?;
    let true_labels = load("true_labels.u32", n * 4)?;
    let flip = load("flip_mask.u8", n)?;

    let to_u32 = |b: Vec<u8>| -> Vec<u32> { b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect() };
    let labels = to_u32(labels);
    if let Some(bad) = flip.iter().find(|b| **b > 1) {
        return Err(Error::Validation(format!("flip mask byte {bad} is not 0 or 1")));
    }
    let dataset = Dataset {
        images: images.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        resolution: manifest.h,
        class_counts: count_labels(&labels, manifest.c),
        labels,
        true_labels: to_u32(true_labels),
        flip_mask: flip.into_iter().map(|b| b == 1).collect(),
        spec: manifest.spec,
    };
    dataset.validate()?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::gen_dataset;

    fn small() -> Dataset {
        let spec = DatasetSpec { num_classes: 10, max_count: 12, imbalance_ratio: 4.0, base_resolution: 8, seed: 7, ..DatasetSpec::default() };
        gen_dataset(&spec).unwrap().train
    }

    #[test]
    fn roundtrip_is_exact_and_bytes_stable() {
        let d = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(&d, a.path()).unwrap();
        write_dataset(&small(), b.path()).unwrap();
        assert_eq!(read_dataset(a.path()).unwrap(), d);
        for f in ["manifest.json", "images.f32", "labels.u32", "true_labels.u32", "flip_mask.u8"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn truncated_payload_is_size_mismatch() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join("images.f32");
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::SizeMismatch { .. })));
    }

    #[test]
    fn missing_file_and_version() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        fs::remove_file(dir.path().join("flip_mask.u8")).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::MissingFile(_))));

        write_dataset(&d, dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m["format_version"] = 2.into();
        fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::VersionMismatch { found: 2, .. })));
    }

    #[test]
    fn out_of_range_label_is_validation_error() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let mut labels = d.labels.clone();
        labels[0] = 10;
        let mut true_labels = d.true_labels.clone();
        true_labels[0] = 10;
        let lb = u32_bytes(&labels);
        let tb = u32_bytes(&true_labels);
        fs::write(dir.path().join("labels.u32"), &lb).unwrap();
        fs::write(dir.path().join("true_labels.u32"), &tb).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut m: DatasetManifest = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        m.checksums.insert("labels.u32".into(), sha256_hex(&lb));
        m.checksums.insert("true_labels.u32".into(), sha256_hex(&tb));
        fs::write(&mpath, serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let p = dir.path().join("labels.u32");
        let mut bytes = fs::read(&p).unwrap();
        bytes[0] ^= 1;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Checksum(_))));
    }
}
