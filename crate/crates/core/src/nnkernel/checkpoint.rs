//! Checkpoint directory: `manifest.json` plus one little-endian `f32` file
//! per tensor, named after the field.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ConvLayer, ModelParams};
use crate::synthbench::io::{read_exact_file, sha256_hex};
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    len: usize,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    arch: Architecture,
    d_emb: usize,
    num_classes: usize,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(params: &ModelParams<f32>) -> Vec<(String, &[f32])> {
    let mut out: Vec<(String, &[f32])> = params.trainable().into_iter().map(|(n, _, t)| (n, t)).collect();
    out.push(("bn_running_mean".into(), &params.bn_running_mean));
    out.push(("bn_running_var".into(), &params.bn_running_var));
    out
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn save_checkpoint(params: &ModelParams<f32>, dir: &Path) -> Result<()> {
    params.validate()?;
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (name, data) in named_tensors(params) {
        let bytes = f32_bytes(data);
        fs::write(dir.join(format!("{name}.f32")), &bytes)?;
        tensors.push(TensorEntry { name, len: data.len(), sha256: sha256_hex(&bytes) });
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        arch: params.arch.clone(),
        d_emb: params.d_emb(),
        num_classes: params.num_classes(),
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams<f32>> {
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_FORMAT_VERSION, found: manifest.format_version });
    }
    if manifest.d_emb != manifest.arch.d_emb || manifest.num_classes != manifest.arch.num_classes {
        return Err(Error::Validation("checkpoint header disagrees with its architecture".into()));
    }
    // Start from correctly shaped zeros and fill every named tensor.
    let arch = manifest.arch.clone();
    arch.validate()?;
    let mut params = ModelParams::<f32> {
        conv: arch
            .channels
            .windows(2)
            .map(|w| ConvLayer { in_ch: w[0], out_ch: w[1], kernels: vec![0.0; w[0] * w[1] * 9], biases: vec![0.0; w[1]] })
            .collect(),
        embed_w: vec![0.0; arch.d_emb * arch.d_feat()],
        embed_b: vec![0.0; arch.d_emb],
        bn_gamma: vec![0.0; arch.d_emb],
        bn_beta: vec![0.0; arch.d_emb],
        bn_running_mean: vec![0.0; arch.d_emb],
        bn_running_var: vec![0.0; arch.d_emb],
        classifier_w: vec![0.0; arch.num_classes * arch.d_emb],
        arch,
    };
    let expected: Vec<(String, usize)> = named_tensors(&params).into_iter().map(|(n, t)| (n, t.len())).collect();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Validation("checkpoint tensor list does not match the architecture".into()));
    }
    let mut loaded = Vec::new();
    for ((name, len), entry) in expected.iter().zip(&manifest.tensors) {
        if *name != entry.name || *len != entry.len {
            return Err(Error::Validation(format!("unexpected tensor entry {} (wanted {name})", entry.name)));
        }
        let path = dir.join(format!("{name}.f32"));
        let bytes = read_exact_file(&path, (len * 4) as u64)?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checksum(path));
        }
        loaded.push(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<f32>>());
    }
    let mut loaded = loaded.into_iter();
    for (_, _, t) in params.trainable_mut() {
        t.copy_from_slice(&loaded.next().unwrap());
    }
    params.bn_running_mean = loaded.next().unwrap();
    params.bn_running_var = loaded.next().unwrap();
    params.validate()?;
    Ok(params)
}
