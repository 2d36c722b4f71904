//! Epoch index streams: instance-balanced (a shuffle) and class-balanced
//! (uniform class, then uniform member, with replacement).

use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ibs,
    Cbs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    /// Draws per CBS epoch; defaults to the number of training samples.
    pub epoch_size: Option<usize>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { kind: SamplerKind::Ibs, epoch_size: None }
    }
}

impl SamplerConfig {
    pub fn cbs() -> Self {
        Self { kind: SamplerKind::Cbs, epoch_size: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epoch_size == Some(0) {
            return Err(Error::config("sampler epoch_size must be at least 1"));
        }
        Ok(())
    }
}

/// A uniformly random permutation of `0..n`.
pub fn instance_balanced_epoch(n: usize, rng: &mut impl RngCore) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// `epoch_size` draws, each a uniformly chosen class then a uniformly chosen
/// member of that class.
pub fn class_balanced_epoch(
    class_to_indices: &[Vec<usize>],
    epoch_size: usize,
    rng: &mut impl RngCore,
) -> Result<Vec<usize>> {
    if class_to_indices.is_empty() {
        return Err(Error::config("class-balanced sampling needs at least one class"));
    }
    if let Some(c) = class_to_indices.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("class-balanced sampling: class {c} has no samples")));
    }
    let c = class_to_indices.len();
    Ok((0..epoch_size)
        .map(|_| {
            let members = &class_to_indices[rng.random_range(0..c)];
            members[rng.random_range(0..members.len())]
        })
        .collect())
}

/// Groups `positions` (indices into `labels`) by label.
pub fn group_by_class(labels: &[u32], positions: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for &p in positions {
        groups[labels[p] as usize].push(p);
    }
    groups
}
