//! Classifier rebalancing on top of a trained representation: τ-norm of the
//! classifier rows, classifier retraining under class-balanced sampling, and
//! finetuning on a top-m balanced subset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::{argmax, mean_class_error_rate};
use crate::nnkernel::{cast, ModelParams, Real};
use crate::optimizer::{OptimConfig, UpdateScope};
use crate::rng;
use crate::sampling::{SamplerConfig, SamplerKind};
use crate::synthbench::Dataset;
use crate::train::{predict_dataset, train, TrainPlan, TrainView};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    ClassifierOnly,
    FullNetwork,
}

impl From<FinetuneScope> for UpdateScope {
    fn from(s: FinetuneScope) -> Self {
        match s {
            FinetuneScope::ClassifierOnly => UpdateScope::ClassifierOnly,
            FinetuneScope::FullNetwork => UpdateScope::Full,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// Fresh classifier rows before training.
    Retrain,
    /// Keep the current rows.
    Finetune,
}

/// How samples are ranked when building the balanced subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRank {
    /// Probability of the sample's own label.
    OwnLabel,
    /// Top-1 probability of any class.
    Top1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RebalanceConfig {
    /// Exponent used when `search_tau` is off.
    pub tau: f64,
    pub search_tau: bool,
    pub tau_grid: Vec<f64>,
    pub subset_per_class: usize,
    pub subset_rank: SubsetRank,
    pub finetune_scope: FinetuneScope,
    pub finetune_epochs: usize,
    pub classifier_mode: ClassifierMode,
    /// Multiplier on the base learning rate for rebalancing runs.
    pub lr_scale: f64,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        Self {
            tau: 0.6,
            search_tau: true,
            tau_grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
            subset_per_class: 30,
            subset_rank: SubsetRank::OwnLabel,
            finetune_scope: FinetuneScope::ClassifierOnly,
            finetune_epochs: 5,
            classifier_mode: ClassifierMode::Retrain,
            lr_scale: 1.0,
        }
    }
}

impl RebalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=2.0).contains(&self.tau) {
            return Err(Error::config("tau must be in [0, 2]"));
        }
        if self.search_tau && self.tau_grid.is_empty() {
            return Err(Error::config("tau_grid must be non-empty when searching"));
        }
        if self.tau_grid.iter().any(|t| !(0.0..=2.0).contains(t)) {
            return Err(Error::config("tau_grid values must be in [0, 2]"));
        }
        if self.subset_per_class == 0 {
            return Err(Error::config("subset_per_class must be at least 1"));
        }
        if !(self.lr_scale > 0.0) || !self.lr_scale.is_finite() {
            return Err(Error::config("lr_scale must be positive"));
        }
        Ok(())
    }

    fn optim(&self, base: &OptimConfig) -> OptimConfig {
        let mut o = base.rescaled(self.finetune_epochs);
        o.base_lr_per_256 *= self.lr_scale;
        o
    }
}

/// Row `i` of the result is `w_i / ‖w_i‖^τ`; `w` is row-major with
/// `num_classes` rows.
pub fn tau_normalize<T: Real>(w: &[T], num_classes: usize, tau: f64) -> Result<Vec<T>> {
    if num_classes == 0 || w.len() % num_classes != 0 {
        return Err(Error::Shape(format!("{} weights do not split into {num_classes} rows", w.len())));
    }
    let d = w.len() / num_classes;
    let mut out = Vec::with_capacity(w.len());
    for (class, row) in w.chunks(d).enumerate() {
        let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !(norm > T::zero()) {
            return Err(Error::DegenerateWeight { class });
        }
        let scale = norm.powf(cast(tau));
        out.extend(row.iter().map(|v| *v / scale));
    }
    Ok(out)
}

/// Copy of `params` with a τ-normalized classifier.
pub fn apply_tau<T: Real>(params: &ModelParams<T>, tau: f64) -> Result<ModelParams<T>> {
    let mut out = params.clone();
    out.classifier_w = tau_normalize(&params.classifier_w, params.num_classes(), tau)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub mcer: f64,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauSearch {
    pub best_tau: f64,
    pub curve: Vec<TauPoint>,
}

impl TauSearch {
    pub fn csv(&self) -> String {
        let mut out = String::from("tau,mcer,top1\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{}\n", p.tau, p.mcer, p.top1));
        }
        out
    }
}

/// Evaluates every grid value on `val` and returns the MCER minimizer; ties
/// go to the smaller τ.
pub fn grid_search_tau(params: &ModelParams<f32>, val: &Dataset, grid: &[f64]) -> Result<TauSearch> {
    if grid.is_empty() {
        return Err(Error::config("tau grid must be non-empty"));
    }
    let c = params.num_classes();
    let curve = grid
        .par_iter()
        .map(|&tau| {
            let probs = predict_dataset(&apply_tau(params, tau)?, val)?;
            let preds: Vec<u32> = probs.iter().map(|p| argmax(p) as u32).collect();
            let hits = preds.iter().zip(&val.labels).filter(|(p, l)| p == l).count();
            Ok(TauPoint {
                tau,
                mcer: mean_class_error_rate(&preds, &val.labels, c)?,
                top1: hits as f64 / val.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = curve
        .iter()
        .min_by(|a, b| a.mcer.total_cmp(&b.mcer).then(a.tau.total_cmp(&b.tau)))
        .expect("grid is non-empty");
    Ok(TauSearch { best_tau: best.tau, curve })
}

fn rebalance_plan(base: &TrainPlan, cfg: &RebalanceConfig, sampler: SamplerConfig, scope: UpdateScope) -> TrainPlan {
    TrainPlan { optim: cfg.optim(&base.optim), sampler, scope, ..base.clone() }
}

/// Trains only the classifier with class-balanced sampling for
/// `cfg.finetune_epochs` epochs; the batch-norm neck stays in eval mode.
pub fn retrain_classifier(
    params: &ModelParams<f32>,
    view: TrainView<'_>,
    base: &TrainPlan,
    cfg: &RebalanceConfig,
    seed: u64,
) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    let mut out = params.clone();
    if cfg.classifier_mode == ClassifierMode::Retrain {
        out.reinit_classifier(&mut rng::substream(seed, 7));
    }
    let plan = rebalance_plan(base, cfg, SamplerConfig { kind: SamplerKind::Cbs, epoch_size: None }, UpdateScope::ClassifierOnly);
    train(&mut out, view, &plan, seed)?;
    Ok(out)
}

/// For each class, the `m` samples labelled with it that rank highest
/// (ties by lower index), concatenated in class order. Indices refer to
/// `labels`/`probs` rows.
pub fn build_balanced_subset(labels: &[u32], probs: &[Vec<f64>], m: usize, rank: SubsetRank) -> Vec<usize> {
    let c = probs.first().map_or(0, Vec::len);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        if let Some(group) = by_class.get_mut(l as usize) {
            group.push(i);
        }
    }
    let score = |i: usize| match rank {
        SubsetRank::OwnLabel => probs[i][labels[i] as usize],
        SubsetRank::Top1 => probs[i].iter().copied().fold(0.0, f64::max),
    };
    let mut out = Vec::new();
    for mut group in by_class {
        group.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
        out.extend(group.into_iter().take(m));
    }
    out
}

/// Finetunes on the subset (dataset positions) with instance-balanced
/// sampling, moving only the tensors `cfg.finetune_scope` allows.
pub fn finetune_on_subset(
    params: &ModelParams<f32>,
    data: &Dataset,
    subset: &[usize],
    labels: &[u32],
    base: &TrainPlan,
    cfg: &RebalanceConfig,
    seed: u64,
) -> Result<ModelParams<f32>> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(Error::config("finetuning subset is empty"));
    }
    let mut out = params.clone();
    let plan = rebalance_plan(base, cfg, SamplerConfig::default(), cfg.finetune_scope.into());
    train(&mut out, TrainView::new(data, subset, labels)?, &plan, seed)?;
    Ok(out)
}
