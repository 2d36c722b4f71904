//! Mini-batch training loop shared by every stage that fits parameters.

use serde::{Deserialize, Serialize};

use crate::imageops::{augment, AugmentConfig, Image};
use crate::nnkernel::{
    backward, batch_loss, classifier_grad, forward, mixup_batch, predict_proba, Architecture, Batch, Grads,
    ModelParams, Mode,
};
use crate::optimizer::{lr_at, sgd_update, OptimConfig, OptimState, UpdateScope};
use crate::sampling::{class_balanced_epoch, group_by_class, instance_balanced_epoch, SamplerConfig, SamplerKind};
use crate::synthbench::Dataset;
use crate::{rng, Error, Result};

/// Network shape plus loss-side regularizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: Vec<usize>,
    pub d_emb: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Label smoothing ε; 0, 0.1 and 0.2 are the usual settings.
    pub label_smoothing: f64,
    /// Mixup Beta(α, α) parameter; 0 disables mixup.
    pub mixup_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            channels: arch.channels,
            d_emb: arch.d_emb,
            bn_eps: arch.bn_eps,
            bn_momentum: arch.bn_momentum,
            label_smoothing: 0.0,
            mixup_alpha: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture {
            channels: self.channels.clone(),
            d_emb: self.d_emb,
            num_classes,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.architecture(2).validate()?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must be in [0, 1)"));
        }
        if !(self.mixup_alpha >= 0.0) || !self.mixup_alpha.is_finite() {
            return Err(Error::config("mixup_alpha must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Everything one call to [`train`] needs besides data and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub optim: OptimConfig,
    pub sampler: SamplerConfig,
    pub augment: AugmentConfig,
    pub label_smoothing: f64,
    pub mixup_alpha: f64,
    pub scope: UpdateScope,
}

/// A subset of a dataset with (possibly corrected) labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainView<'a> {
    pub data: &'a Dataset,
    /// Dataset positions that take part in training.
    pub indices: &'a [usize],
    /// Effective labels for every dataset position.
    pub labels: &'a [u32],
}

impl<'a> TrainView<'a> {
    pub fn new(data: &'a Dataset, indices: &'a [usize], labels: &'a [u32]) -> Result<Self> {
        if labels.len() != data.len() {
            return Err(Error::Shape("view labels must cover every dataset position".into()));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= data.len()) {
            return Err(Error::Shape(format!("view index {i} out of range")));
        }
        Ok(Self { data, indices, labels })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Splits an epoch's draws into batches; a trailing batch of one sample is
/// dropped when batch statistics are needed.
fn batches(order: &[usize], batch_size: usize, needs_stats: bool) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|c| !(needs_stats && c.len() < 2))
        .collect()
}

fn epoch_order(view: &TrainView<'_>, sampler: &SamplerConfig, groups: &[Vec<usize>], rng: &mut rng::Rng) -> Result<Vec<usize>> {
    Ok(match sampler.kind {
        SamplerKind::Ibs => instance_balanced_epoch(view.indices.len(), rng)
            .into_iter()
            .map(|k| view.indices[k])
            .collect(),
        SamplerKind::Cbs => class_balanced_epoch(groups, sampler.epoch_size.unwrap_or(view.indices.len()), rng)?,
    })
}

/// Fits `params` on `view` for `plan.optim.total_epochs` epochs.
///
/// With [`UpdateScope::ClassifierOnly`] the batch-norm neck stays in eval
/// mode, so every tensor but the classifier is left bit-identical.
pub fn train(params: &mut ModelParams<f32>, view: TrainView<'_>, plan: &TrainPlan, seed: u64) -> Result<TrainLog> {
    plan.optim.validate()?;
    plan.sampler.validate()?;
    plan.augment.validate()?;
    if view.indices.is_empty() {
        return Err(Error::config("cannot train on an empty sample set"));
    }
    if view.data.num_classes() != params.num_classes() {
        return Err(Error::Shape("dataset and model disagree on the number of classes".into()));
    }
    let mut log = TrainLog::default();
    if plan.optim.total_epochs == 0 {
        return Ok(log);
    }

    let full = plan.scope == UpdateScope::Full;
    let groups: Vec<Vec<usize>> = group_by_class(view.labels, view.indices, params.num_classes())
        .into_iter()
        .filter(|g| !g.is_empty())
        .collect();
    let epoch_len = match plan.sampler.kind {
        SamplerKind::Ibs => view.indices.len(),
        SamplerKind::Cbs => plan.sampler.epoch_size.unwrap_or(view.indices.len()),
    };
    let steps_per_epoch = epoch_len.div_ceil(plan.optim.batch_size) as u64
        - u64::from(full && epoch_len % plan.optim.batch_size == 1);
    if steps_per_epoch == 0 {
        return Err(Error::config("epoch too small to form a batch of two samples"));
    }

    let mut order_rng = rng::substream(seed, 0);
    let mut aug_rng = rng::substream(seed, 1);
    let mut state = OptimState::new(params, steps_per_epoch, plan.scope);
    let mut class_only_grads = Grads::zeros_like(params);
    let res = view.data.resolution;
    let c = params.num_classes();

    for _epoch in 0..plan.optim.total_epochs {
        let order = epoch_order(&view, &plan.sampler, &groups, &mut order_rng)?;
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for chunk in batches(&order, plan.optim.batch_size, full) {
            let mut images = Vec::with_capacity(chunk.len() * res * res);
            for &i in chunk {
                if plan.augment.is_identity() {
                    images.extend_from_slice(view.data.image(i));
                } else {
                    let img = Image::new(res, res, view.data.image(i).to_vec());
                    images.extend(augment(&img, &plan.augment, &mut aug_rng).into_pixels());
                }
            }
            let labels = chunk.iter().map(|&i| view.labels[i]).collect();
            let mut batch = Batch::new(images, res, res, labels)?;
            if plan.mixup_alpha > 0.0 {
                batch = mixup_batch(&batch, plan.mixup_alpha, &mut aug_rng)?;
            }
            let lr = lr_at(state.step, &plan.optim, steps_per_epoch)?;
            let loss = if full {
                let cache = forward(params, &batch.images, res, res, Mode::Train)?;
                let (loss, dlogits) = batch_loss(cache.logits(), c, &batch, plan.label_smoothing)?;
                let grads = backward(params, &cache, &dlogits)?;
                cache.commit_bn_stats(params);
                sgd_update(params, &grads, &mut state, lr, &plan.optim)?;
                loss
            } else {
                let cache = forward(params, &batch.images, res, res, Mode::Eval)?;
                let (loss, dlogits) = batch_loss(cache.logits(), c, &batch, plan.label_smoothing)?;
                class_only_grads.classifier_w = classifier_grad(params, &cache, &dlogits)?;
                sgd_update(params, &class_only_grads, &mut state, lr, &plan.optim)?;
                loss
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("training loss diverged at step {}", state.step)));
            }
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        log.epoch_loss.push(loss_sum / count.max(1) as f64);
    }
    log.steps = state.step;
    Ok(log)
}

/// Eval-mode class probabilities for every sample, one row per sample.
pub fn predict_dataset(params: &ModelParams<f32>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let flat = predict_proba(params, &data.images, data.resolution, data.resolution)?;
    Ok(flat.chunks(params.num_classes()).map(<[f64]>::to_vec).collect())
}

/// Fresh parameters for `data`'s class count.
pub fn init_params(model: &ModelConfig, num_classes: usize, seed: u64) -> Result<ModelParams<f32>> {
    ModelParams::init(&model.architecture(num_classes), &mut rng::seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{gen_dataset, DatasetSpec};

    fn tiny() -> Dataset {
        let spec = DatasetSpec {
            num_classes: 3,
            max_count: 20,
            imbalance_ratio: 1.0,
            noise_rate: 0.0,
            base_resolution: 12,
            ..DatasetSpec::default()
        };
        gen_dataset(&spec).unwrap().train
    }

    fn plan(epochs: usize, scope: UpdateScope) -> TrainPlan {
        TrainPlan {
            optim: OptimConfig { batch_size: 10, total_epochs: epochs, warmup_epochs: 0, decay_epochs: vec![], weight_decay: 0.0, ..OptimConfig::default() },
            sampler: SamplerConfig::default(),
            augment: AugmentConfig::off(),
            label_smoothing: 0.0,
            mixup_alpha: 0.0,
            scope,
        }
    }

    fn mean_loss(params: &ModelParams<f32>, data: &Dataset) -> f64 {
        let p = predict_dataset(params, data).unwrap();
        p.iter().zip(&data.labels).map(|(row, &l)| -row[l as usize].ln()).sum::<f64>() / data.len() as f64
    }

    #[test]
    fn loss_drops_on_tiny_clean_set() {
        // 3 classes × 20 samples, 20 epochs of 6 steps = 120 steps... plus 80
        // more to reach 200.
        let data = tiny();
        assert_eq!(data.len(), 60);
        let mut params = init_params(&ModelConfig::default(), 3, 0).unwrap();
        let idx: Vec<usize> = (0..data.len()).collect();
        let view = TrainView::new(&data, &idx, &data.labels).unwrap();
        let initial = mean_loss(&params, &data);
        let log = train(&mut params, view, &plan(34, UpdateScope::Full), 1).unwrap();
        assert!(log.steps >= 200);
        let last = *log.epoch_loss.last().unwrap();
        let first = log.epoch_loss[0];
        assert!(last < 0.2 * first, "train loss {first} -> {last}");
        assert!(mean_loss(&params, &data) < initial);
    }

    #[test]
    fn classifier_scope_is_bitwise_frozen() {
        let data = tiny();
        let mut params = init_params(&ModelConfig::default(), 3, 0).unwrap();
        let before = params.clone();
        let idx: Vec<usize> = (0..data.len()).collect();
        let view = TrainView::new(&data, &idx, &data.labels).unwrap();
        train(&mut params, view, &plan(3, UpdateScope::ClassifierOnly), 1).unwrap();
        assert!(params.backbone_bits_eq(&before));
        assert_ne!(params.classifier_w, before.classifier_w);
    }

    #[test]
    fn zero_epochs_is_identity() {
        let data = tiny();
        let mut params = init_params(&ModelConfig::default(), 3, 0).unwrap();
        let before = params.clone();
        let idx: Vec<usize> = (0..data.len()).collect();
        let view = TrainView::new(&data, &idx, &data.labels).unwrap();
        train(&mut params, view, &plan(0, UpdateScope::Full), 1).unwrap();
        assert_eq!(params, before);
    }
}
