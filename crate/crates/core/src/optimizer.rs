//! SGD with momentum and decoupled-from-BN weight decay, driven by a
//! per-step learning-rate schedule: linear warmup, then step decay.

use serde::{Deserialize, Serialize};

use crate::nnkernel::{cast, Grads, ModelParams, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmupGranularity {
    Step,
    Epoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Learning rate for a batch of 256; scaled linearly with `batch_size`.
    pub base_lr_per_256: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_granularity: WarmupGranularity,
    /// Epoch indices (0-based) at whose first step the rate is multiplied by
    /// `decay_ratio`.
    pub decay_epochs: Vec<usize>,
    pub decay_ratio: f64,
    pub total_epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr_per_256: 0.4,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 2,
            warmup_granularity: WarmupGranularity::Step,
            decay_epochs: vec![14, 20],
            decay_ratio: 0.1,
            total_epochs: 24,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr_per_256 > 0.0) || !self.base_lr_per_256.is_finite() {
            return Err(Error::config("base_lr_per_256 must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2 (batch norm needs batch statistics)"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config("decay_epochs must be strictly increasing"));
        }
        if !(self.decay_ratio > 0.0 && self.decay_ratio < 1.0) {
            return Err(Error::config("decay_ratio must be in (0, 1)"));
        }
        Ok(())
    }

    /// Post-warmup rate before any decay.
    pub fn base_lr(&self) -> f64 {
        self.base_lr_per_256 * self.batch_size as f64 / 256.0
    }

    /// Same schedule shape stretched or squeezed to `epochs` epochs.
    pub fn rescaled(&self, epochs: usize) -> Self {
        if epochs == self.total_epochs || self.total_epochs == 0 {
            return Self { total_epochs: epochs, ..self.clone() };
        }
        let scale = |e: usize| (e * epochs + self.total_epochs / 2) / self.total_epochs;
        let mut decay: Vec<usize> = self.decay_epochs.iter().map(|&e| scale(e)).collect();
        decay.dedup();
        Self {
            warmup_epochs: scale(self.warmup_epochs),
            decay_epochs: decay,
            total_epochs: epochs,
            ..self.clone()
        }
    }

    /// Constant-rate schedule for short finetuning runs.
    pub fn constant(&self, epochs: usize, lr_scale: f64) -> Self {
        Self {
            base_lr_per_256: self.base_lr_per_256 * lr_scale,
            warmup_epochs: 0,
            decay_epochs: Vec::new(),
            total_epochs: epochs,
            ..self.clone()
        }
    }
}

/// Learning rate of global step `step`.
pub fn lr_at(step: u64, cfg: &OptimConfig, steps_per_epoch: u64) -> Result<f64> {
    if steps_per_epoch == 0 {
        return Err(Error::config("steps_per_epoch must be positive"));
    }
    let base = cfg.base_lr();
    let warm_steps = cfg.warmup_epochs as u64 * steps_per_epoch;
    let epoch = step / steps_per_epoch;
    if step < warm_steps {
        let ramp = match cfg.warmup_granularity {
            WarmupGranularity::Step => (step + 1) as f64 / warm_steps as f64,
            WarmupGranularity::Epoch => (epoch + 1) as f64 / cfg.warmup_epochs as f64,
        };
        return Ok(base * ramp);
    }
    let passed = cfg.decay_epochs.iter().filter(|&&e| epoch >= e as u64).count();
    Ok(base * cfg.decay_ratio.powi(passed as i32))
}

/// Which tensors an optimizer is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    Full,
    ClassifierOnly,
}

#[derive(Debug, Clone)]
pub struct OptimState<T> {
    pub velocity: Grads<T>,
    pub step: u64,
    pub steps_per_epoch: u64,
    pub scope: UpdateScope,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>, steps_per_epoch: u64, scope: UpdateScope) -> Self {
        Self { velocity: Grads::zeros_like(params), step: 0, steps_per_epoch, scope }
    }
}

/// `g ← grad + wd·param` (weights only), `v ← μ·v + g`, `param ← param − lr·v`.
/// Tensors outside the state's scope and the BN running statistics are
/// never written.
pub fn sgd_update<T: Real>(
    params: &mut ModelParams<T>,
    grads: &Grads<T>,
    state: &mut OptimState<T>,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    let names: Vec<String> = params.trainable().into_iter().map(|(n, _, _)| n).collect();
    if grad_tensors.len() != names.len() {
        return Err(Error::Shape("gradient set does not match parameters".into()));
    }
    for (name, g) in names.iter().zip(&grad_tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {name}")));
        }
    }
    let lr: T = cast(lr);
    let mu: T = cast(cfg.momentum);
    let wd: T = cast(cfg.weight_decay);
    let scope = state.scope;
    for (((_, kind, p), g), v) in params
        .trainable_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.velocity.tensors_mut())
    {
        if scope == UpdateScope::ClassifierOnly && !kind.is_classifier() {
            continue;
        }
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::Shape("gradient tensor length differs from parameter".into()));
        }
        let decay = kind.decays() && cfg.weight_decay > 0.0;
        for i in 0..p.len() {
            let gi = if decay { g[i] + wd * p[i] } else { g[i] };
            v[i] = mu * v[i] + gi;
            p[i] -= lr * v[i];
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::Architecture;
    use crate::rng;

    fn cfg_1024() -> OptimConfig {
        OptimConfig { base_lr_per_256: 0.01, batch_size: 1024, ..OptimConfig::default() }
    }

    #[test]
    fn scaled_base_rate() {
        let cfg = cfg_1024();
        assert!((cfg.base_lr() - 0.04).abs() < 1e-15);
        let spe = 10;
        assert!((lr_at(2 * spe, &cfg, spe).unwrap() - 0.04).abs() < 1e-15);
    }

    #[test]
    fn rescaled_schedule() {
        let half = OptimConfig::default().rescaled(12);
        assert_eq!((half.warmup_epochs, half.decay_epochs.clone(), half.total_epochs), (1, vec![7, 10], 12));
        assert_eq!(OptimConfig::default().rescaled(24), OptimConfig::default());
    }

    #[test]
    fn decay_boundaries() {
        let cfg = cfg_1024();
        let spe = 7;
        let base = cfg.base_lr();
        assert_eq!(lr_at(14 * spe - 1, &cfg, spe).unwrap(), base);
        assert!((lr_at(14 * spe, &cfg, spe).unwrap() - 0.1 * base).abs() < 1e-15);
        assert!((lr_at(20 * spe, &cfg, spe).unwrap() - 0.01 * base).abs() < 1e-15);
    }

    #[test]
    fn warmup_ramp() {
        let cfg = cfg_1024();
        let spe = 5;
        let base = cfg.base_lr();
        assert!((lr_at(0, &cfg, spe).unwrap() - base / 10.0).abs() < 1e-15);
        assert!((lr_at(9, &cfg, spe).unwrap() - base).abs() < 1e-15);
        let no_warm = OptimConfig { warmup_epochs: 0, ..cfg.clone() };
        assert_eq!(lr_at(0, &no_warm, spe).unwrap(), base);
        let per_epoch = OptimConfig { warmup_granularity: WarmupGranularity::Epoch, ..cfg };
        assert_eq!(lr_at(4, &per_epoch, spe).unwrap(), base * 0.5);
        assert!(lr_at(0, &per_epoch, 0).is_err());
    }

    #[test]
    fn schedule_piecewise_monotone() {
        let cfg = OptimConfig::default();
        let spe = 13;
        let lrs: Vec<f64> = (0..cfg.total_epochs as u64 * spe).map(|s| lr_at(s, &cfg, spe).unwrap()).collect();
        let warm = (cfg.warmup_epochs as u64 * spe) as usize;
        assert!(lrs[..warm].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[warm..].windows(2).all(|w| w[0] >= w[1]));
    }

    fn params() -> ModelParams<f64> {
        let arch = Architecture { num_classes: 3, d_emb: 4, channels: vec![1, 2, 3], ..Architecture::default() };
        ModelParams::init(&arch, &mut rng::seeded(1)).unwrap()
    }

    fn filled(params: &ModelParams<f64>, v: f64) -> Grads<f64> {
        let mut g = Grads::zeros_like(params);
        g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|x| *x = v));
        g
    }

    #[test]
    fn plain_sgd_and_pure_decay() {
        let cfg = OptimConfig { momentum: 0.0, weight_decay: 0.0, ..OptimConfig::default() };
        let mut p = params();
        let before = p.clone();
        let mut st = OptimState::new(&p, 1, UpdateScope::Full);
        let g = filled(&p, 0.5);
        sgd_update(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        for ((_, _, a), (_, _, b)) in p.trainable().iter().zip(before.trainable()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, y - 0.1 * 0.5);
            }
        }

        let cfg = OptimConfig { momentum: 0.0, weight_decay: 5e-4, ..OptimConfig::default() };
        let mut p = params();
        let before = p.clone();
        let mut st = OptimState::new(&p, 1, UpdateScope::Full);
        let g = filled(&p, 0.0);
        sgd_update(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert!(p.bn_running_var == before.bn_running_var && p.bn_gamma == before.bn_gamma);
        for (x, y) in p.classifier_w.iter().zip(&before.classifier_w) {
            assert!((x - y * (1.0 - 0.1 * 5e-4)).abs() <= 1e-18);
        }
        assert_eq!(p.conv[0].biases, before.conv[0].biases);
    }

    #[test]
    fn zero_gradient_steps_are_noops() {
        let cfg = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
        let mut p = params();
        let before = p.clone();
        let mut st = OptimState::new(&p, 1, UpdateScope::Full);
        for _ in 0..2 {
            let g = filled(&p, 0.0);
        sgd_update(&mut p, &g, &mut st, 0.3, &cfg).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn classifier_scope_freezes_backbone() {
        let cfg = OptimConfig::default();
        let mut p = params();
        let before = p.clone();
        let mut st = OptimState::new(&p, 1, UpdateScope::ClassifierOnly);
        let g = filled(&p, 1.0);
        sgd_update(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert!(p.backbone_bits_eq(&before));
        assert_ne!(p.classifier_w, before.classifier_w);
    }

    #[test]
    fn non_finite_gradient_named() {
        let mut p = params();
        let mut g = Grads::zeros_like(&p);
        g.embed_b[0] = f64::NAN;
        let mut st = OptimState::new(&p, 1, UpdateScope::Full);
        let err = sgd_update(&mut p, &g, &mut st, 0.1, &OptimConfig::default()).unwrap_err();
        assert!(err.to_string().contains("embed_b"), "{err}");
    }
}
