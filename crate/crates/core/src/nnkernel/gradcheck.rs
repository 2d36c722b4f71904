use rand::seq::index::sample;

use super::loss::batch_loss;
use super::model::{backward, forward, Batch, Mode};
use super::ModelParams;
use crate::rng;
use crate::Result;

/// Label smoothing used by the gradient check's loss, so the smoothing path
/// is exercised too.
const CHECK_SMOOTHING: f64 = 0.1;
const MIN_CHECKED: usize = 256;
/// Entries whose analytic and numeric gradients are both below this are
/// rounding noise and are not compared.
const DENOM_FLOOR: f64 = 1e-8;

/// Train-mode loss of `batch` under `params` (running statistics untouched).
pub fn gradcheck_loss(params: &ModelParams<f64>, batch: &Batch<f64>) -> Result<f64> {
    let cache = forward(params, &batch.images, batch.height, batch.width, Mode::Train)?;
    Ok(batch_loss(cache.logits(), params.num_classes(), batch, CHECK_SMOOTHING)?.0)
}

/// Largest relative error `|a − n| / max(|a|, |n|, 1e-8)` between analytic
/// gradients and central differences `(L(θ+h) − L(θ−h)) / 2h`, over a seeded
/// subsample of scalar parameters drawn from every trainable tensor.
pub fn gradcheck(params: &ModelParams<f64>, batch: &Batch<f64>, h: f64, seed: u64) -> Result<f64> {
    let cache = forward(params, &batch.images, batch.height, batch.width, Mode::Train)?;
    let (_, dlogits) = batch_loss(cache.logits(), params.num_classes(), batch, CHECK_SMOOTHING)?;
    let grads = backward(params, &cache, &dlogits)?;
    let analytic = grads.tensors();

    let total: usize = analytic.iter().map(|t| t.len()).sum();
    let mut rng = rng::seeded(seed);
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (t, grad) in analytic.iter().enumerate() {
        let len = grad.len();
        let want = (len * MIN_CHECKED).div_ceil(total).max(8).min(len);
        for idx in sample(&mut rng, len, want).into_vec() {
            let original = probe.trainable()[t].2[idx];
            probe.trainable_mut()[t].2[idx] = original + h;
            let plus = gradcheck_loss(&probe, batch)?;
            probe.trainable_mut()[t].2[idx] = original - h;
            let minus = gradcheck_loss(&probe, batch)?;
            probe.trainable_mut()[t].2[idx] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let a = grad[idx];
            let scale = a.abs().max(numeric.abs());
            if scale <= DENOM_FLOOR {
                continue;
            }
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
