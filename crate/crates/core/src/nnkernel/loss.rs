use rand::seq::SliceRandom;
use rand::RngCore;
use rand_distr::{Beta, Distribution};

use super::model::{Batch, Mix};
use super::{cast, Real};
use crate::{Error, Result};

/// Mean label-smoothed cross-entropy over a batch and its logit gradient.
///
/// The smoothed target is `(1 − ε)·onehot + ε/C`; the gradient is
/// `(softmax − target) / B`.
pub fn softmax_cross_entropy_ls<T: Real>(
    logits: &[T],
    num_classes: usize,
    labels: &[u32],
    epsilon: f64,
) -> Result<(f64, Vec<T>)> {
    mixed_cross_entropy(logits, num_classes, labels, None, epsilon)
}

/// Cross-entropy of a batch, honouring its mixup field:
/// `λ·CE(y) + (1 − λ)·CE(y[π])`.
pub fn batch_loss<T: Real>(logits: &[T], num_classes: usize, batch: &Batch<T>, epsilon: f64) -> Result<(f64, Vec<T>)> {
    let mix = batch.mix.as_ref().map(|m| (m.partner_labels.as_slice(), m.lambda));
    mixed_cross_entropy(logits, num_classes, &batch.labels, mix, epsilon)
}

fn mixed_cross_entropy<T: Real>(
    logits: &[T],
    c: usize,
    labels: &[u32],
    mix: Option<(&[u32], f64)>,
    epsilon: f64,
) -> Result<(f64, Vec<T>)> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config(format!("label smoothing must be in [0, 1), got {epsilon}")));
    }
    let b = labels.len();
    if b == 0 || c == 0 || logits.len() != b * c {
        return Err(Error::Shape(format!("{} logits for {b} labels and {c} classes", logits.len())));
    }
    if let Some((partner, _)) = mix {
        if partner.len() != b {
            return Err(Error::Shape("mixup partner labels do not match the batch".into()));
        }
    }
    let off = epsilon / c as f64;
    let on = 1.0 - epsilon + off;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for s in 0..b {
        let row: Vec<f64> = logits[s * c..(s + 1) * c].iter().map(|v| v.to_f64().unwrap()).collect();
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit in row {s}")));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let logp: Vec<f64> = row.iter().map(|v| v - lse).collect();
        let sum_logp: f64 = logp.iter().sum();

        let mut targets = vec![(labels[s], 1.0)];
        if let Some((partner, lambda)) = mix {
            targets[0].1 = lambda;
            targets.push((partner[s], 1.0 - lambda));
        }
        let mut t = vec![0.0; c];
        for (label, weight) in targets {
            let label = label as usize;
            if label >= c {
                return Err(Error::Shape(format!("label {label} out of range for {c} classes")));
            }
            loss -= weight * ((on - off) * logp[label] + off * sum_logp);
            for (k, tk) in t.iter_mut().enumerate() {
                *tk += weight * if k == label { on } else { off };
            }
        }
        for k in 0..c {
            grad.push(cast((logp[k].exp() - t[k]) / b as f64));
        }
    }
    Ok((loss / b as f64, grad))
}

/// Mixes a batch with a fixed weight and partner permutation.
pub fn mixup_with<T: Real>(batch: &Batch<T>, lambda: f64, permutation: &[usize]) -> Result<Batch<T>> {
    let b = batch.len();
    if permutation.len() != b {
        return Err(Error::Shape("permutation length differs from batch size".into()));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(format!("mixup weight {lambda} outside [0, 1]")));
    }
    let n = batch.height * batch.width;
    let l: T = cast(lambda);
    let r: T = cast(1.0 - lambda);
    let mut images = Vec::with_capacity(batch.images.len());
    for (s, &p) in permutation.iter().enumerate() {
        let x = &batch.images[s * n..(s + 1) * n];
        let y = &batch.images[p * n..(p + 1) * n];
        images.extend(x.iter().zip(y).map(|(a, b)| l * *a + r * *b));
    }
    Ok(Batch {
        images,
        height: batch.height,
        width: batch.width,
        labels: batch.labels.clone(),
        mix: Some(Mix {
            partner_labels: permutation.iter().map(|&p| batch.labels[p]).collect(),
            lambda,
        }),
    })
}

/// Image-space mixup: one `λ ~ Beta(α, α)` and one random permutation per batch.
pub fn mixup_batch<T: Real>(batch: &Batch<T>, alpha: f64, rng: &mut impl RngCore) -> Result<Batch<T>> {
    if !(alpha > 0.0) {
        return Err(Error::config(format!("mixup alpha must be positive, got {alpha}")));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::config(format!("mixup alpha: {e}")))?;
    let lambda: f64 = beta.sample(rng).clamp(0.0, 1.0);
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    mixup_with(batch, lambda, &perm)
}
