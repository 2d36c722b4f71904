use rayon::prelude::*;

use super::conv::{conv_backward, conv_forward, out_size};
use super::{cast, Grads, ModelParams, Real};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in the BN neck.
    Train,
    /// Running statistics; every sample is processed independently.
    Eval,
}

/// Mixup partner labels and mixing weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Mix {
    pub partner_labels: Vec<u32>,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `B × H × W`, row-major.
    pub images: Vec<T>,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub mix: Option<Mix>,
}

impl<T: Real> Batch<T> {
    pub fn new(images: Vec<T>, height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let b = labels.len();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if images.len() != b * height * width {
            return Err(Error::Shape(format!(
                "batch of {b} {height}x{width} images needs {} values, got {}",
                b * height * width,
                images.len()
            )));
        }
        Ok(Self { images, height, width, labels, mix: None })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Vec<T>,
    h: usize,
    w: usize,
    pre: Vec<T>,
}

/// Intermediates kept by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    batch: usize,
    samples: Vec<Vec<LayerCache<T>>>,
    features: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    bn_out: Vec<T>,
    logits: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    /// BN-neck output (classifier input), `B × d_emb`.
    pub fn bn_output(&self) -> &[T] {
        &self.bn_out
    }

    /// Pooled backbone features, `B × d_feat`.
    pub fn features(&self) -> &[T] {
        &self.features
    }

    /// Biased batch mean and variance of the pre-BN embedding (train mode only).
    pub fn batch_stats(&self) -> Option<(&[T], &[T])> {
        (self.mode == Mode::Train).then_some((self.batch_mean.as_slice(), self.batch_var.as_slice()))
    }

    /// Folds this batch's statistics into the running estimates:
    /// `running ← (1 − m)·running + m·batch`, with the unbiased variance.
    pub fn commit_bn_stats(&self, params: &mut ModelParams<T>) {
        if self.mode != Mode::Train {
            return;
        }
        let m: T = cast(params.arch.bn_momentum);
        let one_m = T::one() - m;
        let b = T::from_usize(self.batch).unwrap();
        let unbias = b / (b - T::one());
        for j in 0..params.d_emb() {
            params.bn_running_mean[j] = one_m * params.bn_running_mean[j] + m * self.batch_mean[j];
            params.bn_running_var[j] = one_m * params.bn_running_var[j] + m * self.batch_var[j] * unbias;
        }
    }

    /// Smallest |pre-activation| over all conv units; finite-difference checks
    /// are only meaningful when no unit sits on the ReLU kink.
    pub fn min_abs_preactivation(&self) -> T {
        self.samples
            .iter()
            .flat_map(|s| s.iter())
            .flat_map(|l| l.pre.iter())
            .fold(T::infinity(), |acc, v| acc.min(v.abs()))
    }
}

fn backbone<T: Real>(
    params: &ModelParams<T>,
    image: &[T],
    h: usize,
    w: usize,
    keep: bool,
) -> (Vec<T>, Vec<LayerCache<T>>) {
    let mut act = image.to_vec();
    let (mut ch, mut hh, mut ww) = (1usize, h, w);
    let mut caches = Vec::new();
    for layer in &params.conv {
        let pre = conv_forward(&act, ch, hh, ww, &layer.kernels, &layer.biases, layer.out_ch);
        let next: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
        if keep {
            caches.push(LayerCache { input: act, h: hh, w: ww, pre });
        }
        act = next;
        ch = layer.out_ch;
        hh = out_size(hh);
        ww = out_size(ww);
    }
    let area = T::from_usize(hh * ww).unwrap();
    let feat = (0..ch)
        .map(|c| act[c * hh * ww..(c + 1) * hh * ww].iter().copied().sum::<T>() / area)
        .collect();
    (feat, caches)
}

fn embed<T: Real>(params: &ModelParams<T>, feat: &[T]) -> Vec<T> {
    let d_feat = feat.len();
    (0..params.d_emb())
        .map(|j| {
            let row = &params.embed_w[j * d_feat..(j + 1) * d_feat];
            let mut acc = params.embed_b[j];
            for (a, b) in row.iter().zip(feat) {
                acc += *a * *b;
            }
            acc
        })
        .collect()
}

fn classify<T: Real>(params: &ModelParams<T>, y: &[T]) -> Vec<T> {
    let d = params.d_emb();
    (0..params.num_classes())
        .map(|k| {
            let row = &params.classifier_w[k * d..(k + 1) * d];
            let mut acc = T::zero();
            for (a, b) in row.iter().zip(y) {
                acc += *a * *b;
            }
            acc
        })
        .collect()
}

fn check_images<T>(params: &ModelParams<T>, len: usize, h: usize, w: usize) -> Result<usize> {
    if h == 0 || w == 0 || len % (h * w) != 0 {
        return Err(Error::Shape(format!("{len} values is not a whole number of {h}x{w} images")));
    }
    let _ = params;
    Ok(len / (h * w))
}

/// Eval-mode logits of a single `h × w` image.
pub fn eval_logits<T: Real>(params: &ModelParams<T>, image: &[T], h: usize, w: usize) -> Vec<T> {
    let (feat, _) = backbone(params, image, h, w, false);
    let z = embed(params, &feat);
    let eps: T = cast(params.arch.bn_eps);
    let y: Vec<T> = (0..params.d_emb())
        .map(|j| {
            let inv = T::one() / (params.bn_running_var[j] + eps).sqrt();
            params.bn_gamma[j] * (z[j] - params.bn_running_mean[j]) * inv + params.bn_beta[j]
        })
        .collect();
    classify(params, &y)
}

/// Forward pass over a batch.
///
/// Train mode normalizes with batch statistics and requires at least two
/// samples; it does not touch the running statistics (see
/// [`ForwardCache::commit_bn_stats`]). Eval mode is a per-sample function of
/// the parameters, so a sample's logits never depend on its batch mates.
pub fn forward<T: Real>(
    params: &ModelParams<T>,
    images: &[T],
    h: usize,
    w: usize,
    mode: Mode,
) -> Result<ForwardCache<T>> {
    let b = check_images(params, images.len(), h, w)?;
    if mode == Mode::Train && b < 2 {
        return Err(Error::config("train-mode batch norm needs a batch of at least 2 samples"));
    }
    let per_sample: Vec<(Vec<T>, Vec<LayerCache<T>>)> = images
        .par_chunks(h * w)
        .map(|img| backbone(params, img, h, w, true))
        .collect();
    let d_feat = params.arch.d_feat();
    let d = params.d_emb();
    let mut features = Vec::with_capacity(b * d_feat);
    let mut samples = Vec::with_capacity(b);
    for (f, c) in per_sample {
        features.extend_from_slice(&f);
        samples.push(c);
    }
    let mut z = Vec::with_capacity(b * d);
    for s in 0..b {
        z.extend(embed(params, &features[s * d_feat..(s + 1) * d_feat]));
    }

    let eps: T = cast(params.arch.bn_eps);
    let (mean, var) = match mode {
        Mode::Train => {
            let bt = T::from_usize(b).unwrap();
            let mut mean = vec![T::zero(); d];
            for s in 0..b {
                for j in 0..d {
                    mean[j] += z[s * d + j];
                }
            }
            mean.iter_mut().for_each(|m| *m /= bt);
            let mut var = vec![T::zero(); d];
            for s in 0..b {
                for j in 0..d {
                    let c = z[s * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= bt);
            (mean, var)
        }
        Mode::Eval => (params.bn_running_mean.clone(), params.bn_running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(b * d);
    let mut bn_out = Vec::with_capacity(b * d);
    for s in 0..b {
        for j in 0..d {
            let xh = (z[s * d + j] - mean[j]) * inv_std[j];
            xhat.push(xh);
            bn_out.push(params.bn_gamma[j] * xh + params.bn_beta[j]);
        }
    }
    let mut logits = Vec::with_capacity(b * params.num_classes());
    for s in 0..b {
        logits.extend(classify(params, &bn_out[s * d..(s + 1) * d]));
    }
    let (batch_mean, batch_var) = if mode == Mode::Train { (mean, var) } else { (Vec::new(), Vec::new()) };
    Ok(ForwardCache {
        mode,
        batch: b,
        samples,
        features,
        xhat,
        inv_std,
        bn_out,
        logits,
        batch_mean,
        batch_var,
    })
}

/// Gradient of the classifier weights only: `dW = dlogitsᵀ · bn_out`.
pub(crate) fn classifier_grad<T: Real>(
    params: &ModelParams<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
) -> Result<Vec<T>> {
    let (b, c, d) = (cache.batch, params.num_classes(), params.d_emb());
    if dlogits.len() != b * c {
        return Err(Error::Shape(format!("dlogits has {} values, expected {}", dlogits.len(), b * c)));
    }
    let mut g = vec![T::zero(); c * d];
    for s in 0..b {
        let y = &cache.bn_out[s * d..(s + 1) * d];
        for k in 0..c {
            let dl = dlogits[s * c + k];
            if dl == T::zero() {
                continue;
            }
            let row = &mut g[k * d..(k + 1) * d];
            for (gv, yv) in row.iter_mut().zip(y) {
                *gv += dl * *yv;
            }
        }
    }
    Ok(g)
}

/// Exact reverse-mode gradients of a scalar loss whose logit gradient is
/// `dlogits`. Running statistics receive no gradient.
pub fn backward<T: Real>(params: &ModelParams<T>, cache: &ForwardCache<T>, dlogits: &[T]) -> Result<Grads<T>> {
    let (b, c, d) = (cache.batch, params.num_classes(), params.d_emb());
    let mut grads = Grads::zeros_like(params);
    grads.classifier_w = classifier_grad(params, cache, dlogits)?;
    if cache.samples.len() != b || cache.samples.iter().any(|s| s.len() != params.conv.len()) {
        return Err(Error::Shape("forward cache does not match the parameters".into()));
    }

    // Classifier input gradient.
    let mut dy = vec![T::zero(); b * d];
    for s in 0..b {
        for k in 0..c {
            let dl = dlogits[s * c + k];
            if dl == T::zero() {
                continue;
            }
            let row = &params.classifier_w[k * d..(k + 1) * d];
            for (dv, wv) in dy[s * d..(s + 1) * d].iter_mut().zip(row) {
                *dv += dl * *wv;
            }
        }
    }

    // BN neck.
    let mut dz = vec![T::zero(); b * d];
    for j in 0..d {
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for s in 0..b {
            let g = dy[s * d + j];
            grads.bn_gamma[j] += g * cache.xhat[s * d + j];
            grads.bn_beta[j] += g;
            let dxh = g * params.bn_gamma[j];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * cache.xhat[s * d + j];
        }
        match cache.mode {
            Mode::Train => {
                let bt = T::from_usize(b).unwrap();
                for s in 0..b {
                    let dxh = dy[s * d + j] * params.bn_gamma[j];
                    dz[s * d + j] =
                        cache.inv_std[j] / bt * (bt * dxh - sum_dxhat - cache.xhat[s * d + j] * sum_dxhat_xhat);
                }
            }
            Mode::Eval => {
                for s in 0..b {
                    dz[s * d + j] = dy[s * d + j] * params.bn_gamma[j] * cache.inv_std[j];
                }
            }
        }
    }

    // Embedding.
    let d_feat = params.arch.d_feat();
    let mut dfeat = vec![T::zero(); b * d_feat];
    for s in 0..b {
        let f = &cache.features[s * d_feat..(s + 1) * d_feat];
        for j in 0..d {
            let g = dz[s * d + j];
            grads.embed_b[j] += g;
            let wrow = &params.embed_w[j * d_feat..(j + 1) * d_feat];
            let grow = &mut grads.embed_w[j * d_feat..(j + 1) * d_feat];
            for q in 0..d_feat {
                grow[q] += g * f[q];
                dfeat[s * d_feat + q] += g * wrow[q];
            }
        }
    }

    // Backbone, one sample at a time; per-sample gradients are summed in
    // sample order so the thread count never changes the result.
    let per_sample: Vec<Vec<(Vec<T>, Vec<T>)>> = cache
        .samples
        .par_iter()
        .enumerate()
        .map(|(s, layers)| backbone_backward(params, layers, &dfeat[s * d_feat..(s + 1) * d_feat]))
        .collect();
    for sample in per_sample {
        for (acc, (gk, gb)) in grads.conv.iter_mut().zip(sample) {
            for (a, v) in acc.0.iter_mut().zip(gk) {
                *a += v;
            }
            for (a, v) in acc.1.iter_mut().zip(gb) {
                *a += v;
            }
        }
    }
    Ok(grads)
}

fn backbone_backward<T: Real>(
    params: &ModelParams<T>,
    layers: &[LayerCache<T>],
    dfeat: &[T],
) -> Vec<(Vec<T>, Vec<T>)> {
    let last = layers.last().expect("at least one conv layer");
    let (oh, ow) = (out_size(last.h), out_size(last.w));
    let area = T::from_usize(oh * ow).unwrap();
    // Gradient w.r.t. the last layer's ReLU output.
    let mut dact: Vec<T> = dfeat
        .iter()
        .flat_map(|g| std::iter::repeat_n(*g / area, oh * ow))
        .collect();
    let mut out: Vec<(Vec<T>, Vec<T>)> = params
        .conv
        .iter()
        .map(|l| (vec![T::zero(); l.kernels.len()], vec![T::zero(); l.biases.len()]))
        .collect();
    for (li, (layer, cache)) in params.conv.iter().zip(layers).enumerate().rev() {
        let dpre: Vec<T> = dact
            .iter()
            .zip(&cache.pre)
            .map(|(g, p)| if *p > T::zero() { *g } else { T::zero() })
            .collect();
        let (dk, db) = &mut out[li];
        let din = conv_backward(
            &cache.input,
            layer.in_ch,
            cache.h,
            cache.w,
            &layer.kernels,
            layer.out_ch,
            &dpre,
            dk,
            db,
            li > 0,
        );
        if let Some(din) = din {
            dact = din;
        }
    }
    out
}

/// Row-wise softmax in `f64`.
pub fn softmax_f64<T: Real>(logits: &[T]) -> Vec<f64> {
    let vals: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap()).collect();
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = vals.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn predict_proba_one<T: Real>(params: &ModelParams<T>, image: &[T], h: usize, w: usize) -> Vec<f64> {
    softmax_f64(&eval_logits(params, image, h, w))
}

/// Eval-mode class probabilities, `B × C` in `f64`.
pub fn predict_proba<T: Real>(params: &ModelParams<T>, images: &[T], h: usize, w: usize) -> Result<Vec<f64>> {
    check_images(params, images.len(), h, w)?;
    let rows: Vec<Vec<f64>> = images
        .par_chunks(h * w)
        .map(|img| predict_proba_one(params, img, h, w))
        .collect();
    Ok(rows.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkernel::Architecture;
    use crate::rng;
    use rand::Rng as _;

    fn setup(b: usize) -> (ModelParams<f64>, Vec<f64>) {
        let arch = Architecture { num_classes: 5, d_emb: 6, ..Architecture::default() };
        let mut r = rng::seeded(3);
        let mut params = ModelParams::<f64>::init(&arch, &mut r).unwrap();
        for v in params.bn_running_mean.iter_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        for v in params.bn_running_var.iter_mut() {
            *v = r.random_range(0.5..2.0);
        }
        let images = (0..b * 100).map(|_| r.random_range(0.0..1.0)).collect();
        (params, images)
    }

    #[test]
    fn eval_is_batch_independent() {
        let (params, images) = setup(4);
        let batched = forward(&params, &images, 10, 10, Mode::Eval).unwrap();
        for s in 0..4 {
            let alone = forward(&params, &images[s * 100..(s + 1) * 100], 10, 10, Mode::Eval).unwrap();
            assert_eq!(alone.logits(), &batched.logits()[s * 5..(s + 1) * 5]);
        }
    }

    #[test]
    fn zero_classifier_gives_zero_logits() {
        let (mut params, images) = setup(3);
        params.classifier_w.iter_mut().for_each(|v| *v = 0.0);
        let cache = forward(&params, &images, 10, 10, Mode::Train).unwrap();
        assert!(cache.logits().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_sample_train_batch_rejected() {
        let (params, images) = setup(1);
        let err = forward(&params, &images, 10, 10, Mode::Train).unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn proba_rows_sum_to_one() {
        let (params, images) = setup(4);
        let p = predict_proba(&params, &images, 10, 10).unwrap();
        for row in p.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let a = softmax_f64(&[0.3f64, -1.0, 2.0]);
        let b = softmax_f64(&[10.3f64, 9.0, 12.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn running_mean_recurrence() {
        let (mut params, images) = setup(4);
        params.arch.bn_momentum = 0.1;
        let before_mean = params.bn_running_mean.clone();
        let before_var = params.bn_running_var.clone();
        let cache = forward(&params, &images, 10, 10, Mode::Train).unwrap();
        let (bm, bv) = cache.batch_stats().unwrap();
        let (bm, bv) = (bm.to_vec(), bv.to_vec());
        cache.commit_bn_stats(&mut params);
        for j in 0..params.d_emb() {
            assert_eq!(params.bn_running_mean[j], 0.9 * before_mean[j] + 0.1 * bm[j]);
            assert_eq!(params.bn_running_var[j], 0.9 * before_var[j] + 0.1 * bv[j] * (4.0 / 3.0));
        }
    }

    #[test]
    fn zero_dlogits_zero_grads_and_linearity() {
        let (params, images) = setup(3);
        let cache = forward(&params, &images, 10, 10, Mode::Train).unwrap();
        let zero = vec![0.0; 15];
        let g = backward(&params, &cache, &zero).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|v| *v == 0.0)));

        let mut r = rng::seeded(9);
        let dl: Vec<f64> = (0..15).map(|_| r.random_range(-1.0..1.0)).collect();
        let dl2: Vec<f64> = dl.iter().map(|v| 2.0 * v).collect();
        let g1 = backward(&params, &cache, &dl).unwrap();
        let g2 = backward(&params, &cache, &dl2).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn dlogits_shape_checked() {
        let (params, images) = setup(3);
        let cache = forward(&params, &images, 10, 10, Mode::Train).unwrap();
        assert!(matches!(backward(&params, &cache, &[0.0; 4]), Err(Error::Shape(_))));
    }
}
