//! From-scratch differentiable classifier.
//!
//! Architecture: a stack of 3×3 stride-2 convolutions with ReLU, global
//! average pooling, an affine embedding, a batch-norm neck and a bias-free
//! linear classifier. Every tensor is generic over [`Real`] so the same code
//! trains in `f32` and is gradient-checked in `f64`.

mod checkpoint;
mod conv;
mod gradcheck;
mod loss;
mod model;

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use gradcheck::{gradcheck, gradcheck_loss};
pub use loss::{batch_loss, mixup_batch, mixup_with, softmax_cross_entropy_ls};
pub(crate) use model::classifier_grad;
pub use model::{
    backward, eval_logits, forward, predict_proba, predict_proba_one, softmax_f64, Batch, ForwardCache, Mix, Mode,
};

/// Floating-point element type of model tensors.
pub trait Real: Float + FromPrimitive + NumAssign + Sum + Send + Sync + Debug + Default + 'static {}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}

/// Shape hyperparameters of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    /// Channel counts, input first. `[1, 8, 16]` is two conv layers.
    pub channels: Vec<usize>,
    pub d_emb: usize,
    pub num_classes: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: vec![1, 8, 16],
            d_emb: 64,
            num_classes: 10,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl Architecture {
    pub fn d_feat(&self) -> usize {
        *self.channels.last().expect("validated channel list")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::config("architecture needs at least one conv layer with non-zero channels"));
        }
        if self.channels[0] != 1 {
            return Err(Error::config("input images are single-channel; channels[0] must be 1"));
        }
        if self.d_emb == 0 || self.num_classes == 0 {
            return Err(Error::config("d_emb and num_classes must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_eps must be > 0 and bn_momentum in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out_ch × in_ch × 3 × 3`, row-major.
    pub kernels: Vec<T>,
    pub biases: Vec<T>,
}

/// All learnable tensors plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub conv: Vec<ConvLayer<T>>,
    /// `d_emb × d_feat`.
    pub embed_w: Vec<T>,
    pub embed_b: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub bn_running_mean: Vec<T>,
    pub bn_running_var: Vec<T>,
    /// `num_classes × d_emb`; row `i` is the weight vector of class `i`.
    pub classifier_w: Vec<T>,
}

/// How the optimizer treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    ConvKernel,
    ConvBias,
    EmbedWeight,
    EmbedBias,
    BnGamma,
    BnBeta,
    Classifier,
}

impl TensorKind {
    /// Weight decay applies to weights only; never to biases or BN affine terms.
    pub fn decays(self) -> bool {
        matches!(self, TensorKind::ConvKernel | TensorKind::EmbedWeight | TensorKind::Classifier)
    }

    pub fn is_classifier(self) -> bool {
        self == TensorKind::Classifier
    }
}

fn normal_fill<T: Real>(n: usize, std: f64, rng: &mut impl RngCore) -> Vec<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| cast(dist.sample(rng))).collect()
}

/// Standard deviation used for classifier rows at (re-)initialization.
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

impl<T: Real> ModelParams<T> {
    /// He-normal conv and embedding weights, zero biases, unit BN scale and
    /// `N(0, 0.01²)` classifier rows.
    pub fn init(arch: &Architecture, rng: &mut impl RngCore) -> Result<Self> {
        arch.validate()?;
        let conv = arch
            .channels
            .windows(2)
            .map(|w| {
                let (in_ch, out_ch) = (w[0], w[1]);
                ConvLayer {
                    in_ch,
                    out_ch,
                    kernels: normal_fill(out_ch * in_ch * 9, (2.0 / (in_ch * 9) as f64).sqrt(), rng),
                    biases: vec![T::zero(); out_ch],
                }
            })
            .collect();
        let d_feat = arch.d_feat();
        let d = arch.d_emb;
        Ok(Self {
            conv,
            embed_w: normal_fill(d * d_feat, (2.0 / d_feat as f64).sqrt(), rng),
            embed_b: vec![T::zero(); d],
            bn_gamma: vec![T::one(); d],
            bn_beta: vec![T::zero(); d],
            bn_running_mean: vec![T::zero(); d],
            bn_running_var: vec![T::one(); d],
            classifier_w: normal_fill(arch.num_classes * d, CLASSIFIER_INIT_STD, rng),
            arch: arch.clone(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn d_emb(&self) -> usize {
        self.arch.d_emb
    }

    pub fn reinit_classifier(&mut self, rng: &mut impl RngCore) {
        self.classifier_w = normal_fill(self.classifier_w.len(), CLASSIFIER_INIT_STD, rng);
    }

    /// Trainable tensors in canonical order with their names.
    pub fn trainable(&self) -> Vec<(String, TensorKind, &[T])> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}_kernels"), TensorKind::ConvKernel, layer.kernels.as_slice()));
            out.push((format!("conv{i}_biases"), TensorKind::ConvBias, layer.biases.as_slice()));
        }
        out.push(("embed_w".into(), TensorKind::EmbedWeight, self.embed_w.as_slice()));
        out.push(("embed_b".into(), TensorKind::EmbedBias, self.embed_b.as_slice()));
        out.push(("bn_gamma".into(), TensorKind::BnGamma, self.bn_gamma.as_slice()));
        out.push(("bn_beta".into(), TensorKind::BnBeta, self.bn_beta.as_slice()));
        out.push(("classifier_w".into(), TensorKind::Classifier, self.classifier_w.as_slice()));
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, TensorKind, &mut [T])> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}_kernels"), TensorKind::ConvKernel, layer.kernels.as_mut_slice()));
            out.push((format!("conv{i}_biases"), TensorKind::ConvBias, layer.biases.as_mut_slice()));
        }
        out.push(("embed_w".into(), TensorKind::EmbedWeight, self.embed_w.as_mut_slice()));
        out.push(("embed_b".into(), TensorKind::EmbedBias, self.embed_b.as_mut_slice()));
        out.push(("bn_gamma".into(), TensorKind::BnGamma, self.bn_gamma.as_mut_slice()));
        out.push(("bn_beta".into(), TensorKind::BnBeta, self.bn_beta.as_mut_slice()));
        out.push(("classifier_w".into(), TensorKind::Classifier, self.classifier_w.as_mut_slice()));
        out
    }

    /// Checks mutual shape consistency and positivity of the running variance.
    pub fn validate(&self) -> Result<()> {
        let arch = &self.arch;
        arch.validate()?;
        if self.conv.len() + 1 != arch.channels.len() {
            return Err(Error::Shape("conv layer count does not match architecture".into()));
        }
        for (i, layer) in self.conv.iter().enumerate() {
            if layer.in_ch != arch.channels[i]
                || layer.out_ch != arch.channels[i + 1]
                || layer.kernels.len() != layer.out_ch * layer.in_ch * 9
                || layer.biases.len() != layer.out_ch
            {
                return Err(Error::Shape(format!("conv layer {i} has inconsistent shape")));
            }
        }
        let d = arch.d_emb;
        let checks = [
            ("embed_w", self.embed_w.len(), d * arch.d_feat()),
            ("embed_b", self.embed_b.len(), d),
            ("bn_gamma", self.bn_gamma.len(), d),
            ("bn_beta", self.bn_beta.len(), d),
            ("bn_running_mean", self.bn_running_mean.len(), d),
            ("bn_running_var", self.bn_running_var.len(), d),
            ("classifier_w", self.classifier_w.len(), d * arch.num_classes),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!("{name}: expected {want} values, found {got}")));
            }
        }
        if self.bn_running_var.iter().any(|v| !(*v > T::zero())) {
            return Err(Error::Validation("bn_running_var must be strictly positive".into()));
        }
        Ok(())
    }

    /// Element-type conversion (e.g. an `f32` checkpoint into `f64` for checking).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv_v = |v: &[T]| -> Vec<U> { v.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect() };
        ModelParams {
            arch: self.arch.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    in_ch: l.in_ch,
                    out_ch: l.out_ch,
                    kernels: conv_v(&l.kernels),
                    biases: conv_v(&l.biases),
                })
                .collect(),
            embed_w: conv_v(&self.embed_w),
            embed_b: conv_v(&self.embed_b),
            bn_gamma: conv_v(&self.bn_gamma),
            bn_beta: conv_v(&self.bn_beta),
            bn_running_mean: conv_v(&self.bn_running_mean),
            bn_running_var: conv_v(&self.bn_running_var),
            classifier_w: conv_v(&self.classifier_w),
        }
    }

    /// True when every tensor other than the classifier is bitwise equal.
    pub fn backbone_bits_eq(&self, other: &Self) -> bool {
        self.conv == other.conv
            && self.embed_w == other.embed_w
            && self.embed_b == other.embed_b
            && self.bn_gamma == other.bn_gamma
            && self.bn_beta == other.bn_beta
            && self.bn_running_mean == other.bn_running_mean
            && self.bn_running_var == other.bn_running_var
    }
}

/// Gradients for every trainable tensor, laid out like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub conv: Vec<(Vec<T>, Vec<T>)>,
    pub embed_w: Vec<T>,
    pub embed_b: Vec<T>,
    pub bn_gamma: Vec<T>,
    pub bn_beta: Vec<T>,
    pub classifier_w: Vec<T>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            conv: params
                .conv
                .iter()
                .map(|l| (vec![T::zero(); l.kernels.len()], vec![T::zero(); l.biases.len()]))
                .collect(),
            embed_w: vec![T::zero(); params.embed_w.len()],
            embed_b: vec![T::zero(); params.embed_b.len()],
            bn_gamma: vec![T::zero(); params.bn_gamma.len()],
            bn_beta: vec![T::zero(); params.bn_beta.len()],
            classifier_w: vec![T::zero(); params.classifier_w.len()],
        }
    }

    /// Tensors in the same order as [`ModelParams::trainable`].
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (k, b) in &self.conv {
            out.push(k);
            out.push(b);
        }
        out.extend([
            self.embed_w.as_slice(),
            self.embed_b.as_slice(),
            self.bn_gamma.as_slice(),
            self.bn_beta.as_slice(),
            self.classifier_w.as_slice(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (k, b) in &mut self.conv {
            out.push(k);
            out.push(b);
        }
        out.extend([
            self.embed_w.as_mut_slice(),
            self.embed_b.as_mut_slice(),
            self.bn_gamma.as_mut_slice(),
            self.bn_beta.as_mut_slice(),
            self.classifier_w.as_mut_slice(),
        ]);
        out
    }
}
