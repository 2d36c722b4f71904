//! Long-tailed, noisily labelled classification on synthetic glyph data.
//!
//! The crate is organised around the training recipe it exercises:
//!
//! * [`synthbench`] generates long-tailed glyph datasets with a ground-truth
//!   label-noise ledger.
//! * [`nnkernel`] is a small from-scratch convolutional classifier with an
//!   embedding layer, a batch-norm neck and a bias-free linear head.
//! * [`optimizer`], [`sampling`] and [`train`] form the training loop.
//! * [`cleanse`] iteratively removes (or relabels) suspected noisy samples.
//! * [`decouple`] rebalances the classifier: tau-normalization, class-balanced
//!   retraining, balanced-subset finetuning.
//! * [`imageops`] holds the augmentation and ten-crop test-time pipeline.
//! * [`ensemble`] holds truncated prediction records, averaging and metrics.
//! * [`runner`] wires everything into staged, reproducible experiments.

pub mod cleanse;
pub mod decouple;
pub mod ensemble;
pub mod error;
pub mod imageops;
pub mod nnkernel;
pub mod optimizer;
pub mod rng;
pub mod runner;
pub mod sampling;
pub mod synthbench;
pub mod threads;
pub mod train;

pub use error::{Error, Result};
