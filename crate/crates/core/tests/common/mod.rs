#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, Normal};
use tailforge::nnkernel::{forward, mixup_with, Architecture, Batch, Mode, ModelParams};
use tailforge::rng;

pub const GRAD_RES: usize = 12;

/// Random 64-bit parameters and batch whose ReLU pre-activations all sit at
/// least `1e-4` from zero, so central differences never straddle a kink.
/// Every other draw uses a mixup batch.
pub fn gradcheck_draw(seed: u64) -> (ModelParams<f64>, Batch<f64>) {
    let arch = Architecture { channels: vec![1, 4, 6], d_emb: 8, num_classes: 5, ..Architecture::default() };
    for attempt in 0u64.. {
        let mut r = rng::substream(seed, attempt);
        let mut params: ModelParams<f64> = ModelParams::init(&arch, &mut r).unwrap();
        let wide = Normal::new(0.0, 0.5).unwrap();
        for v in params
            .conv
            .iter_mut()
            .flat_map(|l| l.biases.iter_mut())
            .chain(params.embed_b.iter_mut())
            .chain(params.bn_beta.iter_mut())
            .chain(params.classifier_w.iter_mut())
        {
            *v = wide.sample(&mut r);
        }
        for g in params.bn_gamma.iter_mut() {
            *g = 1.0 + wide.sample(&mut r);
        }
        let b = 6;
        let images: Vec<f64> = (0..b * GRAD_RES * GRAD_RES).map(|_| r.random::<f64>()).collect();
        let labels: Vec<u32> = (0..b).map(|_| r.random_range(0..5)).collect();
        let mut batch = Batch::new(images, GRAD_RES, GRAD_RES, labels).unwrap();
        if seed % 2 == 1 {
            let perm: Vec<usize> = (0..b).map(|i| (i + 1) % b).collect();
            batch = mixup_with(&batch, r.random_range(0.2..0.8), &perm).unwrap();
        }
        let cache = forward(&params, &batch.images, GRAD_RES, GRAD_RES, Mode::Train).unwrap();
        if cache.min_abs_preactivation() > 1e-4 {
            return (params, batch);
        }
    }
    unreachable!()
}
