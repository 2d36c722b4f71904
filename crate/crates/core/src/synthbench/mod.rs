//! Deterministic long-tailed glyph datasets with injected label noise.

pub mod glyph;
pub mod io;

use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use glyph::{gen_glyph, ClassPattern, GlyphStyle};
pub use io::{read_dataset, write_dataset, DATASET_FORMAT_VERSION};

use crate::imageops::Image;
use crate::{rng, Error, Result};

const NOISE_STREAM_TAG: u64 = 0x6e6f_6973_65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountProfile {
    /// `n_max · ratio^(−c/(C−1))`.
    Exponential,
    /// First half of the classes at `n_max`, the rest at `n_max / ratio`.
    Step,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Uniformly random wrong class.
    Symmetric,
    /// Class `c` becomes `(c + 1) mod C`.
    Asymmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance_ratio: f64,
    pub profile: CountProfile,
    pub base_resolution: usize,
    pub noise_rate: f64,
    pub noise_mode: NoiseMode,
    pub seed: u64,
    /// Samples per class in the balanced, noise-free validation split.
    pub val_per_class: usize,
    pub glyph: GlyphStyle,
}

impl Default for DatasetSpec {
    /// The standard benchmark: 50 classes, 200 samples in the head class,
    /// imbalance ratio 100, 20% symmetric noise, 24×24 glyphs.
    fn default() -> Self {
        Self {
            num_classes: 50,
            max_count: 200,
            imbalance_ratio: 100.0,
            profile: CountProfile::Exponential,
            base_resolution: 24,
            noise_rate: 0.2,
            noise_mode: NoiseMode::Symmetric,
            seed: 0,
            val_per_class: 20,
            glyph: GlyphStyle::default(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        gen_class_counts(self.num_classes, self.max_count, self.imbalance_ratio, self.profile)?;
        if self.base_resolution < 8 {
            return Err(Error::config("base_resolution must be at least 8"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!("noise_rate must be in [0, 1), got {}", self.noise_rate)));
        }
        if self.val_per_class == 0 {
            return Err(Error::config("val_per_class must be positive"));
        }
        let g = &self.glyph;
        if [g.pixel_noise, g.max_rotation, g.max_scale, g.max_shift].iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("glyph style parameters must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        gen_class_counts(self.num_classes, self.max_count, self.imbalance_ratio, self.profile)
    }

    /// Parameters of the balanced, clean validation split.
    pub fn validation_spec(&self) -> Self {
        Self {
            max_count: self.val_per_class,
            imbalance_ratio: 1.0,
            noise_rate: 0.0,
            seed: self.seed.wrapping_add(1),
            ..self.clone()
        }
    }
}

/// Per-class sample counts, non-increasing in the class index.
pub fn gen_class_counts(num_classes: usize, max_count: usize, ratio: f64, profile: CountProfile) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::config("need at least 2 classes"));
    }
    if max_count == 0 {
        return Err(Error::config("max_count must be positive"));
    }
    if !(ratio >= 1.0) || !ratio.is_finite() {
        return Err(Error::config(format!("imbalance ratio must be a finite value >= 1, got {ratio}")));
    }
    if ratio > max_count as f64 {
        return Err(Error::config(format!(
            "imbalance ratio {ratio} exceeds max_count {max_count}; the tail class would be empty"
        )));
    }
    let last = (num_classes - 1) as f64;
    let counts = (0..num_classes)
        .map(|c| {
            let v = match profile {
                CountProfile::Exponential => max_count as f64 * ratio.powf(-(c as f64) / last),
                CountProfile::Step if c < num_classes.div_ceil(2) => max_count as f64,
                CountProfile::Step => max_count as f64 / ratio,
            };
            (v.round() as usize).max(1)
        })
        .collect();
    Ok(counts)
}

/// Flips each label independently with probability `rate`.
pub fn inject_label_noise(
    true_labels: &[u32],
    num_classes: usize,
    rate: f64,
    mode: NoiseMode,
    rng: &mut impl RngCore,
) -> Result<(Vec<u32>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config(format!("noise rate must be in [0, 1), got {rate}")));
    }
    if num_classes < 2 {
        return Err(Error::config("label noise needs at least 2 classes"));
    }
    let c = num_classes as u32;
    let mut labels = Vec::with_capacity(true_labels.len());
    let mut flips = Vec::with_capacity(true_labels.len());
    for &t in true_labels {
        let flip = rate > 0.0 && rng.random_bool(rate);
        let label = if !flip {
            t
        } else {
            match mode {
                NoiseMode::Symmetric => {
                    let r = rng.random_range(0..c - 1);
                    if r >= t {
                        r + 1
                    } else {
                        r
                    }
                }
                NoiseMode::Asymmetric => (t + 1) % c,
            }
        };
        labels.push(label);
        flips.push(flip);
    }
    Ok((labels, flips))
}

/// Images, given labels, hidden true labels and the flip ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × H × W`, row-major.
    pub images: Vec<f32>,
    pub resolution: usize,
    pub labels: Vec<u32>,
    pub true_labels: Vec<u32>,
    pub flip_mask: Vec<bool>,
    /// Per-class counts of `labels`.
    pub class_counts: Vec<usize>,
    pub spec: DatasetSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn pixels_per_image(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_owned(&self, i: usize) -> Image {
        Image::new(self.resolution, self.resolution, self.image(i).to_vec())
    }

    /// Nominal (pre-noise) class counts of the generating spec.
    pub fn nominal_counts(&self) -> Vec<usize> {
        self.spec.class_counts().unwrap_or_else(|_| self.class_counts.clone())
    }

    /// Checks every documented invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        let c = self.spec.num_classes;
        if self.true_labels.len() != n || self.flip_mask.len() != n {
            return Err(Error::Validation("label arrays differ in length".into()));
        }
        if self.images.len() != n * self.pixels_per_image() {
            return Err(Error::Validation("image buffer does not match N × H × W".into()));
        }
        if let Some((i, l)) = self.labels.iter().chain(&self.true_labels).enumerate().find(|(_, l)| **l as usize >= c) {
            return Err(Error::Validation(format!("label value {l} at position {} is out of range for {c} classes", i % n.max(1))));
        }
        for i in 0..n {
            if self.flip_mask[i] != (self.labels[i] != self.true_labels[i]) {
                return Err(Error::Validation(format!("flip mask disagrees with labels at sample {i}")));
            }
        }
        if self.class_counts != count_labels(&self.labels, c) {
            return Err(Error::Validation("class counts do not match labels".into()));
        }
        if self.images.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Same samples re-rendered at another resolution. Geometry comes from
    /// the same per-sample streams, so sample `i` shows the same glyph.
    pub fn rerender(&self, resolution: usize) -> Result<Dataset> {
        if resolution < 8 {
            return Err(Error::config("resolution must be at least 8"));
        }
        Ok(Dataset {
            images: render_images(&self.spec, &self.true_labels, resolution),
            resolution,
            ..self.clone()
        })
    }
}

pub fn count_labels(labels: &[u32], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if let Some(c) = counts.get_mut(l as usize) {
            *c += 1;
        }
    }
    counts
}

/// Sample `i` is drawn from substream `i` of the dataset seed.
fn render_images(spec: &DatasetSpec, true_labels: &[u32], resolution: usize) -> Vec<f32> {
    let patterns: Vec<ClassPattern> = (0..spec.num_classes).map(ClassPattern::for_class).collect();
    let per: Vec<Image> = true_labels
        .par_iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut r = rng::substream(spec.seed, i as u64);
            glyph::render(&patterns[t as usize], resolution, &spec.glyph, &mut r)
        })
        .collect();
    per.into_iter().flat_map(Image::into_pixels).collect()
}

fn gen_split(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let counts = spec.class_counts()?;
    let true_labels: Vec<u32> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c as u32, n))
        .collect();
    let images = render_images(spec, &true_labels, spec.base_resolution);
    let mut noise_rng = rng::substream(rng::mix(spec.seed, NOISE_STREAM_TAG), 0);
    let (labels, flip_mask) =
        inject_label_noise(&true_labels, spec.num_classes, spec.noise_rate, spec.noise_mode, &mut noise_rng)?;
    let class_counts = count_labels(&labels, spec.num_classes);
    Ok(Dataset {
        images,
        resolution: spec.base_resolution,
        labels,
        true_labels,
        flip_mask,
        class_counts,
        spec: spec.clone(),
    })
}

/// Training split plus its balanced clean validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub train: Dataset,
    pub val: Dataset,
}

/// Generates the long-tailed noisy training split and a disjoint balanced,
/// noise-free validation split (keyed by `seed + 1`).
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Benchmark> {
    let train = gen_split(spec)?;
    let val = gen_split(&spec.validation_spec())?;
    Ok(Benchmark { train, val })
}

/// Only the validation split of `spec`.
pub fn gen_validation(spec: &DatasetSpec) -> Result<Dataset> {
    gen_split(&spec.validation_spec())
}
