//! Grayscale image transforms, train-time augmentation and the ten-crop
//! test-time pipeline.

use rand::{Rng as _, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nnkernel::{eval_logits, softmax_f64, ModelParams};
use crate::{Error, Result};

/// Single-channel `f32` image, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel buffer does not match {height}x{width}");
        Self { height, width, pixels }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        Self::new(h, w, rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }
}

/// Bilinear resize with half-pixel centers and edge clamping: the source
/// coordinate of output index `d` is `(d + 0.5)·(in/out) − 0.5`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    assert!(out_h >= 1 && out_w >= 1, "output dimensions must be positive");
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let rows = taps(out_h, img.height);
    let cols = taps(out_w, img.width);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let p = |r: usize, c: usize| f64::from(img.get(r, c));
            let top = p(r0, c0) * (1.0 - fc) + p(r0, c1) * fc;
            let bottom = p(r1, c0) * (1.0 - fc) + p(r1, c1) * fc;
            pixels.push((top * (1.0 - fr) + bottom * fr) as f32);
        }
    }
    Image::new(out_h, out_w, pixels)
}

/// `size × size` window with its top-left corner at (`top`, `left`).
pub fn crop(img: &Image, top: usize, left: usize, size: usize) -> Result<Image> {
    if size == 0 || top + size > img.height || left + size > img.width {
        return Err(Error::Shape(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {}x{} image",
            img.height, img.width
        )));
    }
    let mut pixels = Vec::with_capacity(size * size);
    for r in top..top + size {
        pixels.extend_from_slice(&img.pixels[r * img.width + left..r * img.width + left + size]);
    }
    Ok(Image::new(size, size, pixels))
}

pub fn hflip(img: &Image) -> Image {
    let pixels = img.pixels.chunks(img.width).flat_map(|row| row.iter().rev().copied()).collect();
    Image::new(img.height, img.width, pixels)
}

pub fn vflip(img: &Image) -> Image {
    let pixels = img.pixels.chunks(img.width).rev().flat_map(|row| row.iter().copied()).collect();
    Image::new(img.height, img.width, pixels)
}

/// Train-time augmentation settings. Hue/saturation and blur have no
/// grayscale analogue here; brightness and contrast take their place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// `[low, high]` area fraction of a random square crop that is resized
    /// back to full size.
    pub zoom_area: [f64; 2],
    /// Zero padding on each side before cropping back to the original size.
    pub pad_then_crop: usize,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub brightness_delta: f64,
    /// `[low, high]` contrast multipliers about the image mean.
    pub contrast_range: [f64; 2],
    pub dropout_holes: usize,
    pub dropout_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            zoom_area: [0.5, 1.0],
            pad_then_crop: 2,
            hflip_prob: 0.5,
            vflip_prob: 0.0,
            brightness_delta: 0.1,
            contrast_range: [0.8, 1.2],
            dropout_holes: 1,
            dropout_size: 4,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn off() -> Self {
        Self {
            zoom_area: [1.0, 1.0],
            pad_then_crop: 0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            brightness_delta: 0.0,
            contrast_range: [1.0, 1.0],
            dropout_holes: 0,
            dropout_size: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.hflip_prob, self.vflip_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("flip probability {p} outside [0, 1]")));
            }
        }
        if !(self.brightness_delta >= 0.0) {
            return Err(Error::config("brightness_delta must be non-negative"));
        }
        let [lo, hi] = self.contrast_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("contrast_range must satisfy 0 < low <= high"));
        }
        let [lo, hi] = self.zoom_area;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("zoom_area must satisfy 0 < low <= high <= 1"));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::off() || (self.zoom_area == [1.0, 1.0]
            && self.pad_then_crop == 0
            && self.hflip_prob == 0.0
            && self.vflip_prob == 0.0
            && self.brightness_delta == 0.0
            && self.contrast_range == [1.0, 1.0]
            && (self.dropout_holes == 0 || self.dropout_size == 0))
    }
}

/// Random zoom crop, random crop after padding, flips, brightness, contrast, coarse dropout,
/// then clipping to `[0, 1]`. Disabled steps draw nothing from `rng`.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut impl RngCore) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = img.clone();
    let [zlo, zhi] = cfg.zoom_area;
    if zlo < 1.0 || zhi < 1.0 {
        let area = if zlo < zhi { rng.random_range(zlo..=zhi) } else { zlo };
        let side = ((area.sqrt() * h.min(w) as f64).round() as usize).clamp(1, h.min(w));
        let top = rng.random_range(0..=h - side);
        let left = rng.random_range(0..=w - side);
        let window = crop(img, top, left, side).expect("window fits inside the image");
        out = resize_bilinear(&window, h, w);
    }
    if cfg.pad_then_crop > 0 {
        let pad = cfg.pad_then_crop;
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let mut pixels = vec![0.0f32; h * w];
        for r in 0..h {
            let sr = r as isize + dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for c in 0..w {
                let sc = c as isize + dx;
                if sc >= 0 && sc < w as isize {
                    pixels[r * w + c] = out.pixels[sr as usize * w + sc as usize];
                }
            }
        }
        out = Image::new(h, w, pixels);
    }
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        out = hflip(&out);
    }
    if cfg.vflip_prob > 0.0 && rng.random_bool(cfg.vflip_prob) {
        out = vflip(&out);
    }
    if cfg.brightness_delta > 0.0 {
        let delta = rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta) as f32;
        out.pixels.iter_mut().for_each(|p| *p += delta);
    }
    let [lo, hi] = cfg.contrast_range;
    if lo != 1.0 || hi != 1.0 {
        let factor = if lo < hi { rng.random_range(lo..=hi) } else { lo } as f32;
        let mean = out.pixels.iter().sum::<f32>() / out.pixels.len() as f32;
        out.pixels.iter_mut().for_each(|p| *p = mean + factor * (*p - mean));
    }
    if cfg.dropout_holes > 0 && cfg.dropout_size > 0 {
        let s = cfg.dropout_size.min(h).min(w);
        for _ in 0..cfg.dropout_holes {
            let top = rng.random_range(0..=h - s);
            let left = rng.random_range(0..=w - s);
            for r in top..top + s {
                out.pixels[r * w + left..r * w + left + s].iter_mut().for_each(|p| *p = 0.0);
            }
        }
    }
    out.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    out
}

/// Four corners and the center, then the horizontal flip of each, in the
/// order `[TL, TR, BL, BR, C, flip(TL), flip(TR), flip(BL), flip(BR), flip(C)]`.
pub fn ten_crop(img: &Image, size: usize) -> Result<Vec<Image>> {
    if size == 0 || size > img.height || size > img.width {
        return Err(Error::Shape(format!("ten-crop size {size} exceeds {}x{} image", img.height, img.width)));
    }
    let (bottom, right) = (img.height - size, img.width - size);
    let origins = [(0, 0), (0, right), (bottom, 0), (bottom, right), (bottom / 2, right / 2)];
    let mut crops = origins
        .iter()
        .map(|&(t, l)| crop(img, t, l, size))
        .collect::<Result<Vec<_>>>()?;
    let flipped: Vec<Image> = crops.iter().map(hflip).collect();
    crops.extend(flipped);
    Ok(crops)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    CenterOnly,
    TenCrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageSpace {
    Probability,
    Logit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaConfig {
    pub train_res: usize,
    pub enlarge_factor: f64,
    pub crops: CropMode,
    pub average_space: AverageSpace,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            train_res: 24,
            enlarge_factor: 1.25,
            crops: CropMode::TenCrop,
            average_space: AverageSpace::Probability,
        }
    }
}

impl TtaConfig {
    pub fn enlarged_res(&self) -> usize {
        (self.train_res as f64 * self.enlarge_factor).round() as usize
    }

    /// `enlarge_factor = 1` is accepted: with `center_only` it collapses the
    /// pipeline to plain prediction.
    pub fn validate(&self) -> Result<()> {
        if self.train_res < 8 {
            return Err(Error::config("tta train_res must be at least 8"));
        }
        if !(self.enlarge_factor >= 1.0) || !self.enlarge_factor.is_finite() {
            return Err(Error::config(format!("enlarge_factor must be >= 1, got {}", self.enlarge_factor)));
        }
        Ok(())
    }

    fn views(&self, img: &Image) -> Result<Vec<Image>> {
        let base = resize_bilinear(img, self.train_res, self.train_res);
        let e = self.enlarged_res();
        let enlarged = resize_bilinear(&base, e, e);
        match self.crops {
            CropMode::TenCrop => ten_crop(&enlarged, self.train_res),
            CropMode::CenterOnly => {
                let off = (e - self.train_res) / 2;
                Ok(vec![crop(&enlarged, off, off, self.train_res)?])
            }
        }
    }
}

/// Resize to the training resolution, enlarge, crop, predict every crop and
/// average (probabilities by default), renormalized to sum to one.
pub fn fixres_tta_predict(params: &ModelParams<f32>, img: &Image, cfg: &TtaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let views = cfg.views(img)?;
    let c = params.num_classes();
    let mut acc = vec![0.0f64; c];
    for v in &views {
        let logits = eval_logits(params, v.pixels(), v.height(), v.width());
        match cfg.average_space {
            AverageSpace::Probability => {
                for (a, p) in acc.iter_mut().zip(softmax_f64(&logits)) {
                    *a += p;
                }
            }
            AverageSpace::Logit => {
                for (a, l) in acc.iter_mut().zip(&logits) {
                    *a += f64::from(*l);
                }
            }
        }
    }
    let m = views.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    let probs = match cfg.average_space {
        AverageSpace::Probability => acc,
        AverageSpace::Logit => softmax_f64(&acc),
    };
    let sum: f64 = probs.iter().sum();
    Ok(probs.into_iter().map(|p| p / sum).collect())
}

/// [`fixres_tta_predict`] over many images, `N × C`.
pub fn fixres_tta_predict_batch(params: &ModelParams<f32>, images: &[Image], cfg: &TtaConfig) -> Result<Vec<Vec<f64>>> {
    images.par_iter().map(|img| fixres_tta_predict(params, img, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w).map(|v| v as f32 / (h * w) as f32).collect())
    }

    #[test]
    fn resize_examples() {
        let img = ramp(5, 7);
        assert_eq!(resize_bilinear(&img, 5, 7), img);
        let sq = Image::from_rows(&[&[0.0, 2.0], &[4.0, 6.0]]);
        assert_eq!(resize_bilinear(&sq, 1, 1).pixels(), &[3.0]);
        let flat = Image::new(4, 4, vec![0.37; 16]);
        assert!(resize_bilinear(&flat, 9, 3).pixels().iter().all(|p| (*p - 0.37).abs() < 1e-7));
    }

    #[test]
    fn crop_examples() {
        let img = ramp(4, 4);
        assert_eq!(crop(&img, 0, 0, 4).unwrap(), img);
        let br = crop(&img, 2, 2, 2).unwrap();
        assert_eq!(br.pixels(), &[img.get(2, 2), img.get(2, 3), img.get(3, 2), img.get(3, 3)]);
        assert!(crop(&img, 3, 0, 2).is_err());
    }

    #[test]
    fn flips() {
        let img = Image::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(vflip(&img).pixels(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(hflip(&img).pixels(), &[2.0, 1.0, 4.0, 3.0]);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(vflip(&vflip(&img)), img);
        let sym = Image::from_rows(&[&[1.0, 5.0, 1.0], &[2.0, 0.0, 2.0]]);
        assert_eq!(hflip(&sym), sym);
    }

    #[test]
    fn augment_off_is_identity_and_deterministic() {
        let img = ramp(8, 8);
        assert_eq!(augment(&img, &AugmentConfig::off(), &mut rng::seeded(0)), img);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut rng::seeded(4));
        let b = augment(&img, &cfg, &mut rng::seeded(4));
        assert_eq!(a, b);
        assert!(a.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn ten_crop_layout() {
        let img = ramp(4, 4);
        let crops = ten_crop(&img, 2).unwrap();
        assert_eq!(crops.len(), 10);
        assert!(crops.iter().all(|c| c.height() == 2 && c.width() == 2));
        let origins = [(0, 0), (0, 2), (2, 0), (2, 2), (1, 1)];
        for (k, (t, l)) in origins.iter().enumerate() {
            assert_eq!(crops[k], crop(&img, *t, *l, 2).unwrap());
            assert_eq!(crops[k + 5], hflip(&crops[k]));
        }
        let uniform = Image::new(6, 6, vec![0.5; 36]);
        let crops = ten_crop(&uniform, 3).unwrap();
        assert!(crops.iter().all(|c| *c == crops[0]));
        assert!(ten_crop(&img, 5).is_err());
    }

    #[test]
    fn ten_crop_of_mirror_symmetric_image() {
        // Left-right symmetric with an even margin: TL/TR and BL/BR are mirror
        // pairs and the center crop is its own mirror, so the ten crops hold
        // five distinct images, each exactly twice.
        let mut rows = Vec::new();
        for r in 0..7 {
            let row: Vec<f32> = (0..7).map(|c: usize| (r * 7 + c.min(6 - c)) as f32 / 50.0).collect();
            rows.push(row);
        }
        let refs: Vec<&[f32]> = rows.iter().map(|r| r.as_slice()).collect();
        let img = Image::from_rows(&refs);
        assert_eq!(hflip(&img), img);
        let crops = ten_crop(&img, 3).unwrap();
        let mut distinct: Vec<&Image> = Vec::new();
        for c in &crops {
            assert_eq!(crops.iter().filter(|d| *d == c).count(), 2);
            if !distinct.contains(&c) {
                distinct.push(c);
            }
        }
        assert_eq!(distinct.len(), 5);
    }

    proptest! {
        #[test]
        fn resize_stays_in_range(
            pixels in prop::collection::vec(0.0f32..1.0, 30),
            oh in 1usize..20,
            ow in 1usize..20,
        ) {
            let img = Image::new(5, 6, pixels.clone());
            let out = resize_bilinear(&img, oh, ow);
            let lo = pixels.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = pixels.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            for p in out.pixels() {
                prop_assert!(*p >= lo - 1e-6 && *p <= hi + 1e-6);
            }
        }
    }
}
