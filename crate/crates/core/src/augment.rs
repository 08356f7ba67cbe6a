//! Post-processing perturbations and the two dataset augmentation policies.
//!
//! Every sampled parameter comes from the caller's stream; dataset-level
//! helpers derive one stream per image id so results never depend on order.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::ExtendedColorType;
use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{crop, decode_image, resize_bilinear, ImageBuffer};
use crate::rng::{substream, Rng};

pub const BLUR_KERNELS: [usize; 4] = [3, 5, 7, 9];
pub const CROP_PERCENT: (f64, f64) = (5.0, 20.0);
pub const JPEG_QUALITY: (u8, u8) = (10, 75);
pub const NOISE_VARIANCE: (f64, f64) = (5.0, 20.0);
pub const AUGMENT_PROBABILITY: f64 = 0.5;

/// Sampling ranges. The application order is fixed: blur, crop, jpeg, noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub blur_kernels: Vec<usize>,
    pub crop_percent: (f64, f64),
    pub jpeg_quality: (u8, u8),
    pub noise_variance: (f64, f64),
    pub probability: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            blur_kernels: BLUR_KERNELS.to_vec(),
            crop_percent: CROP_PERCENT,
            jpeg_quality: JPEG_QUALITY,
            noise_variance: NOISE_VARIANCE,
            probability: AUGMENT_PROBABILITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Augmentation {
    Blur {
        kernel: usize,
        sigma: f64,
    },
    Crop {
        x_percent: f64,
        y_percent: f64,
        x0: usize,
        y0: usize,
        width: usize,
        height: usize,
    },
    Jpeg {
        quality: u8,
    },
    Noise {
        variance: f64,
    },
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::Blur { .. } => "blur",
            Augmentation::Crop { .. } => "crop",
            Augmentation::Jpeg { .. } => "jpeg",
            Augmentation::Noise { .. } => "noise",
        }
    }
}

/// Augmentations applied to one image, in application order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub applied: Vec<Augmentation>,
}

impl AugmentationRecord {
    pub fn is_empty(&self) -> bool {
        self.applied.is_empty()
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.applied.iter().map(Augmentation::name).collect()
    }
}

pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps for an odd kernel size.
pub fn gaussian_kernel(kernel: usize) -> Result<Vec<f64>> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::InvalidArgument(format!("blur kernel must be odd, got {kernel}")));
    }
    let sigma = blur_sigma(kernel);
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| t / s).collect())
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
pub fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflected borders.
pub fn blur_with_kernel(img: &ImageBuffer, kernel: usize) -> Result<ImageBuffer> {
    let taps = gaussian_kernel(kernel)?;
    let (w, h, c) = (img.width(), img.height(), img.channels());
    let r = (kernel / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let xx = reflect(x as isize + t as isize - r, w);
                    acc += wt * src[(y * w + xx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0u8; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (t, &wt) in taps.iter().enumerate() {
                    let yy = reflect(y as isize + t as isize - r, h);
                    acc += wt * tmp[(yy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    ImageBuffer::new(w, h, c, out)
}

pub fn gaussian_blur(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<(ImageBuffer, Augmentation)> {
    if cfg.blur_kernels.is_empty() {
        return Err(Error::InvalidArgument("no blur kernels configured".into()));
    }
    let kernel = cfg.blur_kernels[rng.random_range(0..cfg.blur_kernels.len())];
    let out = blur_with_kernel(img, kernel)?;
    Ok((
        out,
        Augmentation::Blur {
            kernel,
            sigma: blur_sigma(kernel),
        },
    ))
}

/// Crops `x_percent`/`y_percent` of each axis with the window at `(x0, y0)` and
/// upsamples back to the original size.
pub fn crop_upsample_with(img: &ImageBuffer, x_percent: f64, y_percent: f64, x0: usize, y0: usize) -> Result<(ImageBuffer, Augmentation)> {
    let (w, h) = (img.width(), img.height());
    let cw = crop_extent(w, x_percent);
    let ch = crop_extent(h, y_percent);
    let window = crop(img, x0, y0, cw, ch)?;
    Ok((
        resize_bilinear(&window, w, h),
        Augmentation::Crop {
            x_percent,
            y_percent,
            x0,
            y0,
            width: cw,
            height: ch,
        },
    ))
}

fn crop_extent(len: usize, percent: f64) -> usize {
    ((len as f64 * (1.0 - percent / 100.0)).round() as usize).clamp(1, len)
}

pub fn random_crop_upsample(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<(ImageBuffer, Augmentation)> {
    let (lo, hi) = cfg.crop_percent;
    let px = rng.random_range(lo..=hi);
    let py = rng.random_range(lo..=hi);
    let x0 = rng.random_range(0..=img.width() - crop_extent(img.width(), px));
    let y0 = rng.random_range(0..=img.height() - crop_extent(img.height(), py));
    crop_upsample_with(img, px, py, x0, y0)
}

/// Baseline JPEG encode at `quality` followed by a decode.
pub fn jpeg_bytes(img: &ImageBuffer, quality: u8) -> Result<Vec<u8>> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let color = match img.channels() {
        3 => ExtendedColorType::Rgb8,
        _ => ExtendedColorType::L8,
    };
    let mut buf = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode(img.data(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(buf.into_inner())
}

pub fn jpeg_with_quality(img: &ImageBuffer, quality: u8) -> Result<(ImageBuffer, Augmentation)> {
    let bytes = jpeg_bytes(img, quality)?;
    let mut out = decode_image(&bytes).map_err(Error::Codec)?;
    if img.channels() == 1 {
        out = crate::preprocess::to_grayscale(&out);
    }
    Ok((out, Augmentation::Jpeg { quality }))
}

pub fn jpeg_compress(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<(ImageBuffer, Augmentation)> {
    let (lo, hi) = cfg.jpeg_quality;
    jpeg_with_quality(img, rng.random_range(lo..=hi))
}

/// Adds i.i.d. Gaussian noise of the given variance (8-bit units), rounding and clamping.
pub fn noise_with_variance(img: &ImageBuffer, variance: f64, rng: &mut Rng) -> Result<(ImageBuffer, Augmentation)> {
    if !(variance >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise variance {variance} is negative")));
    }
    let mut out = img.clone();
    if variance > 0.0 {
        let normal = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in out.data_mut() {
            *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok((out, Augmentation::Noise { variance }))
}

pub fn additive_noise(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<(ImageBuffer, Augmentation)> {
    let (lo, hi) = cfg.noise_variance;
    noise_with_variance(img, rng.random_range(lo..=hi), rng)
}

/// Draws the four coins of the multi-augmentation policy (blur, crop, jpeg, noise).
pub fn draw_coins(cfg: &AugmentationConfig, rng: &mut Rng) -> [bool; 4] {
    std::array::from_fn(|_| rng.random_bool(cfg.probability))
}

/// Applies the augmentations whose coin is set, in canonical order.
pub fn multi_augment_with(
    img: &ImageBuffer,
    coins: [bool; 4],
    cfg: &AugmentationConfig,
    rng: &mut Rng,
) -> Result<(ImageBuffer, AugmentationRecord)> {
    type Op = fn(&ImageBuffer, &AugmentationConfig, &mut Rng) -> Result<(ImageBuffer, Augmentation)>;
    const OPS: [Op; 4] = [gaussian_blur, random_crop_upsample, jpeg_compress, additive_noise];
    let mut cur = img.clone();
    let mut record = AugmentationRecord::default();
    for (fire, op) in coins.into_iter().zip(OPS) {
        if fire {
            let (next, aug) = op(&cur, cfg, rng)?;
            cur = next;
            record.applied.push(aug);
        }
    }
    Ok((cur, record))
}

pub fn multi_augment(img: &ImageBuffer, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<(ImageBuffer, AugmentationRecord)> {
    let coins = draw_coins(cfg, rng);
    multi_augment_with(img, coins, cfg, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Individual {
    Jpeg,
    Crop,
}

impl std::str::FromStr for Individual {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" => Ok(Individual::Jpeg),
            "crop" => Ok(Individual::Crop),
            other => Err(Error::InvalidArgument(format!(
                "unknown individual augmentation {other:?} (expected jpeg or crop)"
            ))),
        }
    }
}

impl std::fmt::Display for Individual {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Individual::Jpeg => "jpeg",
            Individual::Crop => "crop",
        })
    }
}

/// Sorted indices of exactly `ceil(n / 2)` items drawn uniformly without replacement.
pub fn select_half(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx = index::sample(rng, n, n.div_ceil(2)).into_vec();
    idx.sort_unstable();
    idx
}

/// Which policy produced an augmented dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Multi,
    Individual(Individual),
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Multi => f.write_str("multi"),
            Policy::Individual(i) => write!(f, "{i}"),
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multi" => Ok(Policy::Multi),
            other => other.parse().map(Policy::Individual),
        }
    }
}

/// Augments a set of `(id, image)` pairs under `policy`. Multi-augmentation
/// applies to every image; an individual policy perturbs exactly half.
pub fn augment_set(
    items: &[(String, ImageBuffer)],
    policy: Policy,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<(ImageBuffer, AugmentationRecord)>> {
    match policy {
        Policy::Multi => items
            .iter()
            .map(|(id, img)| multi_augment(img, cfg, &mut substream(seed, &format!("multi/{id}"))))
            .collect(),
        Policy::Individual(which) => individually_augment(items, which, cfg, seed),
    }
}

pub fn individually_augment(
    items: &[(String, ImageBuffer)],
    which: Individual,
    cfg: &AugmentationConfig,
    seed: u64,
) -> Result<Vec<(ImageBuffer, AugmentationRecord)>> {
    let chosen = select_half(items.len(), &mut substream(seed, &format!("select/{which}")));
    let mut pick = vec![false; items.len()];
    for i in chosen {
        pick[i] = true;
    }
    items
        .iter()
        .zip(pick)
        .map(|((id, img), fire)| {
            if !fire {
                return Ok((img.clone(), AugmentationRecord::default()));
            }
            let mut rng = substream(seed, &format!("{which}/{id}"));
            let (out, aug) = match which {
                Individual::Jpeg => jpeg_compress(img, cfg, &mut rng)?,
                Individual::Crop => random_crop_upsample(img, cfg, &mut rng)?,
            };
            Ok((out, AugmentationRecord { applied: vec![aug] }))
        })
        .collect()
}
