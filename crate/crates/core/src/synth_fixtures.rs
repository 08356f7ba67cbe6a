//! Seedable toy datasets with per-source additive fingerprints.
//!
//! A fingerprint is a periodic 8x8 tile built from mid-frequency block-DCT
//! basis functions, identical across colour channels and aligned to the JPEG
//! block grid. Distinct sources use orthogonal coefficient vectors, so their
//! patterns have zero normalized cross-correlation.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_png_row, DatasetManifest, Label, Split, REAL_SOURCE};
use crate::error::{Error, Result};
use crate::preprocess::ImageBuffer;
use crate::rng::{substream, Rng};

pub const TILE: usize = 8;
/// Block-DCT frequencies `(row, column)` spanning the fingerprint space.
pub const FINGERPRINT_BASIS: [(usize, usize); 8] =
    [(3, 0), (0, 3), (2, 2), (3, 1), (1, 3), (4, 0), (0, 4), (3, 2)];
pub const MAX_SOURCES: usize = FINGERPRINT_BASIS.len();
pub const DEFAULT_AMPLITUDE: f64 = 8.0;
pub const SENSOR_NOISE_SIGMA: f64 = 2.0;
pub const SIBLING_CORRELATION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureConfig {
    pub size: usize,
    /// Fake sources seen in training.
    pub sources: usize,
    pub amplitude: f64,
    pub samples_per_source: usize,
    /// `(real, fake)` image-count ratio.
    pub balance: (usize, usize),
    pub splits: [f64; 3],
    /// Adds one more source whose images all land in the external split.
    pub external: bool,
    /// When set, source 1's pattern correlates with source 0's at this value.
    pub sibling: Option<f64>,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            size: 64,
            sources: 3,
            amplitude: DEFAULT_AMPLITUDE,
            samples_per_source: 200,
            balance: (2, 3),
            splits: [0.7, 0.1, 0.2],
            external: true,
            sibling: None,
            seed: 0,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.size < 16 || self.size % TILE != 0 {
            return bad(format!("fixture size must be a multiple of {TILE} and at least 16, got {}", self.size));
        }
        if self.sources < 2 {
            return bad(format!("need at least 2 fake sources, got {}", self.sources));
        }
        if self.sources + self.external as usize > MAX_SOURCES {
            return bad(format!("at most {MAX_SOURCES} fingerprints are available"));
        }
        if !(self.amplitude > 0.0) {
            return bad(format!("amplitude must be positive, got {}", self.amplitude));
        }
        if self.samples_per_source == 0 || self.balance.1 == 0 {
            return bad("samples per source and fake balance must be positive".into());
        }
        if self.splits.iter().any(|&s| s < 0.0) || (self.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {:?} must be nonnegative and sum to 1", self.splits));
        }
        if let Some(c) = self.sibling {
            if !(c.abs() < 1.0) {
                return bad(format!("sibling correlation {c} must lie in (-1, 1)"));
            }
        }
        Ok(())
    }

    /// Source names: `gm0..gm{K-1}`, plus the external one when enabled.
    pub fn source_names(&self) -> Vec<String> {
        (0..self.sources + self.external as usize).map(|k| format!("gm{k}")).collect()
    }

    pub fn real_count(&self) -> usize {
        self.sources * self.samples_per_source * self.balance.0 / self.balance.1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerprintSpec {
    pub source_id: usize,
    pub amplitude: f64,
    /// Coefficients over [`FINGERPRINT_BASIS`], norm `TILE`, so the tile has unit RMS.
    pub coefficients: [f64; MAX_SOURCES],
}

fn basis(u: usize, x: usize) -> f64 {
    let n = TILE as f64;
    let a = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
    a * (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2.0 * n)).cos()
}

impl FingerprintSpec {
    /// The 8x8 tile, row-major; zero mean and unit RMS.
    pub fn tile(&self) -> [f64; TILE * TILE] {
        let mut t = [0.0; TILE * TILE];
        for (&(u, v), &c) in FINGERPRINT_BASIS.iter().zip(&self.coefficients) {
            for y in 0..TILE {
                for x in 0..TILE {
                    t[y * TILE + x] += c * basis(u, y) * basis(v, x);
                }
            }
        }
        t
    }

    /// Zero-mean, unit-RMS pattern of `size × size`, row-major.
    pub fn pattern(&self, size: usize) -> Vec<f64> {
        let t = self.tile();
        (0..size * size)
            .map(|i| t[(i / size % TILE) * TILE + i % size % TILE])
            .collect()
    }
}

fn unit(v: [f64; MAX_SOURCES]) -> [f64; MAX_SOURCES] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn dot(a: &[f64; MAX_SOURCES], b: &[f64; MAX_SOURCES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fingerprints for every source of `cfg`, mutually orthogonal except for the
/// optional sibling pair.
pub fn fingerprints(cfg: &FixtureConfig) -> Result<Vec<FingerprintSpec>> {
    cfg.validate()?;
    let n = cfg.sources + cfg.external as usize;
    let mut dirs: Vec<[f64; MAX_SOURCES]> = Vec::with_capacity(n);
    let mut ortho: Vec<[f64; MAX_SOURCES]> = Vec::with_capacity(n);
    for k in 0..n {
        let mut rng = substream(cfg.seed, &format!("fingerprint/{k}"));
        let mut v: [f64; MAX_SOURCES] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        for d in &ortho {
            let p = dot(&v, d);
            for (x, y) in v.iter_mut().zip(d) {
                *x -= p * y;
            }
        }
        let q = unit(v);
        ortho.push(q);
        let dir = match cfg.sibling {
            Some(c) if k == 1 => {
                let s = (1.0 - c * c).sqrt();
                unit(std::array::from_fn(|i| c * dirs[0][i] + s * q[i]))
            }
            _ => q,
        };
        dirs.push(dir);
    }
    Ok(dirs
        .into_iter()
        .enumerate()
        .map(|(k, d)| FingerprintSpec {
            source_id: k,
            amplitude: cfg.amplitude,
            coefficients: d.map(|x| x * TILE as f64),
        })
        .collect())
}

/// Smooth colour content: a random linear gradient plus Gaussian blobs,
/// rescaled into `[40, 215]`, plus mild per-pixel sensor noise.
pub fn gen_base_image(rng: &mut Rng, size: usize) -> Result<ImageBuffer> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("base images need size >= 16, got {size}")));
    }
    let s = size as f64;
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let grad: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let n_blobs = rng.random_range(3..=6);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.0..s),
                rng.random_range(0.0..s),
                rng.random_range(s / 10.0..s / 3.0),
                std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
            )
        })
        .collect();
    let mut field = vec![0.0f64; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            let t = ((fx - s / 2.0) * gx + (fy - s / 2.0) * gy) / s;
            for c in 0..3 {
                let mut v = grad[c] * t;
                for &(bx, by, r, amp) in &blobs {
                    let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                    v += amp[c] * (-d2 / (2.0 * r * r)).exp();
                }
                field[(y * size + x) * 3 + c] = v;
            }
        }
    }
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-9);
    let noise = Normal::new(0.0, SENSOR_NOISE_SIGMA).expect("valid sigma");
    let data = field
        .iter()
        .map(|&v| (40.0 + 175.0 * (v - lo) / span + noise.sample(rng)).round().clamp(0.0, 255.0) as u8)
        .collect();
    ImageBuffer::new(size, size, 3, data)
}

/// Adds `amplitude × pattern` to every channel, rounding and clamping.
pub fn stamp_fingerprint(img: &ImageBuffer, spec: &FingerprintSpec) -> Result<ImageBuffer> {
    if !img.is_square() || img.width() % TILE != 0 {
        return Err(Error::Shape(format!(
            "fingerprint tiles need a square image with side divisible by {TILE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let pattern = spec.pattern(img.width());
    let c = img.channels();
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v as f64 + spec.amplitude * pattern[i / c]).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Mean-removed normalized cross-correlation.
pub fn ncc(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "ncc length mismatch");
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x - ma, y - mb);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa * bb).sqrt()
}

/// Correlation between the channel-averaged residual `observed − clean` and a pattern.
pub fn residual_correlation(observed: &ImageBuffer, clean: &ImageBuffer, pattern: &[f64]) -> f64 {
    let c = observed.channels();
    let residual: Vec<f64> = observed
        .data()
        .chunks_exact(c)
        .zip(clean.data().chunks_exact(c))
        .map(|(o, b)| o.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).sum::<f64>() / c as f64)
        .collect();
    ncc(&residual, pattern)
}

fn split_counts(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let train = (n as f64 * ratios[0]).round() as usize;
    let val = ((n as f64 * ratios[1]).round() as usize).min(n - train);
    [train, val, n - train - val]
}

fn assign_splits(n: usize, ratios: &[f64; 3], rng: &mut Rng) -> Vec<Split> {
    let [tr, va, _] = split_counts(n, ratios);
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < tr {
            Split::Train
        } else if rank < tr + va {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

/// Generates the fixture under `out` (PNG images plus manifest).
pub fn gen_dataset(cfg: &FixtureConfig, out: &Path) -> Result<DatasetManifest> {
    let prints = fingerprints(cfg)?;
    let names = cfg.source_names();
    let mut rows = Vec::new();
    let mut emit = |source: &str, count: usize, print: Option<&FingerprintSpec>, external: bool| -> Result<()> {
        let splits = assign_splits(count, &cfg.splits, &mut substream(cfg.seed, &format!("split/{source}")));
        for (i, split) in splits.into_iter().enumerate() {
            let id = format!("{source}-{i:05}");
            let mut rng = substream(cfg.seed, &format!("image/{id}"));
            let mut img = gen_base_image(&mut rng, cfg.size)?;
            if let Some(p) = print {
                img = stamp_fingerprint(&img, p)?;
            }
            let (label, split) = match print {
                Some(_) => (Label::Fake, if external { Split::External } else { split }),
                None => (Label::Real, split),
            };
            rows.push(write_png_row(out, &format!("images/{id}.png"), &img, label, source, split, None)?);
        }
        Ok(())
    };
    emit(REAL_SOURCE, cfg.real_count(), None, false)?;
    for (k, name) in names.iter().enumerate() {
        emit(name, cfg.samples_per_source, Some(&prints[k]), k >= cfg.sources)?;
    }
    let notes = format!(
        "synthetic fixture: {} sources, amplitude {}, sibling {:?}, external {}; pixel or dct",
        cfg.sources, cfg.amplitude, cfg.sibling, cfg.external
    );
    let m = DatasetManifest {
        seed: cfg.seed,
        size: cfg.size,
        notes,
        rows,
        root: out.to_path_buf(),
    };
    m.save()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn tiles_are_zero_mean_unit_rms() {
        for p in fingerprints(&FixtureConfig::default()).unwrap() {
            let t = p.tile();
            let mean = t.iter().sum::<f64>() / 64.0;
            let rms = (t.iter().map(|v| v * v).sum::<f64>() / 64.0).sqrt();
            assert!(mean.abs() < 1e-12);
            assert!((rms - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sibling_pair_correlation() {
        let cfg = FixtureConfig {
            sibling: Some(0.5),
            ..FixtureConfig::default()
        };
        let p = fingerprints(&cfg).unwrap();
        let a = p[0].pattern(64);
        let b = p[1].pattern(64);
        let c = p[2].pattern(64);
        assert!((ncc(&a, &b) - 0.5).abs() < 1e-9);
        assert!(ncc(&a, &c).abs() < 1e-9);
    }

    #[test]
    fn counts_and_splits() {
        let cfg = FixtureConfig::default();
        assert_eq!(cfg.real_count(), 400);
        assert_eq!(split_counts(200, &cfg.splits), [140, 20, 40]);
        let s = assign_splits(10, &cfg.splits, &mut seeded(0));
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 7);
    }

    #[test]
    fn config_rejects_bad_values() {
        for cfg in [
            FixtureConfig { sources: 1, ..Default::default() },
            FixtureConfig { amplitude: 0.0, ..Default::default() },
            FixtureConfig { splits: [0.5, 0.1, 0.1], ..Default::default() },
            FixtureConfig { size: 60, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
