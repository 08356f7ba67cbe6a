//! Image loading, standardization, and conversion to model inputs in either
//! the pixel or the DCT representation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Added before taking the log of DCT magnitudes.
pub const LOG_EPS: f64 = 1e-12;
/// Lower bound applied to fitted per-coefficient standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// 8-bit raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 || data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{width}x{height}x{channels} image needs {} bytes, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = std::iter::repeat_n(rgb, width * height).flatten().collect();
        ImageBuffer {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 3 {
            image::ExtendedColorType::Rgb8
        } else {
            image::ExtendedColorType::L8
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        image::save_buffer_with_format(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
    }

    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }
}

/// Decodes any supported raster file into 8-bit RGB; greyscale sources are
/// expanded to three identical channels.
pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    decode_image(&bytes).map_err(|message| Error::Decode {
        path: path.to_path_buf(),
        message,
    })
}

pub(crate) fn decode_image(bytes: &[u8]) -> std::result::Result<ImageBuffer, String> {
    let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageBuffer::new(w as usize, h as usize, 3, rgb.into_raw()).map_err(|e| e.to_string())
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(img: &ImageBuffer, width: usize, height: usize) -> ImageBuffer {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let axis = |dst: usize, scale: f64, len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, sx, img.width)).collect();
    let c = img.channels;
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let p = |xx, yy| img.get(xx, yy, ch) as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bot = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    ImageBuffer {
        width,
        height,
        channels: c,
        data,
    }
}

pub fn crop(img: &ImageBuffer, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageBuffer> {
    if width == 0 || height == 0 || x0 + width > img.width || y0 + height > img.height {
        return Err(Error::InvalidArgument(format!(
            "crop window {width}x{height}+{x0}+{y0} outside {}x{} image",
            img.width, img.height
        )));
    }
    let c = img.channels;
    let mut data = Vec::with_capacity(width * height * c);
    for y in y0..y0 + height {
        let row = (y * img.width + x0) * c;
        data.extend_from_slice(&img.data[row..row + width * c]);
    }
    ImageBuffer::new(width, height, c, data)
}

/// Center-crops to a square, then resamples bilinearly to `size × size`.
pub fn standardize(img: &ImageBuffer, size: usize) -> Result<ImageBuffer> {
    if size == 0 {
        return Err(Error::InvalidArgument("standardized size must be positive".into()));
    }
    let side = img.width.min(img.height);
    let square = if img.is_square() {
        img.clone()
    } else {
        crop(img, (img.width - side) / 2, (img.height - side) / 2, side, side)?
    };
    Ok(resize_bilinear(&square, size, size))
}

/// `(3, S, S)` tensor with intensities mapped linearly from `[0, 255]` to `[-1, 1]`.
pub fn pixel_tensor<S: Scalar>(img: &ImageBuffer) -> Result<Tensor<S>> {
    let rgb = img.to_rgb();
    let (w, h) = (rgb.width, rgb.height);
    let mut data = vec![S::zero(); 3 * w * h];
    for (i, px) in rgb.data.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = S::from_f64(px[c] as f64 / 127.5 - 1.0);
        }
    }
    Tensor::from_vec(vec![3, h, w], data)
}

/// Rounded luma `0.299 R + 0.587 G + 0.114 B`.
pub fn to_grayscale(img: &ImageBuffer) -> ImageBuffer {
    if img.channels == 1 {
        return img.clone();
    }
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8)
        .collect();
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        data,
    }
}

/// Orthonormal DCT-II basis matrix: `C[k][n] = a_k cos(π (2n + 1) k / 2N)`.
fn dct_matrix(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            m[k * n + i] =
                a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

fn square_side(t: &Tensor<f64>) -> Result<usize> {
    match *t.shape() {
        [h, w] if h == w => Ok(h),
        ref s => Err(Error::Shape(format!("expected a square 2-d input, got {s:?}"))),
    }
}

/// Orthonormal type-II 2D DCT, rows then columns.
pub fn dct2d(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = square_side(img)?;
    let c = dct_matrix(n);
    // rows: T = X Cᵀ, then columns: Y = C T
    let mut tmp = vec![0.0; n * n];
    f64::gemm(n, n, n, 1.0, img.data(), n as isize, 1, &c, 1, n as isize, 0.0, &mut tmp, n as isize, 1);
    let mut out = vec![0.0; n * n];
    f64::gemm(n, n, n, 1.0, &c, n as isize, 1, &tmp, n as isize, 1, 0.0, &mut out, n as isize, 1);
    Tensor::from_vec(vec![n, n], out)
}

/// Inverse of [`dct2d`] (orthonormal type-III).
pub fn idct2d(spec: &Tensor<f64>) -> Result<Tensor<f64>> {
    let n = square_side(spec)?;
    let c = dct_matrix(n);
    let mut tmp = vec![0.0; n * n];
    f64::gemm(n, n, n, 1.0, spec.data(), n as isize, 1, &c, n as isize, 1, 0.0, &mut tmp, n as isize, 1);
    let mut out = vec![0.0; n * n];
    f64::gemm(n, n, n, 1.0, &c, 1, n as isize, &tmp, n as isize, 1, 0.0, &mut out, n as isize, 1);
    Tensor::from_vec(vec![n, n], out)
}

pub fn log_scale(spec: &Tensor<f64>) -> Tensor<f64> {
    spec.map(|v| (v.abs() + LOG_EPS).ln())
}

/// Per-coefficient statistics of log-scaled spectra from the clean training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumStats {
    pub side: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub count: usize,
}

/// Two-pass mean and (population) standard deviation per coefficient.
pub fn fit_spectrum_stats<'a>(spectra: impl IntoIterator<Item = &'a Tensor<f64>>) -> Result<SpectrumStats> {
    let spectra: Vec<&Tensor<f64>> = spectra.into_iter().collect();
    if spectra.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "spectrum statistics need at least 2 samples, got {}",
            spectra.len()
        )));
    }
    let side = square_side(spectra[0])?;
    let n = spectra.len() as f64;
    let mut mean = vec![0.0; side * side];
    for s in &spectra {
        s.expect_shape(&[side, side])?;
        for (m, v) in mean.iter_mut().zip(s.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; side * side];
    for s in &spectra {
        for ((acc, v), m) in var.iter_mut().zip(s.data()).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(SpectrumStats {
        side,
        mean,
        std,
        count: spectra.len(),
    })
}

pub fn normalize_spectrum(spec: &Tensor<f64>, stats: &SpectrumStats) -> Result<Tensor<f64>> {
    spec.expect_shape(&[stats.side, stats.side])?;
    let data = spec
        .data()
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(v, (m, s))| (v - m) / s)
        .collect();
    Tensor::from_vec(vec![stats.side, stats.side], data)
}

/// Greyscale → DCT → log magnitude, before normalization.
pub fn log_spectrum(img: &ImageBuffer) -> Result<Tensor<f64>> {
    let grey = to_grayscale(img);
    let t = Tensor::from_vec(
        vec![grey.height, grey.width],
        grey.data.iter().map(|&v| v as f64).collect(),
    )?;
    Ok(log_scale(&dct2d(&t)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    Pixel,
    Dct,
}

impl Representation {
    pub fn channels(self) -> usize {
        match self {
            Representation::Pixel => 3,
            Representation::Dct => 1,
        }
    }
}

impl std::str::FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(Representation::Pixel),
            "dct" => Ok(Representation::Dct),
            other => Err(Error::InvalidArgument(format!("unknown representation {other:?}"))),
        }
    }
}

impl std::fmt::Display for Representation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Representation::Pixel => "pixel",
            Representation::Dct => "dct",
        })
    }
}

/// Converts a standardized image into the model input for `repr`.
/// The DCT representation requires fitted statistics.
pub fn model_input<S: Scalar>(
    img: &ImageBuffer,
    repr: Representation,
    stats: Option<&SpectrumStats>,
) -> Result<Tensor<S>> {
    match repr {
        Representation::Pixel => pixel_tensor(img),
        Representation::Dct => {
            let stats = stats.ok_or_else(|| {
                Error::InvalidArgument("dct representation needs spectrum statistics".into())
            })?;
            let norm = normalize_spectrum(&log_spectrum(img)?, stats)?;
            let side = stats.side;
            Ok(norm.cast::<S>().reshape(&[1, side, side])?)
        }
    }
}
