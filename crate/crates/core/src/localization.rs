//! Class activation maps, Grad-CAM, and Jet heatmap rendering.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{encode_for, is_positive};
use crate::model_zoo::{Decision, Head, ModelBundle, ModelGraph};
use crate::nn::{sigmoid, Layer, Mode, Sequential};
use crate::preprocess::ImageBuffer;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_ALPHA: f64 = 0.5;

/// A saliency map at the resolution of the final convolutional features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub output: String,
    pub width: usize,
    pub height: usize,
    /// Row-major raw intensities.
    pub raw: Vec<f64>,
    /// Per-image min-max scaled copy; all 0.5 when `raw` is constant.
    pub normalized: Vec<f64>,
    pub confidence: f64,
}

impl SaliencyMap {
    pub fn new(output: impl Into<String>, width: usize, height: usize, raw: Vec<f64>, confidence: f64) -> Self {
        let normalized = min_max(&raw);
        SaliencyMap {
            output: output.into(),
            width,
            height,
            raw,
            normalized,
            confidence,
        }
    }

    pub fn raw_mean(&self) -> f64 {
        self.raw.iter().sum::<f64>() / self.raw.len() as f64
    }
}

pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

fn single<S: Scalar>(model: &ModelGraph<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    let want = model.input.shape();
    if x.shape() != want {
        return Err(Error::Shape(format!("expected one input of shape {want:?}, got {:?}", x.shape())));
    }
    Tensor::stack(&[x])
}

fn check_output<S: Scalar>(model: &ModelGraph<S>, output: usize) -> Result<()> {
    if output >= model.decision.outputs() {
        return Err(Error::InvalidArgument(format!(
            "output {output} out of range for {} outputs",
            model.decision.outputs()
        )));
    }
    Ok(())
}

fn confidence(decision: Decision, logits: &[f64], output: usize) -> f64 {
    match decision {
        Decision::Sigmoid => sigmoid(logits[output]),
        Decision::Softmax(_) => softmax(logits)[output],
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// CAM for a GAP + dense head: `M(x, y) = sum_k w_k f_k(x, y)` for `output`.
pub fn cam<S: Scalar>(model: &ModelGraph<S>, x: &Tensor<S>, output: usize, name: &str) -> Result<SaliencyMap> {
    if model.head != Head::GapCam {
        return Err(Error::InvalidArgument("cam needs a gap_cam head; use grad_cam".into()));
    }
    check_output(model, output)?;
    let batch = single(model, x)?;
    let (features, _) = model.feature_split()?;
    let f = model.net.infer_range(&batch, features)?;
    let Some(Layer::Dense(d)) = model.net.layers.last() else {
        return Err(Error::Shape("gap_cam head must end with a dense layer".into()));
    };
    let (k, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let weights = &d.weight.data()[output * k..(output + 1) * k];
    let mut raw = vec![0.0; h * w];
    for (c, wc) in weights.iter().enumerate() {
        let wc = wc.as_f64();
        for (m, v) in raw.iter_mut().zip(&f.data()[c * h * w..(c + 1) * h * w]) {
            *m += wc * v.as_f64();
        }
    }
    let logits: Vec<f64> = model.net.infer(&batch)?.data().iter().map(|v| v.as_f64()).collect();
    Ok(SaliencyMap::new(name, w, h, raw, confidence(model.decision, &logits, output)))
}

/// Grad-CAM at the last convolutional block: `relu(sum_k a_k f_k)` with
/// `a_k` the spatial mean of the output score's gradient w.r.t. `f_k`.
pub fn grad_cam<S: Scalar>(model: &ModelGraph<S>, x: &Tensor<S>, output: usize, name: &str) -> Result<SaliencyMap> {
    check_output(model, output)?;
    let batch = single(model, x)?;
    let (features, head) = model.feature_split()?;
    let f = model.net.infer_range(&batch, features)?;
    let mut suffix = Sequential::new(model.net.layers[head].to_vec());
    let z = suffix.forward(&f, Mode::Eval)?;
    let logits: Vec<f64> = z.data().iter().map(|v| v.as_f64()).collect();
    let dz: Vec<f64> = match model.decision {
        Decision::Sigmoid => {
            let p = sigmoid(logits[output]);
            vec![p * (1.0 - p)]
        }
        Decision::Softmax(_) => {
            let p = softmax(&logits);
            (0..p.len())
                .map(|j| p[output] * (f64::from(u8::from(j == output)) - p[j]))
                .collect()
        }
    };
    let grad_out = Tensor::from_vec(z.shape().to_vec(), dz.into_iter().map(S::from_f64).collect())?;
    let g = suffix.backward(&grad_out)?.input;
    let (k, h, w) = (f.shape()[1], f.shape()[2], f.shape()[3]);
    let hw = h * w;
    let mut raw = vec![0.0; hw];
    for c in 0..k {
        let gc = &g.data()[c * hw..(c + 1) * hw];
        let alpha = gc.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (m, v) in raw.iter_mut().zip(&f.data()[c * hw..(c + 1) * hw]) {
            *m += alpha * v.as_f64();
        }
    }
    raw.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(SaliencyMap::new(name, w, h, raw, confidence(model.decision, &logits, output)))
}

/// CAM when the head allows it, Grad-CAM otherwise.
pub fn saliency<S: Scalar>(model: &ModelGraph<S>, x: &Tensor<S>, output: usize, name: &str) -> Result<SaliencyMap> {
    match model.head {
        Head::GapCam => cam(model, x, output, name),
        Head::FlattenDense => grad_cam(model, x, output, name),
    }
}

/// Maps of the primary output and every secondary for one encoded image `(C, S, S)`.
pub fn bundle_saliency(bundle: &ModelBundle, x: &Tensor<f32>) -> Result<Vec<SaliencyMap>> {
    let mut maps = vec![saliency(&bundle.primary, x, 0, "primary")?];
    let feats = bundle.primary.branch_features(&Tensor::stack(&[x])?)?.index_axis0(0);
    for (name, g) in bundle.secondaries() {
        maps.push(saliency(g, &feats, 0, name)?);
    }
    Ok(maps)
}

const fn jet_table() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let v = i as f64 / 255.0;
        let mut c = 0;
        while c < 3 {
            // red, green and blue peak at 3/4, 1/2 and 1/4
            let x = 1.5 - (4.0 * v - (3 - c) as f64).abs();
            let x = if x < 0.0 { 0.0 } else if x > 1.0 { 1.0 } else { x };
            t[i][c] = (x * 255.0 + 0.5) as u8;
            c += 1;
        }
        i += 1;
    }
    t
}

/// Piecewise-linear Jet colormap, 0 is dark blue and 1 dark red.
pub const JET: [[u8; 3]; 256] = jet_table();

pub fn jet(value: f64) -> [u8; 3] {
    JET[(value.clamp(0.0, 1.0) * 255.0).round() as usize]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapStyle {
    /// Weight of the heatmap over the base image.
    pub alpha: f64,
}

impl Default for HeatmapStyle {
    fn default() -> Self {
        HeatmapStyle { alpha: DEFAULT_ALPHA }
    }
}

/// Bilinear resample of a row-major grid with half-pixel centres.
pub fn upsample(values: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            let top = values[y0 * w + x0] * (1.0 - fx) + values[y0 * w + x1] * fx;
            let bot = values[y1 * w + x0] * (1.0 - fx) + values[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Jet overlay of `map` on `base`, at `base`'s resolution.
pub fn render_heatmap(map: &SaliencyMap, base: &ImageBuffer, style: HeatmapStyle) -> ImageBuffer {
    let base = base.to_rgb();
    let (w, h) = (base.width(), base.height());
    let up = upsample(&map.normalized, map.width, map.height, w, h);
    let a = style.alpha.clamp(0.0, 1.0);
    let mut data = Vec::with_capacity(w * h * 3);
    for (i, v) in up.iter().enumerate() {
        let color = jet(*v);
        for c in 0..3 {
            let b = base.data()[i * 3 + c] as f64;
            data.push((a * color[c] as f64 + (1.0 - a) * b).round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(w, h, 3, data).expect("rgb buffer size")
}

/// Sidecar line accompanying each rendered heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRecord {
    pub image: String,
    pub output: String,
    pub verdict: String,
    pub confidence: f64,
    pub file: String,
}

fn verdict(output: &str, confidence: f64) -> String {
    match (output == "primary", is_positive(confidence)) {
        (true, true) => "fake".into(),
        (true, false) => "real".into(),
        (false, true) => "attributed".into(),
        (false, false) => "not-attributed".into(),
    }
}

/// Renders one heatmap per output of `bundle` for `img` into `dir`.
pub fn write_heatmaps(
    bundle: &ModelBundle,
    id: &str,
    img: &ImageBuffer,
    dir: &Path,
    style: HeatmapStyle,
) -> Result<(Vec<HeatmapRecord>, Vec<(SaliencyMap, ImageBuffer)>)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let x = encode_for(bundle, img)?;
    let mut records = Vec::new();
    let mut rendered = Vec::new();
    for map in bundle_saliency(bundle, &x)? {
        let heat = render_heatmap(&map, img, style);
        let file = format!("{id}.{}.png", map.output);
        heat.save_png(&dir.join(&file))?;
        records.push(HeatmapRecord {
            image: id.to_string(),
            output: map.output.clone(),
            verdict: verdict(&map.output, map.confidence),
            confidence: map.confidence,
            file,
        });
        rendered.push((map, heat));
    }
    Ok((records, rendered))
}

/// Tiles equally sized images row-major into a `cols`-wide grid.
pub fn tile(images: &[ImageBuffer], cols: usize) -> Result<ImageBuffer> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("nothing to tile".into()))?;
    let (w, h) = (first.width(), first.height());
    if images.iter().any(|i| i.width() != w || i.height() != h) {
        return Err(Error::Shape("grid tiles differ in size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = ImageBuffer::filled(cols * w, rows * h, [0, 0, 0]);
    let ow = cols * w;
    for (n, img) in images.iter().enumerate() {
        let img = img.to_rgb();
        let (ox, oy) = ((n % cols) * w, (n / cols) * h);
        for y in 0..h {
            let src = &img.data()[y * w * 3..(y + 1) * w * 3];
            let at = ((oy + y) * ow + ox) * 3;
            out.data_mut()[at..at + w * 3].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Heatmaps for a set of images plus one tiled grid per output.
/// Returns the sidecar records and the grid paths.
pub fn cam_grid(
    bundle: &ModelBundle,
    images: &[(String, ImageBuffer)],
    dir: &Path,
    style: HeatmapStyle,
) -> Result<(Vec<HeatmapRecord>, Vec<PathBuf>)> {
    let mut records = Vec::new();
    let mut per_output: Vec<(String, Vec<ImageBuffer>)> = Vec::new();
    for (id, img) in images {
        let (recs, rendered) = write_heatmaps(bundle, id, img, dir, style)?;
        records.extend(recs);
        for (map, heat) in rendered {
            match per_output.iter_mut().find(|(o, _)| *o == map.output) {
                Some((_, v)) => v.push(heat),
                None => per_output.push((map.output, vec![heat])),
            }
        }
    }
    let cols = (images.len() as f64).sqrt().ceil() as usize;
    let mut grids = Vec::new();
    for (output, heats) in per_output {
        let path = dir.join(format!("grid.{output}.png"));
        tile(&heats, cols)?.save_png(&path)?;
        grids.push(path);
    }
    write_sidecar(&records, &dir.join("heatmaps.jsonl"))?;
    Ok((records, grids))
}

pub fn write_sidecar(records: &[HeatmapRecord], path: &Path) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
