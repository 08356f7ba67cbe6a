//! Forward and backward kernels for the fixed operator set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Upper bound on im2col buffer elements; larger batches are processed in chunks.
const COL_BUDGET: usize = 1 << 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<S> {
    /// `(out_ch, in_ch, k, k)`
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
    pub stride: usize,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Tensor<S>, bias: Option<Tensor<S>>, stride: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 {
            return Err(Error::Shape(format!(
                "conv weight must be (out, in, k, k) with odd k, got {s:?}"
            )));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::InvalidArgument(format!("conv stride must be 1 or 2, got {stride}")));
        }
        if let Some(b) = &bias {
            b.expect_shape(&[s[0]])?;
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        let pad = k / 2;
        (
            (h + 2 * pad - k) / self.stride + 1,
            (w + 2 * pad - k) / self.stride + 1,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
    pub momentum: f64,
    pub eps: f64,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], S::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], S::one()),
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<S> {
    /// `(out, in)`
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.ndim() != 2 {
            return Err(Error::Shape(format!(
                "dense weight must be 2-d, got {:?}",
                weight.shape()
            )));
        }
        bias.expect_shape(&[weight.shape()[0]])?;
        Ok(Dense { weight, bias })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

fn dims4<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(Error::Shape(format!("{what} expects (B, C, H, W), got {s:?}"))),
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, n] => Ok((b, n)),
        ref s => Err(Error::Shape(format!("{what} expects (B, N), got {s:?}"))),
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }
}

fn chunk_len(geom: &ConvGeom, batch: usize) -> usize {
    let per = geom.rows() * geom.positions();
    (COL_BUDGET / per.max(1)).clamp(1, batch.max(1))
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside the row.
fn valid_cols(geom: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = geom.pad.saturating_sub(kx).div_ceil(geom.stride).min(geom.wo);
    let last = geom.w + geom.pad - 1;
    let hi = if last < kx { 0 } else { ((last - kx) / geom.stride + 1).min(geom.wo) };
    (lo, hi.max(lo))
}

/// Fills `col` (rows × nb·positions) from samples `b0..b0+nb` of `input`.
fn im2col<S: Scalar>(input: &[S], geom: &ConvGeom, b0: usize, nb: usize, col: &mut [S]) {
    let n = nb * geom.positions();
    let plane = geom.h * geom.w;
    let sample = geom.c * plane;
    let st = geom.stride;
    for ci in 0..geom.c {
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (ci * geom.k + ky) * geom.k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(geom, kx);
                for bi in 0..nb {
                    let src = &input[(b0 + bi) * sample + ci * plane..][..plane];
                    for oy in 0..geom.ho {
                        let out = &mut dst[bi * geom.positions() + oy * geom.wo..][..geom.wo];
                        let iy = oy * st + ky;
                        if iy < geom.pad || iy - geom.pad >= geom.h {
                            out.fill(S::zero());
                            continue;
                        }
                        let src_row = &src[(iy - geom.pad) * geom.w..][..geom.w];
                        out[..lo].fill(S::zero());
                        out[hi..].fill(S::zero());
                        if lo == hi {
                            continue;
                        }
                        let first = lo * st + kx - geom.pad;
                        if st == 1 {
                            out[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                        } else {
                            let src = &src_row[first..first + (hi - lo - 1) * st + 1];
                            for (j, o) in out[lo..hi].iter_mut().enumerate() {
                                *o = src[j * st];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], geom: &ConvGeom, b0: usize, nb: usize, grad: &mut [S]) {
    let n = nb * geom.positions();
    let plane = geom.h * geom.w;
    let sample = geom.c * plane;
    let st = geom.stride;
    for ci in 0..geom.c {
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (ci * geom.k + ky) * geom.k + kx;
                let src = &col[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(geom, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * st + kx - geom.pad;
                for bi in 0..nb {
                    let dst = &mut grad[(b0 + bi) * sample + ci * plane..][..plane];
                    for oy in 0..geom.ho {
                        let iy = oy * st + ky;
                        if iy < geom.pad || iy - geom.pad >= geom.h {
                            continue;
                        }
                        let g = &src[bi * geom.positions() + oy * geom.wo..][lo..hi];
                        let d = &mut dst[(iy - geom.pad) * geom.w + first..];
                        if st == 1 {
                            for (d, &g) in d[..hi - lo].iter_mut().zip(g) {
                                *d += g;
                            }
                        } else {
                            for (d, &g) in d.iter_mut().step_by(st).zip(g) {
                                *d += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom<S: Scalar>(input: &Tensor<S>, layer: &Conv2d<S>) -> Result<(usize, ConvGeom)> {
    let (b, c, h, w) = dims4(input, "conv2d")?;
    if c != layer.in_channels() {
        return Err(Error::Shape(format!(
            "conv2d input has {c} channels, weights expect {}",
            layer.in_channels()
        )));
    }
    let (ho, wo) = layer.output_hw(h, w);
    Ok((
        b,
        ConvGeom {
            c,
            h,
            w,
            k: layer.kernel(),
            pad: layer.kernel() / 2,
            stride: layer.stride,
            ho,
            wo,
        },
    ))
}

/// Zero-padded (`k/2`) cross-correlation.
pub fn conv2d<S: Scalar>(input: &Tensor<S>, layer: &Conv2d<S>) -> Result<Tensor<S>> {
    let (batch, geom) = conv_geom(input, layer)?;
    let cout = layer.out_channels();
    let pos = geom.positions();
    let rows = geom.rows();
    let mut out = vec![S::zero(); batch * cout * pos];
    let chunk = chunk_len(&geom, batch);
    let mut col = vec![S::zero(); rows * chunk * pos];
    let mut res = vec![S::zero(); cout * chunk * pos];
    let mut b0 = 0;
    while b0 < batch {
        let nb = chunk.min(batch - b0);
        let n = nb * pos;
        im2col(input.data(), &geom, b0, nb, &mut col[..rows * n]);
        S::gemm(
            cout,
            rows,
            n,
            S::one(),
            layer.weight.data(),
            rows as isize,
            1,
            &col[..rows * n],
            n as isize,
            1,
            S::zero(),
            &mut res[..cout * n],
            n as isize,
            1,
        );
        for bi in 0..nb {
            for co in 0..cout {
                let bias = layer.bias.as_ref().map_or(S::zero(), |b| b.data()[co]);
                let src = &res[co * n + bi * pos..][..pos];
                let dst = &mut out[((b0 + bi) * cout + co) * pos..][..pos];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        b0 += nb;
    }
    Tensor::from_vec(vec![batch, cout, geom.ho, geom.wo], out)
}

pub struct ConvGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Option<Tensor<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    layer: &Conv2d<S>,
    grad_out: &Tensor<S>,
) -> Result<ConvGrads<S>> {
    let (batch, geom) = conv_geom(input, layer)?;
    let cout = layer.out_channels();
    let pos = geom.positions();
    let rows = geom.rows();
    grad_out.expect_shape(&[batch, cout, geom.ho, geom.wo])?;
    let mut grad_in = vec![S::zero(); input.len()];
    let mut grad_w = vec![S::zero(); layer.weight.len()];
    let mut grad_b = vec![S::zero(); cout];
    let chunk = chunk_len(&geom, batch);
    let mut col = vec![S::zero(); rows * chunk * pos];
    let mut dy = vec![S::zero(); cout * chunk * pos];
    let mut b0 = 0;
    while b0 < batch {
        let nb = chunk.min(batch - b0);
        let n = nb * pos;
        for bi in 0..nb {
            for co in 0..cout {
                let src = &grad_out.data()[((b0 + bi) * cout + co) * pos..][..pos];
                dy[co * n + bi * pos..][..pos].copy_from_slice(src);
                grad_b[co] += src.iter().copied().sum::<S>();
            }
        }
        im2col(input.data(), &geom, b0, nb, &mut col[..rows * n]);
        // dW += dY · colᵀ
        S::gemm(
            cout,
            n,
            rows,
            S::one(),
            &dy[..cout * n],
            n as isize,
            1,
            &col[..rows * n],
            1,
            n as isize,
            S::one(),
            &mut grad_w,
            rows as isize,
            1,
        );
        // dcol = Wᵀ · dY, reusing the col buffer
        S::gemm(
            rows,
            cout,
            n,
            S::one(),
            layer.weight.data(),
            1,
            rows as isize,
            &dy[..cout * n],
            n as isize,
            1,
            S::zero(),
            &mut col[..rows * n],
            n as isize,
            1,
        );
        col2im(&col[..rows * n], &geom, b0, nb, &mut grad_in);
        b0 += nb;
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(input.shape().to_vec(), grad_in)?,
        weight: Tensor::from_vec(layer.weight.shape().to_vec(), grad_w)?,
        bias: match layer.bias {
            Some(_) => Some(Tensor::from_vec(vec![cout], grad_b)?),
            None => None,
        },
    })
}

/// Per-channel normalization intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    pub normalized: Tensor<S>,
    pub inv_std: Vec<S>,
    pub mode: Mode,
}

/// Batch normalization over `(B, H, W)` per channel.
///
/// Train mode uses the biased batch variance and folds it into the running
/// statistics as `running = momentum * running + (1 - momentum) * batch`.
pub fn batchnorm2d<S: Scalar>(
    input: &Tensor<S>,
    layer: &mut BatchNorm2d<S>,
    mode: Mode,
) -> Result<(Tensor<S>, BnCache<S>)> {
    let (b, c, h, w) = dims4(input, "batchnorm2d")?;
    if c != layer.channels() {
        return Err(Error::Shape(format!(
            "batchnorm2d has {} channels, input has {c}",
            layer.channels()
        )));
    }
    if mode == Mode::Train && b < 2 {
        return Err(Error::InvalidArgument(
            "batchnorm2d in train mode needs a batch of at least 2".into(),
        ));
    }
    let plane = h * w;
    let count = (b * plane) as f64;
    let eps = layer.eps;
    let momentum = layer.momentum;
    let mut out = vec![S::zero(); input.len()];
    let mut inv_std = Vec::with_capacity(c);
    let x = input.data();
    for ch in 0..c {
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = 0.0;
                for bi in 0..b {
                    sum += x[(bi * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| v.as_f64())
                        .sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0;
                for bi in 0..b {
                    sq += x[(bi * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v.as_f64() - mean).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count;
                let rm = &mut layer.running_mean.data_mut()[ch];
                *rm = S::from_f64(momentum * rm.as_f64() + (1.0 - momentum) * mean);
                let rv = &mut layer.running_var.data_mut()[ch];
                *rv = S::from_f64(momentum * rv.as_f64() + (1.0 - momentum) * var);
                (mean, var)
            }
            Mode::Eval => (
                layer.running_mean.data()[ch].as_f64(),
                layer.running_var.data()[ch].as_f64(),
            ),
        };
        let istd = S::from_f64(1.0 / (var + eps).sqrt());
        let mean = S::from_f64(mean);
        inv_std.push(istd);
        for bi in 0..b {
            let off = (bi * c + ch) * plane;
            for (o, &v) in out[off..off + plane].iter_mut().zip(&x[off..off + plane]) {
                *o = (v - mean) * istd;
            }
        }
    }
    let normalized = Tensor::from_vec(input.shape().to_vec(), out)?;
    let mut y = normalized.clone();
    {
        let yd = y.data_mut();
        for bi in 0..b {
            for ch in 0..c {
                let g = layer.gamma.data()[ch];
                let be = layer.beta.data()[ch];
                for v in &mut yd[(bi * c + ch) * plane..][..plane] {
                    *v = *v * g + be;
                }
            }
        }
    }
    Ok((
        y,
        BnCache {
            normalized,
            inv_std,
            mode,
        },
    ))
}

pub struct BnGrads<S> {
    pub input: Tensor<S>,
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
}

pub fn batchnorm2d_backward<S: Scalar>(
    cache: &BnCache<S>,
    layer: &BatchNorm2d<S>,
    grad_out: &Tensor<S>,
) -> Result<BnGrads<S>> {
    grad_out.expect_shape(cache.normalized.shape())?;
    let (b, c, h, w) = dims4(grad_out, "batchnorm2d backward")?;
    let plane = h * w;
    let n = S::from_f64((b * plane) as f64);
    let dy = grad_out.data();
    let xhat = cache.normalized.data();
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * plane;
            for i in off..off + plane {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xhat[i];
            }
        }
    }
    let mut dx = vec![S::zero(); grad_out.len()];
    for bi in 0..b {
        for ch in 0..c {
            let g = layer.gamma.data()[ch];
            let istd = cache.inv_std[ch];
            let off = (bi * c + ch) * plane;
            match cache.mode {
                Mode::Train => {
                    let k = g * istd / n;
                    for i in off..off + plane {
                        dx[i] = k * (n * dy[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                    }
                }
                Mode::Eval => {
                    for i in off..off + plane {
                        dx[i] = dy[i] * g * istd;
                    }
                }
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::from_vec(grad_out.shape().to_vec(), dx)?,
        gamma: Tensor::from_vec(vec![c], dgamma)?,
        beta: Tensor::from_vec(vec![c], dbeta)?,
    })
}

pub fn leaky_relu<S: Scalar>(input: &Tensor<S>, alpha: f64) -> Tensor<S> {
    let a = S::from_f64(alpha);
    input.map(|v| if v >= S::zero() { v } else { a * v })
}

pub fn leaky_relu_backward<S: Scalar>(
    input: &Tensor<S>,
    alpha: f64,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    grad_out.expect_shape(input.shape())?;
    let a = S::from_f64(alpha);
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x >= S::zero() { g } else { a * g })
        .collect();
    Tensor::from_vec(input.shape().to_vec(), data)
}

pub fn global_avg_pool<S: Scalar>(input: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, c, h, w) = dims4(input, "global_avg_pool")?;
    let plane = h * w;
    let inv = S::from_f64(1.0 / plane as f64);
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|p| p.iter().copied().sum::<S>() * inv)
        .collect();
    Tensor::from_vec(vec![b, c], data)
}

pub fn global_avg_pool_backward<S: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [b, c, h, w] = *input_shape else {
        return Err(Error::Shape(format!(
            "global_avg_pool backward expects 4-d input shape, got {input_shape:?}"
        )));
    };
    grad_out.expect_shape(&[b, c])?;
    let plane = h * w;
    let inv = S::from_f64(1.0 / plane as f64);
    let mut data = Vec::with_capacity(b * c * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * inv, plane));
    }
    Tensor::from_vec(input_shape.to_vec(), data)
}

/// Non-overlapping `size × size` window means.
pub fn avg_pool2d<S: Scalar>(input: &Tensor<S>, size: usize) -> Result<Tensor<S>> {
    let (b, c, h, w) = dims4(input, "avg_pool2d")?;
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::Shape(format!(
            "avg_pool2d: {h}x{w} is not divisible by pool size {size}"
        )));
    }
    let (ho, wo) = (h / size, w / size);
    let inv = S::from_f64(1.0 / (size * size) as f64);
    let x = input.data();
    let mut out = vec![S::zero(); b * c * ho * wo];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for y in 0..h {
            for xx in 0..w {
                dst[(y / size) * wo + xx / size] += src[y * w + xx];
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::from_vec(vec![b, c, ho, wo], out)
}

pub fn avg_pool2d_backward<S: Scalar>(
    input_shape: &[usize],
    size: usize,
    grad_out: &Tensor<S>,
) -> Result<Tensor<S>> {
    let [b, c, h, w] = *input_shape else {
        return Err(Error::Shape(format!(
            "avg_pool2d backward expects 4-d input shape, got {input_shape:?}"
        )));
    };
    let (ho, wo) = (h / size, w / size);
    grad_out.expect_shape(&[b, c, ho, wo])?;
    let inv = S::from_f64(1.0 / (size * size) as f64);
    let g = grad_out.data();
    let mut out = vec![S::zero(); b * c * h * w];
    for p in 0..b * c {
        for y in 0..h {
            for x in 0..w {
                out[p * h * w + y * w + x] = g[p * ho * wo + (y / size) * wo + x / size] * inv;
            }
        }
    }
    Tensor::from_vec(input_shape.to_vec(), out)
}

/// Affine map `x Wᵀ + b` over a `(B, N)` batch.
pub fn dense<S: Scalar>(input: &Tensor<S>, layer: &Dense<S>) -> Result<Tensor<S>> {
    let (b, n) = dims2(input, "dense")?;
    if n != layer.in_features() {
        return Err(Error::Shape(format!(
            "dense expects {} input features, got {n}",
            layer.in_features()
        )));
    }
    let m = layer.out_features();
    let mut out = Vec::with_capacity(b * m);
    for _ in 0..b {
        out.extend_from_slice(layer.bias.data());
    }
    S::gemm(
        b,
        n,
        m,
        S::one(),
        input.data(),
        n as isize,
        1,
        layer.weight.data(),
        1,
        n as isize,
        S::one(),
        &mut out,
        m as isize,
        1,
    );
    Tensor::from_vec(vec![b, m], out)
}

pub struct DenseGrads<S> {
    pub input: Tensor<S>,
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    layer: &Dense<S>,
    grad_out: &Tensor<S>,
) -> Result<DenseGrads<S>> {
    let (b, n) = dims2(input, "dense backward")?;
    let m = layer.out_features();
    grad_out.expect_shape(&[b, m])?;
    let mut gw = vec![S::zero(); m * n];
    S::gemm(
        m,
        b,
        n,
        S::one(),
        grad_out.data(),
        1,
        m as isize,
        input.data(),
        n as isize,
        1,
        S::zero(),
        &mut gw,
        n as isize,
        1,
    );
    let mut gx = vec![S::zero(); b * n];
    S::gemm(
        b,
        m,
        n,
        S::one(),
        grad_out.data(),
        m as isize,
        1,
        layer.weight.data(),
        n as isize,
        1,
        S::zero(),
        &mut gx,
        n as isize,
        1,
    );
    let mut gb = vec![S::zero(); m];
    for row in grad_out.data().chunks_exact(m) {
        for (acc, &g) in gb.iter_mut().zip(row) {
            *acc += g;
        }
    }
    Ok(DenseGrads {
        input: Tensor::from_vec(vec![b, n], gx)?,
        weight: Tensor::from_vec(vec![m, n], gw)?,
        bias: Tensor::from_vec(vec![m], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv_all_ones_counts_overlap() {
        let layer = Conv2d::new(Tensor::full(&[1, 1, 3, 3], 1.0), None, 1).unwrap();
        let out = conv2d(&Tensor::full(&[1, 1, 3, 3], 1.0), &layer).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.data()[1], 6.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let layer = Conv2d::new(t(&[1, 1, 3, 3], k), None, 1).unwrap();
        let x = t(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.5, 5.0, -6.0]);
        assert_eq!(conv2d(&x, &layer).unwrap(), x);
    }

    #[test]
    fn conv_channel_mismatch() {
        let layer = Conv2d::new(Tensor::full(&[2, 3, 3, 3], 1.0), None, 1).unwrap();
        let err = conv2d(&Tensor::<f64>::zeros(&[1, 2, 4, 4]), &layer).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn conv_rejects_stride_three() {
        assert!(Conv2d::new(Tensor::<f64>::zeros(&[1, 1, 3, 3]), None, 3).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_yields_shift() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.beta.data_mut()[0] = 0.7;
        let (y, _) = batchnorm2d(&Tensor::full(&[2, 1, 2, 2], 3.0), &mut bn, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn batchnorm_standardized_batch_passes_through() {
        let x = t(&[2, 1, 1, 2], vec![1.0, -1.0, 1.0, -1.0]);
        let mut bn = BatchNorm2d::<f64>::new(1);
        let (y, _) = batchnorm2d(&x, &mut bn, Mode::Train).unwrap();
        // scale is 1/sqrt(1 + eps)
        assert!(y.max_abs_diff(&x) < 1e-5);
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let err = batchnorm2d(&Tensor::zeros(&[1, 1, 2, 2]), &mut bn, Mode::Train).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
        assert!(batchnorm2d(&Tensor::zeros(&[1, 1, 2, 2]), &mut bn, Mode::Eval).is_ok());
    }

    #[test]
    fn leaky_relu_examples() {
        let y = leaky_relu(&t(&[2], vec![2.0, -2.0]), 0.2);
        assert_eq!(y.data()[0], 2.0);
        assert!((y.data()[1] + 0.4).abs() < 1e-15);
        let pos = t(&[3], vec![0.0, 1.0, 5.0]);
        assert_eq!(leaky_relu(&pos, 0.2), pos);
    }

    #[test]
    fn pooling_examples() {
        let g = global_avg_pool(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(g.data(), &[2.5]);
        let g = global_avg_pool(&Tensor::full(&[1, 2, 3, 5], 1.5)).unwrap();
        assert_eq!(g.data(), &[1.5, 1.5]);

        let p = avg_pool2d(&t(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]), 2).unwrap();
        assert_eq!(p.data(), &[4.0]);
        let p = avg_pool2d(&Tensor::full(&[1, 1, 4, 4], 2.0), 2).unwrap();
        assert_eq!(p, Tensor::full(&[1, 1, 2, 2], 2.0));
        assert!(avg_pool2d(&Tensor::<f64>::zeros(&[1, 1, 3, 4]), 2).is_err());
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let id = Dense::new(eye, Tensor::zeros(&[3])).unwrap();
        assert_eq!(dense(&x, &id).unwrap(), x);

        let b = t(&[2], vec![0.25, -3.0]);
        let zero = Dense::new(Tensor::zeros(&[2, 3]), b.clone()).unwrap();
        let y = dense(&x, &zero).unwrap();
        assert_eq!(y.data(), &[0.25, -3.0, 0.25, -3.0]);
        assert!(dense(&Tensor::zeros(&[2, 4]), &zero).is_err());
    }
}
