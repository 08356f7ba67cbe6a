//! Ordered layer stacks with a recorded forward tape for backpropagation.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::layers::{self, BatchNorm2d, BnCache, Conv2d, Dense, Mode};

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<S> {
    Conv2d(Conv2d<S>),
    BatchNorm2d(BatchNorm2d<S>),
    LeakyRelu { alpha: f64 },
    AvgPool2d { size: usize },
    GlobalAvgPool,
    Flatten,
    Dense(Dense<S>),
}

impl<S: Scalar> Layer<S> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::LeakyRelu { .. } => "leaky_relu",
            Layer::AvgPool2d { .. } => "avg_pool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::Dense(_) => "dense",
        }
    }

    /// Trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor<S>> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            _ => Vec::new(),
        }
    }

    /// Named tensors including non-trainable state (batchnorm running statistics).
    pub fn state(&self) -> Vec<(&'static str, &Tensor<S>)> {
        match self {
            Layer::Conv2d(c) => {
                let mut v = vec![("weight", &c.weight)];
                if let Some(b) = &c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::BatchNorm2d(b) => vec![
                ("gamma", &b.gamma),
                ("beta", &b.beta),
                ("running_mean", &b.running_mean),
                ("running_var", &b.running_var),
            ],
            Layer::Dense(d) => vec![("weight", &d.weight), ("bias", &d.bias)],
            _ => Vec::new(),
        }
    }

    pub fn state_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        match self {
            Layer::Conv2d(c) => {
                let mut v = vec![("weight", &mut c.weight)];
                if let Some(b) = &mut c.bias {
                    v.push(("bias", b));
                }
                v
            }
            Layer::BatchNorm2d(b) => vec![
                ("gamma", &mut b.gamma),
                ("beta", &mut b.beta),
                ("running_mean", &mut b.running_mean),
                ("running_var", &mut b.running_var),
            ],
            Layer::Dense(d) => vec![("weight", &mut d.weight), ("bias", &mut d.bias)],
            _ => Vec::new(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Layer<T> {
        match self {
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(Tensor::cast),
                stride: c.stride,
            }),
            Layer::BatchNorm2d(b) => Layer::BatchNorm2d(BatchNorm2d {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                momentum: b.momentum,
                eps: b.eps,
            }),
            Layer::LeakyRelu { alpha } => Layer::LeakyRelu { alpha: *alpha },
            Layer::AvgPool2d { size } => Layer::AvgPool2d { size: *size },
            Layer::GlobalAvgPool => Layer::GlobalAvgPool,
            Layer::Flatten => Layer::Flatten,
            Layer::Dense(d) => Layer::Dense(Dense {
                weight: d.weight.cast(),
                bias: d.bias.cast(),
            }),
        }
    }

    /// Output shape (without the batch axis) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let chw = |what: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Shape(format!("{what} expects (C, H, W), got {input:?}"))),
            }
        };
        Ok(match self {
            Layer::Conv2d(c) => {
                let (ch, h, w) = chw("conv2d")?;
                if ch != c.in_channels() {
                    return Err(Error::Shape(format!(
                        "conv2d expects {} channels, got {ch}",
                        c.in_channels()
                    )));
                }
                let (ho, wo) = c.output_hw(h, w);
                vec![c.out_channels(), ho, wo]
            }
            Layer::BatchNorm2d(b) => {
                let (ch, _, _) = chw("batchnorm2d")?;
                if ch != b.channels() {
                    return Err(Error::Shape(format!(
                        "batchnorm2d expects {} channels, got {ch}",
                        b.channels()
                    )));
                }
                input.to_vec()
            }
            Layer::LeakyRelu { .. } => input.to_vec(),
            Layer::AvgPool2d { size } => {
                let (c, h, w) = chw("avg_pool2d")?;
                if h % size != 0 || w % size != 0 {
                    return Err(Error::Shape(format!("{h}x{w} not divisible by {size}")));
                }
                vec![c, h / size, w / size]
            }
            Layer::GlobalAvgPool => vec![chw("global_avg_pool")?.0],
            Layer::Flatten => vec![input.iter().product()],
            Layer::Dense(d) => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != d.in_features() {
                    return Err(Error::Shape(format!(
                        "dense expects [{}], got {input:?}",
                        d.in_features()
                    )));
                }
                vec![d.out_features()]
            }
        })
    }
}

#[derive(Clone, Debug)]
enum Cached<S> {
    Input(Tensor<S>),
    Shape(Vec<usize>),
    Bn(BnCache<S>),
}

/// Intermediates of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    entries: Vec<Cached<S>>,
}

/// Gradients of a scalar loss with respect to every trainable parameter
/// (in [`Sequential::params`] order) and to the network input.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub params: Vec<Tensor<S>>,
    pub input: Tensor<S>,
}

fn forward_layer<S: Scalar>(
    layer: &mut Layer<S>,
    x: &Tensor<S>,
    mode: Mode,
    record: bool,
) -> Result<(Tensor<S>, Option<Cached<S>>)> {
    let keep_input = |x: &Tensor<S>| record.then(|| Cached::Input(x.clone()));
    Ok(match layer {
        Layer::Conv2d(c) => (layers::conv2d(x, c)?, keep_input(x)),
        Layer::BatchNorm2d(b) => {
            let (y, cache) = layers::batchnorm2d(x, b, mode)?;
            (y, record.then_some(Cached::Bn(cache)))
        }
        Layer::LeakyRelu { alpha } => (layers::leaky_relu(x, *alpha), keep_input(x)),
        Layer::AvgPool2d { size } => (
            layers::avg_pool2d(x, *size)?,
            record.then(|| Cached::Shape(x.shape().to_vec())),
        ),
        Layer::GlobalAvgPool => (
            layers::global_avg_pool(x)?,
            record.then(|| Cached::Shape(x.shape().to_vec())),
        ),
        Layer::Flatten => {
            let b = x.shape()[0];
            let n = x.len() / b;
            (
                x.clone().reshape(&[b, n])?,
                record.then(|| Cached::Shape(x.shape().to_vec())),
            )
        }
        Layer::Dense(d) => (layers::dense(x, d)?, keep_input(x)),
    })
}

/// Runs one layer in eval mode without touching any state.
fn infer_layer<S: Scalar>(layer: &Layer<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    match layer {
        Layer::BatchNorm2d(b) => {
            // eval mode never mutates; clone only the small parameter vectors
            let mut b = b.clone();
            Ok(layers::batchnorm2d(x, &mut b, Mode::Eval)?.0)
        }
        Layer::Conv2d(c) => layers::conv2d(x, c),
        Layer::LeakyRelu { alpha } => Ok(layers::leaky_relu(x, *alpha)),
        Layer::AvgPool2d { size } => layers::avg_pool2d(x, *size),
        Layer::GlobalAvgPool => layers::global_avg_pool(x),
        Layer::Flatten => {
            let b = x.shape()[0];
            x.clone().reshape(&[b, x.len() / b])
        }
        Layer::Dense(d) => layers::dense(x, d),
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential<S> {
    pub layers: Vec<Layer<S>>,
    tape: Option<Tape<S>>,
}

impl<S: Scalar> PartialEq for Sequential<S> {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl<S: Scalar> Sequential<S> {
    pub fn new(layers: Vec<Layer<S>>) -> Self {
        Sequential { layers, tape: None }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn params(&self) -> Vec<&Tensor<S>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Sequential<T> {
        Sequential::new(self.layers.iter().map(Layer::cast).collect())
    }

    /// Eval-mode forward pass; safe to call concurrently.
    pub fn infer(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.infer_range(x, 0..self.layers.len())
    }

    pub fn infer_range(&self, x: &Tensor<S>, range: Range<usize>) -> Result<Tensor<S>> {
        let mut cur = x.clone();
        for layer in &self.layers[range] {
            cur = infer_layer(layer, &cur)?;
        }
        Ok(cur)
    }

    /// Forward pass that records the tape for a following [`Sequential::backward`].
    /// In train mode batchnorm uses batch statistics and updates its running stats.
    pub fn forward(&mut self, x: &Tensor<S>, mode: Mode) -> Result<Tensor<S>> {
        let mut entries = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (next, cached) = forward_layer(layer, &cur, mode, true)?;
            entries.push(cached.expect("recording forward always caches"));
            cur = next;
        }
        self.tape = Some(Tape { entries });
        Ok(cur)
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    /// Backpropagates `grad_out` through the recorded forward pass, consuming the tape.
    pub fn backward(&mut self, grad_out: &Tensor<S>) -> Result<Gradients<S>> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let mut grads_rev: Vec<Vec<Tensor<S>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, cached) in self.layers.iter().zip(&tape.entries).rev() {
            let (gin, pgrads) = match (layer, cached) {
                (Layer::Conv2d(c), Cached::Input(x)) => {
                    let cg = layers::conv2d_backward(x, c, &g)?;
                    let mut p = vec![cg.weight];
                    p.extend(cg.bias);
                    (cg.input, p)
                }
                (Layer::BatchNorm2d(b), Cached::Bn(cache)) => {
                    let bg = layers::batchnorm2d_backward(cache, b, &g)?;
                    (bg.input, vec![bg.gamma, bg.beta])
                }
                (Layer::LeakyRelu { alpha }, Cached::Input(x)) => {
                    (layers::leaky_relu_backward(x, *alpha, &g)?, Vec::new())
                }
                (Layer::AvgPool2d { size }, Cached::Shape(s)) => {
                    (layers::avg_pool2d_backward(s, *size, &g)?, Vec::new())
                }
                (Layer::GlobalAvgPool, Cached::Shape(s)) => {
                    (layers::global_avg_pool_backward(s, &g)?, Vec::new())
                }
                (Layer::Flatten, Cached::Shape(s)) => (g.clone().reshape(s)?, Vec::new()),
                (Layer::Dense(d), Cached::Input(x)) => {
                    let dg = layers::dense_backward(x, d, &g)?;
                    (dg.input, vec![dg.weight, dg.bias])
                }
                _ => return Err(Error::State("tape does not match layer stack".into())),
            };
            grads_rev.push(pgrads);
            g = gin;
        }
        Ok(Gradients {
            params: grads_rev.into_iter().rev().flatten().collect(),
            input: g,
        })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.output_shape_range(input, 0..self.layers.len())
    }

    pub fn output_shape_range(&self, input: &[usize], range: Range<usize>) -> Result<Vec<usize>> {
        let mut s = input.to_vec();
        for layer in &self.layers[range] {
            s = layer.output_shape(&s)?;
        }
        Ok(s)
    }
}
