//! Decision-layer losses. Both return the mean loss over the batch and its
//! gradient with respect to the logits.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct LossOutput<S> {
    pub probs: Tensor<S>,
    pub loss: f64,
    /// d(loss)/d(logits), same shape as the logits.
    pub grad: Tensor<S>,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid probabilities and mean binary cross-entropy, computed as
/// `softplus(z) - y z` so saturated logits stay finite.
pub fn sigmoid_bce<S: Scalar>(logits: &Tensor<S>, labels: &Tensor<S>) -> Result<LossOutput<S>> {
    if logits.ndim() != 2 || logits.shape()[1] != 1 {
        return Err(Error::Shape(format!(
            "sigmoid_bce expects (B, 1) logits, got {:?}",
            logits.shape()
        )));
    }
    labels.expect_shape(logits.shape())?;
    let b = logits.shape()[0] as f64;
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(logits.len());
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.data().iter().zip(labels.data()) {
        let (z, y) = (z.as_f64(), y.as_f64());
        if y != 0.0 && y != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "binary labels must be 0 or 1, got {y}"
            )));
        }
        let p = sigmoid(z);
        loss += softplus(z) - y * z;
        probs.push(S::from_f64(p));
        grad.push(S::from_f64((p - y) / b));
    }
    Ok(LossOutput {
        probs: Tensor::from_vec(logits.shape().to_vec(), probs)?,
        loss: loss / b,
        grad: Tensor::from_vec(logits.shape().to_vec(), grad)?,
    })
}

/// Row-wise softmax (max-subtracted) and mean negative log-likelihood.
pub fn softmax_ce<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<LossOutput<S>> {
    let [b, k] = *logits.shape() else {
        return Err(Error::Shape(format!(
            "softmax_ce expects (B, K) logits, got {:?}",
            logits.shape()
        )));
    };
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    let mut loss = 0.0;
    let mut probs = Vec::with_capacity(b * k);
    let mut grad = Vec::with_capacity(b * k);
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        if label >= k {
            return Err(Error::InvalidArgument(format!(
                "class label {label} out of range for {k} classes"
            )));
        }
        let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label].as_f64();
        for (j, v) in row.iter().enumerate() {
            let p = (v.as_f64() - lse).exp();
            probs.push(S::from_f64(p));
            let target = if j == label { 1.0 } else { 0.0 };
            grad.push(S::from_f64((p - target) / b as f64));
        }
    }
    Ok(LossOutput {
        probs: Tensor::from_vec(vec![b, k], probs)?,
        loss: loss / b as f64,
        grad: Tensor::from_vec(vec![b, k], grad)?,
    })
}
