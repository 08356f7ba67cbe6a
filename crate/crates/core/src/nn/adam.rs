use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// First/second moment accumulators for every parameter plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<S>>, lr: f64) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut Tensor<S>],
    grads: &[Tensor<S>],
    state: &mut AdamState<S>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "adam: param {:?} vs grad {:?} vs state {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = S::from_f64(mj);
            v[j] = S::from_f64(vj);
            let update = state.lr * (mj / c1) / ((vj / c2).sqrt() + state.eps);
            *w = S::from_f64(w.as_f64() - update);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut st = AdamState::new([&p], 1e-3);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new([&p], 1e-3);
        adam_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
        // m_hat = v_hat = 1 after bias correction
        let expected = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!(st.v[0].data()[0] >= 0.0);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new([&p], 1e-3);
        assert!(adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st).is_err());
        assert_eq!(st.t, 0);
    }
}
