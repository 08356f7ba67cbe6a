use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Default weight initialization scale for fresh models.
pub const INIT_STD: f64 = 0.02;

/// I.i.d. `N(0, std²)` draws.
pub fn gaussian_init<S: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<S>> {
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::InvalidArgument(format!("init std must be positive, got {std}")));
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data)
}
