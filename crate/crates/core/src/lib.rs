//! GAN-generated image detection and semi-decentralized source attribution.
//!
//! A shared convolutional primary module decides real vs. fake; independently
//! trained secondary modules branch off its intermediate feature maps and each
//! answer "was generator G involved?".

pub mod augment;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod localization;
pub mod model_zoo;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod synth_fixtures;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
