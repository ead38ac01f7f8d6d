//! Text and image encoders feeding the fusion layer.
//!
//! The text side is a small pre-norm transformer trained from scratch; the image
//! side passes stored features through, optionally via a learned projection.

mod image;
mod text;

pub use image::{image_encode, init_image_encoder, ImageEncoderConfig};
pub use text::{init_text_encoder, text_encode, TextEncoderConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Real, Tensor};

/// `rows x cols` matrix with entries drawn from `N(0, std²)`.
pub(crate) fn gaussian<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let n = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| T::lit(n.sample(rng))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub(crate) fn fan_in<T: Real, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    gaussian(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}
