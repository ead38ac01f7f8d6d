//! Multimodal joint attribute prediction and value extraction.
//!
//! A text encoder and stored image features feed a global-gated cross-modality
//! attention layer; an attribute head predicts the product's attribute set and a
//! regional-gated value head tags value spans in BIO format. Both heads train
//! jointly with a consistency penalty between them.

pub mod cli;
pub mod dataio;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
