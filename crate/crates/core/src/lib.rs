//! Unnaturalness scoring for images by directional recurrent sequence
//! models over CNN feature grids, with two applications: a differentiable
//! natural-image regularizer for reconstructing images from features, and
//! saliency maps for eye-fixation prediction.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`gradcheck`]: dense tensors, reverse-mode
//!   differentiation, and the finite-difference oracle everything is
//!   verified against
//! - [`cnn`]: loadable feed-forward CNN producing tapped feature grids
//! - [`preprocess`]: per-dimension normalization + PCA with dimension halving
//! - [`vlm`]: four-directional stacked-LSTM predictors, unnaturalness maps,
//!   and SGD+BPTT training
//! - [`reconstruct`]: feature inversion by momentum gradient descent with
//!   the unnaturalness score as regularizer
//! - [`saliency`]: saliency maps from unnaturalness plus shuffled-AUC
//!   evaluation
//! - [`container`], [`imageio`], [`fixtures`]: file formats, image I/O,
//!   and deterministic synthetic data generators

pub mod cnn;
pub mod container;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod imageio;
pub mod lstm;
pub mod preprocess;
pub mod reconstruct;
pub mod rng;
pub mod saliency;
pub mod tape;
pub mod tensor;
pub mod vlm;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Tensor};
