//! Gaze-derived fixation maps, Grad-CAM style visual explanations, and
//! fixation-supervised training of a small convolutional classifier.
//!
//! The crate is organized around four stages that can also be driven
//! end-to-end from the `gazecam` binary or the runnable examples:
//!
//! * [`gaze`]: velocity-threshold fixation extraction from raw gaze samples
//!   and duration-weighted Gaussian fixation maps.
//! * [`model`] + [`layers`]: a six-block convolutional classifier with an
//!   explicit forward/backward implementation (no autograd framework).
//! * [`cam`]: classical gradient-weighted class activation maps and the
//!   elementwise variant, including the dense-weight shortcut that avoids a
//!   backward pass when the head is a single dense layer.
//! * [`train`] + [`stats`]: joint cross-entropy + fixation-map training and
//!   the statistical tooling used to compare the resulting models.

pub mod cam;
pub mod cli;
pub mod data;
pub mod error;
pub mod gaze;
pub mod layers;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pfm;
pub mod rng;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
