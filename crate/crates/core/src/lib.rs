//! Unsupervised damage detection and localization by student-teacher
//! distillation between two GANs.
//!
//! A teacher generator/discriminator pair is pretrained on normal images, a
//! narrower student pair is trained to mimic it on the same normal data, and
//! test images are scored by how far the student drifts from the teacher.
//! Gradient saliency over the training objective localizes the damage.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod localization;
pub mod losses;
pub mod meta;
pub mod model;
pub mod optim;
pub mod scoring;
pub mod tensor;
pub mod training;

pub mod cli;

pub use config::{default_config, load_config, validate_config, CriticalLayer, ExperimentConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
