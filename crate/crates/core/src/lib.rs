//! Two-stage prompt tuning for semi-supervised classification on frozen
//! pre-trained transformers: prompts are first adapted to the unlabeled
//! distribution, then a second prompt set is trained for classification
//! with a confidence-thresholded consistency objective.

pub mod augment;
pub mod clip;
pub mod data;
pub mod error;
pub mod experiment;
pub mod tensor;
pub mod text;
pub mod vision;
pub mod vit;

pub use error::{FateError, Result};
