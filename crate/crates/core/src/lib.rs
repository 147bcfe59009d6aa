//! Class-incremental semantic segmentation from sparse point annotations.
//!
//! A network trained on `N - 1` classes is frozen as the *memory network*,
//! its head is expanded with one new class, and the *updated network* is
//! fine-tuned on user clicks plus pseudo-labels drawn from the memory
//! network, with one optional regularizer (output distillation, pooled
//! feature distillation, prototype regularization, or neighbourhood
//! consistency).

pub mod annotations;
pub mod data;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{DenseMask, ImageChip, LabeledImage, IGNORE};
