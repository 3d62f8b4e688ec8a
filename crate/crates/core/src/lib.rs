//! Encoder-decoder segmentation networks with feature-selected shortcuts,
//! fixed-width stages and adaptive feature fusion, on a small tensor and
//! reverse-mode differentiation core.

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use layers::Mode;
pub use models::{ArchConfig, ModelGraph};
pub use tensor::{Shape4, Tensor4};
