//! Infrastructure for medical-volume deep-learning pipelines.

pub mod aggregate;
pub mod augment;
pub mod config;
pub mod dataset;
pub mod driver;
pub mod error;
pub mod evaluate;
pub mod mask;
pub mod nifti;
pub mod normalize;
pub mod rng;
pub mod sample;
pub mod stats;
pub mod volume;

pub use error::{Error, Result};
pub use mask::BinaryMask;
pub use volume::{Affine, DType, Interpolation, PadMode, Volume};
