//! Self-supervised multi-material reconstruction for spectral CT built on
//! complementary measurement splits.

pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod noise;
pub mod partition;
pub mod phantom;
pub mod pipeline;
pub mod radon;
pub mod render;
pub mod rng;
pub mod solver;
pub mod spectral;
pub mod tensor;
pub mod training;
pub mod types;
pub mod verify;

pub use error::{Error, Result};
pub use types::{MaterialImage, SpectralSinogram};
