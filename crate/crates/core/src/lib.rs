//! Differentiable multi-channel Gaussian splatting for reference-free
//! reconstruction of scenes captured under adverse illumination.

pub mod error;
pub mod image;
pub mod losses;
pub mod pdm;
pub mod prior;
pub mod render;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, Kernel1D};
