//! Gaussian primitives, cameras, projection and persistence.

mod camera;
mod checkpoint;
mod cloud;
mod dataset;
pub mod project;
pub mod sh;

pub use camera::{Camera, CameraJson};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cloud::{
    logit, sigmoid, GaussianCloud, GradientBundle, ParamArrays, ParamGroup, FALLBACK_SCALE,
    INIT_OPACITY, MAX_SH_DEGREE, SH_C0, SH_COEFFS,
};
pub use dataset::{read_ply, write_ply, Dataset, Manifest};
pub use project::{project, project_one, Projected};
