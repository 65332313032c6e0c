//! Dynamic neural radiance field engine: an expression-conditioned NeRF whose
//! per-point features pass through a single point-wise transformer encoder
//! layer before the MLP backbone. Includes a tape-based autodiff substrate,
//! differentiable volume rendering with hierarchical sampling, a joint
//! trainer for the coarse/fine networks and per-frame latent codes, a
//! synthetic dynamic-scene generator, and image-quality metrics.

pub mod dataio;
pub mod diffcore;
pub mod encoding;
pub mod error;
pub mod field;
pub mod gat;
pub mod metrics;
pub mod renderer;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
