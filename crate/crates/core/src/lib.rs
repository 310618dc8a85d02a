//! Tetrahedron-Net: unsupervised 3D deformable image registration with a
//! shared encoder and stacked cooperating decoders.

pub mod arch;
pub mod autograd;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod warp;

pub use error::{Error, Result};
pub use tensor::Tensor;
