//! Supervised autoencoder training with a geometry-configured 2-D latent
//! space, plus the similarity machinery that exploits the known geometry:
//! classifier-free similarity estimation, image retrieval, and text-query
//! search over an encode-once index.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod geometry;
pub mod index;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod textures;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
