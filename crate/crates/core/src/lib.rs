//! Large-scale texture synthesis by tiling intermediate activations of a
//! convolutional generator.
//!
//! The generator is split at a pyramid level `l` into a head that maps a
//! latent vector to a small activation tile and a tail that renders any
//! grid of such tiles (a *latent field*) into one seamless image. Fields are
//! assembled from a preprocessed bank of tiles by minimising a Markov random
//! field energy steered by a low-resolution guidance map, and can be edited
//! cell by cell afterwards.
//!
//! Module map:
//! - [`tensor`]: dense CHW tensors, the handful of kernels the network needs, and the seeded RNG.
//! - [`generator`]: the level pyramid, split evaluation, exact chunked rendering, `TGW1` weights.
//! - [`bank`]: the sample bank, k-means clustering, retrieval, `TGB1` files.
//! - [`synthesis`]: guidance maps, unary/binary energies, initial tiling and refinement, `TGF1` files.
//! - [`editor`]: latent brushes, cloning, noise, interpolation, guidance edits, undo and command logs.
//! - [`imageio`]: PNG conversion shared by the CLI and the service.

pub mod bank;
pub mod editor;
mod error;
pub mod generator;
pub mod imageio;
pub mod synthesis;
pub mod tensor;
mod wire;

pub use error::{Error, Result};
