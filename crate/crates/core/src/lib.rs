//! Conditional graph-diffusion generator for single-cell count matrices.
//!
//! Cells are embedded with a Chebyshev graph encoder over a k-NN graph whose
//! edge weights are adversarially perturbed along the dominant adjacency
//! eigenvector. A conditional noise-prediction network learns the latent
//! distribution under a variance-preserving SDE, and a Poisson decoder maps
//! sampled latents back to counts.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
mod container;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod generate;
pub mod graph;
pub mod ingest;
pub mod model;
pub mod perturb;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
