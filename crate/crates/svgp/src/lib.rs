//! Sparse variational Gaussian process engine.
//!
//! Conditioning and marginal-mixing identities over dense Gaussians, RBF
//! kernels with derivative features, whitened variational posteriors,
//! Gaussian/heteroscedastic/Bernoulli likelihoods, multioutput and deep GP
//! stacks, and importance-weighted latent-variable objectives — all
//! trainable by reverse-mode gradients and reproducible under counter-based
//! random streams.

pub mod error;
pub mod deep;
pub mod gauss;
pub mod inducing;
pub mod kernel;
pub mod layer;
pub mod likelihood;
pub mod multioutput;
pub mod params;
pub mod linalg;
pub mod par;
pub mod quad;
pub mod rng;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
