//! Diffusion-model toolkit built around assignment-based noise pairing.
//!
//! Training pairs every pool of data points with a permutation of freshly drawn
//! Gaussian noise that minimizes the total Euclidean pairing cost (an exact
//! linear assignment), then fits a preconditioned denoiser with the usual
//! weighted reconstruction loss. Sampling integrates the probability-flow ODE
//! `dx/dσ = (x − D(x; σ)) / σ` with Heun's method on a ρ-warped σ grid, and the
//! diagnostics module measures how curved the resulting trajectories are.
//!
//! Module map:
//! - [`assignment`]: exact Hungarian solver and a brute-force oracle.
//! - [`transport`]: cost matrices, unconditional / class-wise pairing, pair pools, empirical W2.
//! - [`schedule`]: σ grid, training σ distribution, loss weight.
//! - [`model`]: MLP denoiser with hand-written backprop, analytic denoisers.
//! - [`sampler`]: Heun and Euler PF-ODE samplers with trajectory recording.
//! - [`diagnostics`]: curvature, truncation error, generation metrics.
//! - [`data`]: toy datasets, CSV IO, normalization.
//! - [`training`]: the pool/minibatch training loop, EMA, checkpoints.
//! - [`guidance`]: discriminator training and density-ratio guidance.
//! - [`cli`]: command implementations behind the `aotdiff` binary.

pub mod assignment;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod guidance;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod training;
pub mod transport;

pub use error::{Error, Result};
