//! Gaussian-process amortized inference for variational autoencoders.
//!
//! The encoder's mean and standard-deviation functions are modelled as
//! random functions `b(x) + W ψᵐ(x)` and `c(x) + U ψˢ(x)` with Gaussian
//! posteriors over the weight matrices `W`, `U`. Marginalizing those weights
//! gives a single closed-form diagonal Gaussian encoder that costs one
//! forward pass, and whose posterior variance doubles as a per-instance
//! uncertainty gauge.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. IO, file formats and timing live in the `gpvae` companion crate.
//!
//! Module map:
//! - [`gaussian`], [`rng`], [`stats`], [`linalg`]: probability and linear
//!   algebra kernels.
//! - [`nn`], [`adam`]: small MLPs with reverse-mode gradients and Adam.
//! - [`gp`]: the GP variational parameters, marginal encoder, expected KL,
//!   weight KL and uncertainty gauge.
//! - [`model`]: decoder likelihood, prior and surrogate likelihood.
//! - [`train`]: per-datapoint ELBO with gradients and the training loop.
//! - [`baselines`]: VAE encoder, per-instance SVI, semi-amortized refinement,
//!   amortization gap.
//! - [`eval`]: IWAE, posterior grid quadrature, uncertainty study.
//! - [`data`]: datasets, deterministic splits and synthetic generators.

#![cfg_attr(not(feature = "std"), no_std)]
// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

extern crate alloc;

pub mod adam;
pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod gp;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod train;

pub use error::{Error, Result};

/// Floor applied to every variance before it enters a logarithm or a square root.
pub const VAR_FLOOR: f64 = 1e-8;
