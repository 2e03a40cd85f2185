//! Semi-amortized variational inference for latent-variable sequence models.
//!
//! An inference network proposes per-example variational parameters, a
//! differentiable SVI loop refines them, and training backpropagates the
//! refined objective through the refinement itself using finite-difference
//! Hessian-vector products. The crate also ships the synthetic-oracle data
//! generator, the baseline training regimes, and the landscape/saliency
//! analysis tooling used to study the learned models.

pub mod analysis;
pub mod error;
pub mod fd;
pub mod kernels;
pub mod models;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod svi;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod variational;

pub use error::{Error, Result};
pub use params::ModelParams;
pub use tensor::Tensor;
