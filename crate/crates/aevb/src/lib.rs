//! Latent-variable models trained by stochastic ascent on the evidence
//! lower bound, with reparametrized sampling throughout: factor analysis
//! with an amortized full-covariance posterior, a continuous-Bernoulli
//! VAE, a label-conditioned VAE, a Gaussian-mixture VAE with marginalized
//! and Gumbel-Softmax estimators, and a variational RNN over row
//! sequences — on top of a small f64 tensor/autodiff core.

pub mod data;
pub mod dist;
pub mod error;
pub mod models;
pub mod nn;
pub mod numerics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
