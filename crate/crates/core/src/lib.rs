//! Stochastic attention with variational weights.
//!
//! Attention weights are drawn by normalizing reparameterizable Weibull or
//! Lognormal variables whose means equal `exp(Φ)`, so evaluating with the
//! means recovers ordinary softmax attention. Training maximizes a
//! reparameterized evidence lower bound in which the KL term to a
//! key-dependent contextual prior is analytic layer by layer.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod models;
pub mod objective;
pub mod params;
pub mod prior;
pub mod quadrature;
pub mod uncertainty;

pub use error::{BamError, Result};
