//! Mixture-of-experts Fourier neural operator for auto-regressive PDE
//! surrogate modelling: tensor kernels with reverse-mode autodiff, synthetic
//! trajectory generation, the sparse-expert operator network, training,
//! and router-based interpretability.

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
