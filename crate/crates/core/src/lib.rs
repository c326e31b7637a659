//! Input specific neural networks: architectures with per-input convexity and
//! monotonicity guarantees, their derivatives, training, and applications to
//! hyperelastic material modeling.

pub mod autodiff;
pub mod cmaes;
pub mod deriv;
pub mod error;
pub mod gate;
pub mod isnn;
pub mod mech;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
