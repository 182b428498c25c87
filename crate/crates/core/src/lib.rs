//! Regularisation-by-noise toolkit: Hölder-space norms, Gaussian kernel
//! calculus, a mild-solution solver for the damped Kolmogorov equation, the
//! drift-removing diffeomorphism built from it, Euler–Maruyama flows and
//! stochastic transport by inverse characteristics.

pub mod error;
pub mod export;
pub mod families;
pub mod grid;
pub mod holder;
pub mod kernel;
pub mod flow;
pub mod noise;
pub mod pde;
pub mod stats;
pub mod transform;
pub mod transport;

pub use error::{Error, Result};
