//! Distance profiles, their constants, and empirical transport costs.

mod psi;
mod transport;

pub use psi::*;
pub use transport::*;
