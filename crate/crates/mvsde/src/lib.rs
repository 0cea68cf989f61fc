//! Contraction rates and numerical experiments for McKean-Vlasov SDEs.
//!
//! The crate splits into coefficient models ([`model`]), distance profiles and
//! empirical transport costs ([`distance`]), rate certificates ([`rates`]), the
//! coupled particle simulator ([`simulator`]) and a 1D Fokker-Planck solver ([`fpe1d`]).

// `!(x > 0.0)` rejects NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distance;
pub mod error;
pub mod fpe1d;
pub mod model;
pub mod pipeline;
pub mod quad;
pub mod rates;
pub mod simulator;

pub use error::{Error, Result};
