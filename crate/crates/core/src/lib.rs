//! Nash equilibria of n-agent portfolio games with relative performance
//! concerns, solved through one-dimensional BSDEs and verified by Monte Carlo.
//!
//! Numerical routines are generic over [`Real`] (`f32`, `f64`); the
//! arithmetic-only pieces (constants, pointwise strategy maps, decoupling
//! identities) are generic over [`Field`] so they can run in exact rationals.

pub mod bsde;
pub mod cara;
pub mod crra;
pub mod error;
pub mod market;
pub mod meanfield;
pub mod regress;
pub mod scalar;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::{Field, Real};

/// Exact rational scalar for closed-form identities.
pub type Rational = num_rational::Rational64;

pub type MarketModelF64 = market::MarketModel<f64>;
pub type MarketPathsF64 = market::MarketPaths<f64>;
pub type TimeGridF64 = market::TimeGrid<f64>;
pub type BsdeSolutionF64 = bsde::BsdeGridSolution<f64>;
pub type MarketModelF32 = market::MarketModel<f32>;
pub type MarketPathsF32 = market::MarketPaths<f32>;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
