//! Numerical laboratory for hyperbolic times, induced Markov partitions and
//! orbit statistics of expanding circle maps and perturbed toral automorphisms.
//!
//! Module map:
//! - [`systems`]: map zoo, lifts, Jacobians, splittings.
//! - [`hyperbolic`]: expansion logs, expansion time, Pliss scan, tails and fits.
//! - [`geometry`]: pre-balls, certificates, stable leaves, cylinders, u-crossing.
//! - [`partition`]: the inductive partition builder and Markov verification.
//! - [`stats`]: Birkhoff means, correlations, large deviations, recurrence tails.

pub mod error;
pub mod geometry;
pub mod hyperbolic;
pub mod interval;
pub(crate) mod numeric;
pub mod partition;
pub mod rng;
pub mod stats;
pub mod systems;

pub use error::{Error, Result};
pub use systems::{Point, SystemDescriptor};
