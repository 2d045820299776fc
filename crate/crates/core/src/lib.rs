//! Freidlin–Wentzell quasi-potentials for small random perturbations of globally stable flows,
//! grid certificates for the sub- and supersolutions built from them, and the exponential time
//! scales of the associated parabolic problems and exit times.

pub mod certificates;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod geometry;
pub mod model;
pub mod montecarlo;
pub mod numerics;
pub mod parabolic;
pub mod quasipotential;
pub mod residual;

pub use error::{Error, Result};
