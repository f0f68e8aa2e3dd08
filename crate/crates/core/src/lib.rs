//! Controlled rough paths in one space dimension and a pathwise solver for
//! Burgers-type equations `du = (Δu + g(u)∂ₓu) dt + θ(u) dW` driven by
//! space-time white noise.
//!
//! The crate is organised bottom-up:
//!
//! * [`grid`]: periodic grids, fields, two-point fields and Hölder norms.
//! * [`roughcore`]: rough paths, controlled paths and the rough integral.
//! * [`heat`]: the periodic heat kernel and semigroup.
//! * [`noise`]: counter-based white-noise increments and mollification.
//! * [`stochconv`]: stochastic convolutions and stopping monitors.
//! * [`solver`]: the two-level fixed point and the derived experiments.
//! * [`experiment`]: configuration, ensembles and report emission.

pub mod error;
pub mod experiment;
pub mod fit;
pub mod grid;
pub mod heat;
pub mod models;
pub mod noise;
pub mod roughcore;
pub mod solver;
pub mod spectral;
pub mod stochconv;

pub use error::{Error, Result};
