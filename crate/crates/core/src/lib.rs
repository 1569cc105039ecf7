//! Split-step propagation of the cubic-quintic complex Ginzburg-Landau
//! equation together with linearized quantum-fluctuation transport, used to
//! compute photon-number correlations in dissipative soliton pairs and
//! trains.
//!
//! The crate is organized around the stages of a run:
//!
//! - [`grid`]: uniform periodic time grid and the spectral transform
//!   conventions every other module relies on.
//! - [`cgle`]: classical field propagation (symmetric split-step) and the
//!   trajectory recording consumed by the quantum pass.
//! - [`states`]: stationary-soliton relaxation, bound-state composition and
//!   peak detection / segmentation.
//! - [`quantum`]: linearized fluctuation transport in the doubled
//!   (field, conjugate-field) space: adjoint back-propagation of measurement
//!   functionals with dissipative noise accumulation, plus a dense forward
//!   covariance oracle for small grids.
//! - [`correl`]: photon-number functionals, the slot correlation map and
//!   per-soliton correlation parameters.
//! - [`stateio`]: binary frame format and JSON sidecars for saved states and
//!   spilled trajectories.
//!
//! There is no randomness anywhere in the pipeline: noise enters only as a
//! deterministic covariance accumulation, so identical inputs produce
//! bit-identical outputs.

pub mod cgle;
pub mod correl;
pub mod error;
pub mod grid;
pub mod quantum;
pub mod stateio;
pub mod states;

pub use error::{Error, Result};

/// Complex sample type used throughout.
pub type C64 = num_complex::Complex<f64>;
