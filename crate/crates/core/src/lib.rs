//! Numerical laboratory for a wave equation in an acoustic chamber coupled to
//! a clamped plate (or beam) on one flat wall, with a nonlinear source acting
//! on the plate.
//!
//! * [`mesh`]: tensor grids, trapezoid quadrature, grid functions.
//! * [`operators`]: discrete Laplacian, biharmonic, trace and Neumann lift.
//! * [`sources`]: scalar sources, truncation, assumption validators.
//! * [`dynamics`]: energy-consistent time stepping and energy bookkeeping.
//! * [`potentialwell`]: Nehari functional, well depth, state classification.

pub mod dynamics;
pub mod error;
pub mod mesh;
pub mod operators;
pub mod potentialwell;
pub mod sources;

pub use error::{DynamicsError, MeshError, OperatorError, SourceError, WellError};
pub use mesh::{ChamberGrid, GridFunction, GridSpec, PlateGrid};
pub use operators::{assemble, DiscreteOperators};
pub use sources::{SourceSpec, TruncatedSource};
