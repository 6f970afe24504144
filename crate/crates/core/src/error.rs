use thiserror::Error;

use crate::mesh::GridId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("chamber dimension must be 2 or 3, got {0}")]
    Dimension(usize),
    #[error("expected {dim} axis sizes, got {got}")]
    AxisCount { dim: usize, got: usize },
    #[error("axis with {0} cells is too coarse (need at least 2)")]
    TooCoarse(usize),
    #[error("grid function lives on {got:?}, expected {expected:?}")]
    GridMismatch { expected: GridId, got: GridId },
    #[error("expected {expected} nodal values, got {got}")]
    ValueCount { expected: usize, got: usize },
    #[error("plate grid is not aligned with the chamber's elastic wall")]
    Misaligned,
}

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("dense eigen/linear solve failed: {0}")]
    Dense(&'static str),
    #[error("index {index} out of range ({len})")]
    OutOfRange { index: usize, len: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SourceError {
    #[error("invalid source parameter: {0}")]
    Parameter(String),
    #[error("unknown source `{0}`")]
    UnknownSource(String),
    /// A pointwise evaluation overflowed; the state is a blow-up suspect.
    #[error("non-finite source value {value} at node {node} (w = {input})")]
    NonFinite { node: usize, input: f64, value: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid integrator configuration: {0}")]
    Config(String),
    #[error("blow-up suspect at t = {t}: {reason} (E = {energy})")]
    BlowUpSuspect { t: f64, energy: f64, reason: String },
    #[error("nonlinear solve failed at t = {t} after {iterations} iterations; increments {trace:?}")]
    NonlinearDivergence { t: f64, iterations: usize, trace: Vec<f64> },
    #[error("state violates its invariants: {0}")]
    InvalidState(String),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Source(#[from] SourceError),
}

#[derive(Debug, Error)]
pub enum WellError {
    #[error("direction has a zero plate component; the ray never meets the Nehari manifold")]
    ZeroPlateComponent,
    #[error("no sign change of the Nehari functional along the ray within the expansion budget")]
    NoCrossing,
    #[error("invalid depth search parameters: {0}")]
    Parameter(String),
    #[error("source has no Ambrosetti-Rabinowitz exponent")]
    MissingTheta,
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}
