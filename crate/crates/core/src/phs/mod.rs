//! Port-Hamiltonian subsystem models and their composition.

mod composite;
mod subsystem;

pub use composite::{
    compose_pair, compose_with_known, composite_dynamics, composite_output, extract_subsystem, passivity_residual,
    BoundComposite, CompositeEval, CompositeModel, PointEval,
};
pub use subsystem::{
    eval_structure, identity_top, AnalyticSubsystem, BoundSubsystem, Structure, Subsystem, SubsystemModel,
    SubsystemTerms,
};

use crate::ad::AdError;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Dimension { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("interconnection is not skew-symmetric at ({row}, {col})")]
    NotSkew { row: usize, col: usize },
    #[error("interconnection has a non-zero diagonal block for subsystem {subsystem}")]
    DiagonalBlock { subsystem: usize },
    #[error("subsystem index {index} out of range ({len} subsystems)")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] AdError),
}
