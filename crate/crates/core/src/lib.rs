//! Robustness analysis for positive Lur'e systems: matrix tests for Metzler
//! and Hurwitz structure, stability radii with sector-bounded feedback,
//! sector bounds for ReLU-type networks, and simulation checks.

pub mod matrix;
pub mod nn;
pub mod robustness;
pub mod simulation;

pub use matrix::{Mat, MatrixError, NormKind};
pub use nn::{ActivationSpec, Ffnn, NnError};
pub use robustness::{LtiSystem, PerturbationStructure, RobustnessError, SectorBound};
pub use simulation::{Nonlinearity, SimConfig, SimError, Stability};
