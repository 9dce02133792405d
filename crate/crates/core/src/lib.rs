//! Finite element laboratory for degenerate parabolic equations of the form
//! `u_t + lambda c0 u - x_d D_i(a_ij D_j u - F_i) = sqrt(lambda) f` on the
//! half-space strip, with Dirichlet data on `x_d = 0`.

pub mod assembly;
pub mod coefficients;
pub mod error;
pub mod harness;
pub mod mesh;
pub mod mms;
pub mod norms;
pub mod solver;
pub mod sparse;

pub use coefficients::{CoefficientField, CoefficientKind, FamilySpec, Mat2, OscillationReport, Point, Vec2};
pub use error::{LabError, Result};
pub use mesh::{build_mesh, Cylinder, MeshParams, SpaceTimeCell, TensorMesh};
pub use sparse::{LoadProvenance, LoadVector, SparseOperator, Symmetry};
pub use solver::{DiscreteField, SpaceTimeSolution, StiffnessSchedule, TimeStepperConfig};
