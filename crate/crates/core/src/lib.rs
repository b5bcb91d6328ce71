//! Inverse engineering of time-dependent quadratic traps from a
//! multidimensional Gaussian invariant, with Gaussian-moment verification and
//! derivative-free protocol optimization.

pub mod basis;
pub mod costs;
pub mod error;
pub mod gaussian;
pub mod invariant;
pub mod matops;
pub mod optimize;
pub mod scenario;

pub use basis::{RMatrixPath, RMode, ScalarBasis, TrajectoryPath};
pub use error::{Error, Result};
pub use gaussian::{fidelity, ground_state, phonon_number, propagate, GaussianState};
pub use invariant::{build_protocol, curvature_at, BoundarySpec, Protocol, ProtocolSample};
pub use optimize::{minimize, CostReport, MinimizeOptions};
pub use scenario::{load_config, run_synth, run_verify, ScenarioConfig, ScenarioKind};
