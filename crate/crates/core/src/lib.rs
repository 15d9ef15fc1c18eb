//! Numerical toolkit for partially observed optimal control of coupled
//! forward SPDE / backward SDE systems with jumps, at finite Galerkin rank.
//!
//! The crate provides: a diagonal spectral representation of the state space,
//! reproducible driving noises (truncated cylindrical Wiener increments,
//! observation-channel Brownian increments, finite-activity marked jumps),
//! coefficient models with analytic directional derivatives, exponential-Euler
//! forward solvers (including operator-valued stochastic flows), least-squares
//! Monte Carlo backward solvers (BSDEs with jumps and a truncated singular
//! backward SPDE), Girsanov density/cost machinery, first-order optimality
//! verification along two independent routes, and discrete Malliavin
//! derivative operators with their duality checks.

pub mod backward;
pub mod forward;
pub mod girsanov;
pub mod malliavin;
pub mod model;
pub mod noise;
pub mod smp;
pub mod spectral;
pub mod stats;
pub mod stress;

pub use model::{Control, Model, ModelDims, PolicyFeatures, PolicyParams};
pub use noise::{JumpMeasureSpec, NoiseGrid, NoisePerturbation, TimeGrid};
pub use spectral::{BasisKind, ModeOperator, ModeVector, SpectralSpace};
