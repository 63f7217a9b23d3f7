//! Finite-element simulator for a rate-type elastic/perfectly-plastic solid
//! with thermomechanical coupling.
//!
//! The solid is governed by a rate-form constitutive law in which plastic
//! flow is switched on by two Heaviside factors: one testing the loading
//! direction (sign of `stress : strain-rate`) and one testing the yield
//! surface (deviatoric stress magnitude against the yield stress). Between
//! switches the response is linearly elastic; at the yield surface under
//! continued loading the stress rate vanishes (perfect plasticity). The
//! yield Heaviside is regularized with a configurable profile and width so
//! that an implicit Euler / P0-stress / P1-velocity discretization can be
//! solved by a semismooth Newton method.
//!
//! Post-hoc, each mechanical step feeds a displacement update and a heat
//! equation whose source is the plastic dissipation, giving a one-way
//! thermomechanical coupling with a no-flux thermal boundary.
//!
//! Crate layout:
//!
//! * [`mesh`] — simplicial meshes (intervals, triangulated plate with an
//!   elliptical hole), an ASCII mesh format, and mesh-dependent inverse /
//!   trace constants used by the time-step admissibility bound.
//! * [`spaces`] — P0 stress / P1 velocity fields, strain and deviatoric
//!   operators, Dirichlet handling.
//! * [`constitutive`] — material parameters, Heaviside regularizations,
//!   compliance tensor and the gate function.
//! * [`linalg`] — sparse systems and direct solves.
//! * [`mechanics`] — the coupled stress/velocity implicit step (residual,
//!   Jacobian, Newton with line search and epsilon-continuation), the
//!   semi-implicit splitting, and the tau/h admissibility check.
//! * [`thermal`] — displacement update and the post-hoc heat equation.
//! * [`energy`] — energy bookkeeping, per-step balance audit, a-priori
//!   stability check.
//! * [`material_point`] — the 0-dimensional (single material point)
//!   integrator and its closed-form elastic/perfectly-plastic oracle.
//! * [`scenario`] — canned experiments (1D bar, 2D plate with hole),
//!   convergence study, artifact export (CSV / VTK / JSON run log).

pub mod constitutive;
pub mod energy;
pub mod error;
pub mod linalg;
pub mod material_point;
pub mod mechanics;
pub mod mesh;
pub mod scenario;
pub mod spaces;
pub mod thermal;

pub use error::{Error, Result};
