//! Spectral laboratory for the linearized two-species Vlasov-Maxwell-Boltzmann
//! system.
//!
//! The crate builds a Hermite Galerkin discretization of velocity space,
//! assembles the linearized hard-sphere collision operator, evolves each
//! spatial Fourier mode of the coupled kinetic/Maxwell system, constructs the
//! per-mode Lyapunov functional with its interactive correction terms, and
//! fits decay exponents for whole-space norms assembled by frequency
//! quadrature.
//!
//! Modules mirror that pipeline: [`basis`] -> [`collision`] -> [`mode`] ->
//! [`lyapunov`] -> [`decay`], with [`manifest`] and [`report`] providing the
//! deterministic run configuration and JSON/CSV emission shared by the CLI.

pub mod basis;
pub mod collision;
pub mod expm;
pub mod lyapunov;
pub mod mode;
pub mod quadrature;

pub use basis::{build_basis, maxwellian, MacroState, TwoSpecies, VelocityBasis};
pub use collision::{assemble_l, collision_frequency, CollisionOperator, CollisionQuadSpec};
