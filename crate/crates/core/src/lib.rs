//! Numerical machinery for Hamiltonian flows near symplectic minimum submanifolds.
//!
//! The crate models a charged particle on a compact base manifold `M` moving in a
//! magnetic field: phase space is `T*M` with the twisted symplectic form
//! `Omega = d(lambda) + pi* omega`. On low energy levels `{H = eps^2}` the flow is
//! close to a fibrewise quasiperiodic rotation whose frequencies are the symplectic
//! eigenvalues of the transverse Hessian. The modules follow that pipeline:
//!
//! * [`symplectic`] — linear symplectic algebra on single fibres (normal forms,
//!   complements, resonance classification of eigenvalue fields),
//! * [`geometry`] — chart-based manifolds, metrics, magnetic 2-forms, and fibre
//!   data extraction at base points,
//! * [`dynamics`] — the Hamiltonian vector field, trajectory integration, the
//!   fibrewise rescaling, and its limiting field,
//! * [`orbit`] — seeding, Newton shooting, deduplication, and census of periodic
//!   orbits on a low energy level,
//! * [`predictions`] — orbit-count lower bounds from resonance classes and fixture
//!   topology constants,
//! * [`config`] — JSON fixture descriptions used by the CLI and the test suite.

pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod orbit;
pub mod predictions;
pub mod symplectic;

pub use error::{Error, Result};
