//! Component-based reduced-order modelling of 2D linear elasticity.
//!
//! Archetype components are trained once (port modes, harmonic extensions,
//! reduced-basis bubble spaces, pre-factorized main-body operators) and then
//! synthesised online into a statically condensed system over port modes.
//! Rotating components are coupled to their stationary neighbours through a
//! thin buffer layer that is re-meshed for every rotation angle, and their
//! bubble functions are recomputed through a 2×2 block inversion that reuses
//! the offline factorization.

pub mod adaptive;
pub mod archetype;
pub mod error;
pub mod fem;
pub mod library;
pub mod linalg;
pub mod mesh;
pub mod rb;
pub mod synthesis;

pub use error::{Error, ErrorCategory, Result};
