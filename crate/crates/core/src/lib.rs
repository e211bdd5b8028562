//! Time-dependent variational Monte Carlo for spin chains.
//!
//! The crate evolves variational wavefunctions under the stationary-action
//! form of the time-dependent variational principle. The quantum geometric
//! tensor and force vector entering the equation of motion can be estimated
//! by
//!
//! * exact summation over the full computational basis,
//! * Metropolis sampling of the Born distribution `|ψ(s)|²`,
//! * self-normalized importance sampling of a cutoff distribution that keeps
//!   a strictly positive floor under every configuration, which removes the
//!   bias Born sampling suffers at roots of the wavefunction,
//! * tensor cross interpolation of the centered local-energy and gradient
//!   functions followed by tensor-train contraction.
//!
//! Exact Krylov propagation of the full state vector provides the reference
//! dynamics for every comparison.

pub mod ansatz;
pub mod error;
pub mod estimators;
pub mod exact_reference;
pub mod spin_model;
pub mod tci;
pub mod tdvp;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
