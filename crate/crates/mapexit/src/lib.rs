//! Exit problems for spectrally negative Markov-additive processes (MAPs)
//! and their reflections.
//!
//! A MAP `(X, J)` couples a finite-state Markov chain `J` (the *phase*) with
//! an additive level `X` that evolves as a phase-dependent Brownian motion
//! with drift, punctuated by downward hyperexponential jumps (phase-local
//! streams and/or jumps attached to phase switches) and optional killing.
//!
//! The crate computes the classical exit and reflection laws of such
//! processes in closed matrix form:
//!
//! * [`model`] — model description, validation, the matrix exponent
//!   `F(α)` and its Perron root, and the fluid embedding that replaces
//!   jumps by unit-slope auxiliary phases.
//! * [`spectral`] — the eigenvalue structure of `det F(α) = 0` via a
//!   quadratic-pencil linearization: roots, null vectors, residues of
//!   `F(α)⁻¹`, and the first-passage generator `Λ`.
//! * [`scale`] — the matrix scale function `W`, the second scale matrix
//!   `Z(α, x)`, occupation densities at the starting level, and downward
//!   hitting probabilities.
//! * [`exit`] — the exit identities themselves: two-sided exit, reflected
//!   passage transforms, excursion generators, and the two-sided
//!   reflection's Markov-modulated compound-Poisson local-time process.
//! * [`mcsim`] — a bridge-corrected Monte Carlo engine that estimates the
//!   same functionals pathwise, for cross-validation.
//! * [`cli`] — the `mapexit` command-line front end and the verification
//!   harness.
//!
//! Conventions used throughout: `E e^{αX_i(1)} = e^{ψ_i(α)}` (upward
//! transform), jumps are downward, matrices act on row vectors of phase
//! probabilities, and `P_x[...]` rows index the starting phase.

pub mod cli;
pub mod exit;
pub mod mcsim;
pub mod model;
pub mod scale;
pub mod spectral;
pub mod tol;

pub use exit::{ExitError, ExitResult, Side};
pub use mcsim::{estimate, estimate_occupation, Query, SimConfig, SimEstimate, SimError};
pub use model::{JumpLaw, MapModel, MixtureComponent};
pub use scale::ScaleEvaluator;
pub use spectral::{solve_spectrum, Spectrum};
