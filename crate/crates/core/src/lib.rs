//! Particle-based calculus for flows of conditional marginal laws.
//!
//! The crate is organised bottom-up:
//!
//! * [`paths`]: uniform time grids, keyed Brownian drivers and Euler
//!   construction of continuous semimartingales `X = X0 + A + M + C`.
//! * [`measure`]: equal-weight atom clouds, the pairings `mu(phi)` and
//!   `mu x mu(psi)`, and the Wasserstein-2 distance.
//! * [`functional`]: cylindrical functionals `F(t, y, m) = f(t, y, m(phi_1), ..., m(phi_J))`
//!   with closed-form linear functional and Lions derivatives.
//! * [`regularization`]: the epsilon-regularized covariation estimator and
//!   ladder-based orthogonality verdicts.
//! * [`particle`]: conditional particle systems sharing one common-noise path.
//! * [`ito`]: numerical assembly of the C1 Ito decomposition along a conditional
//!   law flow and the C2 generator oracle.
//! * [`control`]: McKean-Vlasov control with common noise: Hamiltonian,
//!   feedback rollouts, brute-force baselines and pathwise duality residuals.

pub mod control;
pub mod error;
pub mod functional;
pub mod ito;
pub mod measure;
pub mod particle;
pub mod paths;
pub mod regularization;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
