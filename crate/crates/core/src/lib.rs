//! Probabilistic solvers for Dirichlet problems of the form
//!
//! ```text
//! L u + f(x, u, ∇u σ) = 0   in D = {ψ > 0},      u = g   on ∂D,
//! L u = Σ a_ij ∂_ij u + Σ b_i ∂_i u,            a = ½ σ σ*,
//! ```
//!
//! where the diffusion may degenerate inside `D`. The solution is represented as
//! `u(x) = Y_0(x)` for the backward equation driven by the forward diffusion stopped
//! at its first exit from `D`.
//!
//! The crate is organised bottom-up:
//!
//! - [`problem`]: coefficient traits, built-in test problems, norms and hypothesis checks.
//! - [`sde`]: Euler–Maruyama ensembles stopped at the exit time.
//! - [`bsde`]: driver-free Monte Carlo and Picard/least-squares backward solvers.
//! - [`quasi`]: first and second quasi-derivatives with their coefficient schemes.
//! - [`barriers`]: barrier functions, ordering checks and supermartingale tests.
//! - [`perturbed`]: coupled perturbed diffusions and difference-quotient estimators.
//! - [`estimates`]: gradient/Hessian bound shapes and their empirical verification.

pub mod barriers;
pub mod bsde;
pub mod estimates;
pub mod linalg;
pub mod perturbed;
pub mod problem;
pub mod quasi;
pub mod rng;
pub mod sde;
pub mod stats;

pub use problem::{Dims, DomainSpec, ProblemSpec};
