//! # mvlab
//!
//! A particle laboratory for time-periodic mean-field SDEs
//!
//! ```text
//! dX_t = b(t, X_t, L(X_t)) dt + sigma(t, X_t, L(X_t)) dW_t
//! ```
//!
//! where the coefficients depend on the law `L(X_t)` of the solution through
//! polynomial moment observables, and are `T`-periodic in time. The law is
//! closed with the empirical measure of an interacting particle ensemble,
//! stepped by explicit Euler-Maruyama with counter-based (fully reproducible)
//! randomness.
//!
//! What the crate does:
//!
//! * [`model`] declares drift/diffusion coefficients as expression trees over
//!   time harmonics, coordinates and moment observables, including the coupled
//!   two-component system and coefficient truncation.
//! * [`measure`] represents probability measures as weighted particle clouds
//!   and provides exact 1-d Wasserstein-2, a sliced surrogate for d >= 2, a
//!   Levy-Prohorov upper bound and small-support Levy-Prohorov evaluation.
//! * [`simulate`] evolves particle ensembles (plain and coupled) with a
//!   deterministic parallel randomness contract, and measures
//!   Chapman-Kolmogorov flow-composition gaps.
//! * [`lyapunov`] evaluates the distribution-dependent generator `LV` for
//!   separable functionals `V(t,x,mu) = v0(t,x) + \int v1(t,y) mu(dy)`,
//!   scans its radial drift profile and checks tail criteria along runs.
//! * [`periodic`] constructs candidate periodic laws by period averaging and
//!   period-map iteration, certifies periodicity and runs parameter sweeps.
//! * [`reference`] holds independent closed-form / RK4 moment references for
//!   the linear mean-field model, used to validate simulations.
//! * [`cli`] is the batch front-end behind the `mvlab` binary.
//!
//! Runnable walkthroughs for each capability live in `examples/`.

pub mod cli;
pub mod expr;
pub mod lyapunov;
pub mod measure;
pub mod model;
pub mod periodic;
pub mod reference;
pub mod rng;
pub mod simulate;

pub use expr::Expr;
pub use measure::ParticleCloud;
pub use model::ModelSpec;
pub use simulate::{SimConfig, Trajectory};
