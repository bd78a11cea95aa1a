//! Primal-dual zeroth-order deterministic policy gradients for constrained
//! stochastic resource allocation.
//!
//! The learner explores in the policy's *action* space: each iteration probes
//! the system twice (base and Gaussian-perturbed action), forms a two-point
//! finite difference of the service vector, and pushes it back through the
//! policy with a single vector-Jacobian product. The cost of exploration is
//! therefore independent of the number of policy parameters.
//!
//! Modules:
//! - [`smoothing`]: Gaussian perturbations, box projections, finite differences
//!   and Monte-Carlo oracles for Gaussian-smoothed functions.
//! - [`policy`]: MLP policies with exact forward passes and reverse-mode VJPs.
//! - [`systems`]: channel samplers and service functions (AWGN and MAI).
//! - [`learner`]: the primal-dual stochastic-approximation loop, with both the
//!   action-space and the parameter-space gradient estimators.
//! - [`baselines`]: waterfilling and WMMSE model-based benchmarks.
//! - [`harness`]: configuration, multi-seed execution, CSV output, bootstrap
//!   aggregation and the self-verification suite.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod learner;
pub mod policy;
pub mod rng;
pub mod smoothing;
pub mod systems;

pub use error::{Error, Result};
pub use rng::SimRng;
