//! Solver and verification toolkit for discrete-time mean-field games with
//! partial observations.
//!
//! The crate models a large symmetric population in which each agent observes
//! its own state only through a noisy channel. Planning happens in belief
//! space: the information state is the conditional state distribution, and
//! the population enters through a deterministic flow of state measures. The
//! main entry points are
//!
//! * [`model`]: validated game descriptions (tabular and discretized
//!   Gaussian families),
//! * [`filter`]: the recursive Bayes filter and its lifted kernels,
//! * [`solver`]: finite-horizon belief-tree backward induction with bracket
//!   bounds on the infinite-horizon value,
//! * [`flow`]: population flows induced by a policy,
//! * [`equilibrium`]: damped fixed-point iteration between policy and flow,
//! * [`simulator`]: finite-population Monte Carlo that measures how much a
//!   single agent can gain by deviating,
//! * [`oracle`]: slow, independent reference implementations used by tests.

pub mod acceptance;
pub mod bundled;
pub mod config;
pub mod equilibrium;
pub mod error;
pub mod filter;
pub mod flow;
pub mod model;
pub mod num;
pub mod oracle;
pub mod report;
pub mod simulator;
pub mod solver;
