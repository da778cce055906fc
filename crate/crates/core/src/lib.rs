//! Model selection for off-policy evaluation.
//!
//! Given an offline dataset and a list of candidate models (or their
//! Q-functions), the selectors here pick the candidate whose value estimate of
//! a target policy is most trustworthy. Candidate Q-values are obtained lazily
//! by Monte-Carlo rollouts and cached per data point, so selection itself never
//! touches a simulator.

pub mod data;
pub mod env;
pub mod error;
pub mod lstdq;
pub mod mdp;
pub mod oracle;
pub mod qcache;
pub mod rng;
pub mod runner;
pub mod selectors;

pub use error::{Error, Result};
pub use mdp::{Policy, QTable, TabularMdp};
