//! Whittle-index scheduling for interference-limited wireless networks.
//!
//! Users sit on a conflict graph; in every slot the scheduler picks an
//! independent set of users to transmit. Each queue pays a holding cost per
//! packet per slot and an energy cost per transmission. The crate provides
//! four index policies (two non-stationary, two with precomputed stationary
//! tables), slotted ALOHA, max-weight and drift-plus-penalty baselines, a
//! seeded simulator and a grid runner producing CSV/JSON results.

pub mod config;
pub mod cost;
pub mod error;
pub mod graph;
pub mod index;
pub mod poisson;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod sim;
pub mod traffic;

pub use error::{ConfigError, GraphError, IndexError, ParamError, PolicyError, SimError, SolveError};
pub use graph::{ConflictGraph, UserId};
pub use index::Variant;
pub use policy::{PolicyConfig, PolicyKind};
pub use sim::{compare_policies, run_simulation, Metrics, RunContext, Scenario};
pub use traffic::{QueueState, UserModel, UserParams};
