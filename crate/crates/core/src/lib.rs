//! Synchronous federated Q-learning over heterogeneous tabular MDPs.
//!
//! `K` agents share a reward and discount but each samples transitions from
//! its own kernel. They run local Q-learning updates and average their tables
//! every `E` iterations. The quantity of interest is the distance of the
//! averaged table from the optimal Q-function of the *global* MDP, whose kernel
//! is the agent mean.
//!
//! ```
//! use fedq_core::{envgen, engine::{FedQ, RunConfig, SyncPeriod}, schedule::StepsizeSchedule};
//!
//! let ens = envgen::make_lower_bound_ensemble(&envgen::LowerBoundSpec {
//!     num_agents: 2,
//!     reward: [1.0, 0.0],
//!     gamma: 0.5,
//! })
//! .unwrap();
//! let engine = FedQ::new(&ens).unwrap();
//! let cfg = RunConfig::new(SyncPeriod::Every(2), 200, StepsizeSchedule::Constant { lambda: 0.1 }, 7);
//! let trace = engine.run(&cfg).unwrap();
//! assert!(trace.final_error() < trace.errors[0]);
//! ```

pub mod engine;
pub mod envgen;
pub mod error;
pub mod lambert;
pub mod mdp;
pub mod sampler;
pub mod schedule;
pub mod theory;

pub use engine::{FedQ, RunConfig, RunTrace, SyncPeriod};
pub use error::{Error, Result};
pub use mdp::{Ensemble, QTable, TabularMdp};
pub use schedule::StepsizeSchedule;
