//! Reinforcement learning with local simulator access.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: layered tabular MDPs and the [`LocalSimSession`] that enforces
//!   the "reset only to previously observed states" protocol with an exact
//!   sample ledger.
//! - [`oracle`]: exact dynamic programming used to verify everything else
//!   (values, occupancies, coverability coefficients, gaps, the rounded
//!   endogenous benchmark policy).
//! - [`classes`]: finite value-function, decoder and policy classes.
//! - [`backup`]: the Monte-Carlo Bellman backup estimator and the greedy /
//!   rounded action selectors built on it.
//! - [`simgolf`], [`rvfs`], [`rvfs_exo`], [`imitation`]: the learning
//!   algorithms.
//! - [`exbmdp`]: Exogenous Block MDP generators and flattening.
//! - [`harness`]: experiment configuration, orchestration and metrics.

pub mod backup;
pub mod classes;
pub mod error;
pub mod exbmdp;
pub mod harness;
pub mod imitation;
pub mod mdp;
pub mod oracle;
pub mod rvfs;
pub mod rvfs_exo;
pub mod simgolf;
pub mod instances;

pub use error::{Error, Result};
pub use mdp::{
    ActionSource, LocalSimSession, PolicyTable, RewardLaw, SampleLedger, TabularMdp, Trajectory,
};

/// Tolerance used for argmax ties and gap uniqueness.
pub const TIE_TOL: f64 = 1e-12;
/// Tolerance used for probability and value identities.
pub const PROB_TOL: f64 = 1e-9;
