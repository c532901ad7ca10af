//! Policy adaptation for Gaussian-mixture motion policies by Wasserstein
//! gradient flow.
//!
//! A policy is a joint state-action [`Gmm`] that is turned into an action
//! distribution by Gaussian mixture regression. Adaptation alternates two
//! updates on a batch of rollouts:
//!
//! * the Gaussian components move along the Bures-Wasserstein manifold
//!   (means by vector addition, covariances through the BW retraction), with
//!   the step length capped by the W₂ distance to the policy that collected
//!   the batch;
//! * the mixture weights, parameterized by a softmax, descend the W₂ proximal
//!   term (gradient taken from Sinkhorn dual potentials) while ascending the
//!   free-energy objective.
//!
//! The [`env`] module provides a kinematic point-mass world with the three
//! benchmark tasks, and [`experiment`] glues demonstration generation, EM
//! fitting and optimization into reproducible runs.

pub mod bures;
pub mod env;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod linalg;
pub mod optimizer;
pub mod ot;
pub mod policy_grad;

pub use bures::{SpdMatrix, TangentUpdate};
pub use env::{DoneReason, EnvState, RewardKind, TaskKind, TaskSpec};
pub use error::{Error, Result};
pub use gmm::{BlockSplit, Gaussian, Gmm};
pub use optimizer::{OptimizerConfig, OptimizerState, UpdateMode};
pub use ot::{OtSolver, TransportPlan};
pub use policy_grad::{EuclideanGrads, RolloutBatch, Step, Trajectory};
