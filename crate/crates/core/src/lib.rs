//! Adaptive-sampling distributed SVRG on a simulated worker/server cluster.
//!
//! * [`problem`] sharded linear / logistic regression objectives and their
//!   Lipschitz metadata.
//! * [`sampling`] variance-minimizing worker distributions, subsampled weight
//!   estimation and perturbed-distribution decomposition.
//! * [`comm`] the tree-structured weighted sampling protocols and the cost
//!   ledger of the simulated cluster.
//! * [`optim`] SGD, SVRG with a fixed distribution and ASD-SVRG, plus
//!   closed-form contraction factors.
//! * [`harness`] learning-rate sweeps and CSV output for the CLI.

pub mod comm;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod optim;
pub mod problem;
pub mod sampling;

pub use error::{Error, Result};
