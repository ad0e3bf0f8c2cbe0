#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Decentralized federated learning with certified unlearning.
//!
//! Clients run synchronous D-PSGD over a doubly stochastic mixing matrix. A
//! deletion request is answered by a Newton correction computed at the
//! requesting client, perturbed with calibrated Gaussian noise and flooded to
//! every client. [`verify`] holds the retrain oracle, bound checks and the
//! membership inference attack used to evaluate the result.

pub mod data;
pub mod dpsgd;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod models;
pub mod rng;
pub mod topology;
pub mod unlearn;
pub mod verify;

pub use error::{Error, Result};
pub use exec::Execution;
