//! Federated co-distillation through a relay server that exchanges per-class
//! feature prototypes and observations, with the reference baselines (IL, CL,
//! FedAvg, FD), discrete oracles for the contrastive bound and an experiment
//! harness.

pub mod baselines;
pub mod client;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod objectives;
pub mod protocol;
pub mod seed;
pub mod verification;

pub use error::{Error, Result};
