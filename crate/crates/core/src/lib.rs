//! Federated learning simulator built around client-side momentum-based
//! variance reduction with an adaptive cube-root learning rate and a
//! server-side variance-reduced global momentum, alongside FedAvg and
//! FedProx baselines.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod local_update;
pub mod nummath;
pub mod server_update;

pub use error::{Error, Result};
