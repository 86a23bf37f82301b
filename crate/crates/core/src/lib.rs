//! Deterministic federated zeroth-order optimization.
//!
//! Clients run zeroth-order SGD on seeded Gaussian perturbations and exchange
//! only `(seed, scalar)` pairs with the server, never model vectors. Every
//! client reconstructs the global model by replaying the server's round
//! history, bit for bit.

pub mod baselines;
pub mod client;
pub mod error;
pub mod harness;
pub mod ledger;
pub mod par;
pub mod prng;
pub mod protocol;
pub mod server;
pub mod tasks;
pub mod zo;

pub use error::{Error, Result};
pub use par::Execution;
pub use prng::SeedValue;
pub use tasks::ParamVector;
