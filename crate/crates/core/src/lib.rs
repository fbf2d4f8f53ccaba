//! Table-based remote keyless entry: the protocol, its baselines, the
//! adversaries that attack them and the deterministic simulator they run in.

pub mod audit;
pub mod adversaries;
pub mod authcrypt;
pub mod baselines;
pub mod channel;
pub mod demo;
pub mod devices;
mod error;
#[doc(hidden)]
pub mod fuzz_checks;
pub mod keystore;
pub mod matrix;
pub mod provisioning;
pub mod scenario;
pub mod testbed;
pub mod trace;
pub mod wire;

pub use error::Error;
