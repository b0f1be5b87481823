//! Time-frequency QKD link model: pulse geometry, receiver optics, expected
//! rates, Monte Carlo detection, key post-processing and a two-party
//! session protocol.

pub mod bits;
pub mod config;
pub mod error;
pub mod link;
pub mod optics;
pub mod postprocessing;
pub mod pulse;
pub mod rates;
pub mod rng;
pub mod security;
pub mod session;

pub use bits::BitString;
pub use config::{ConfigError, SystemConfig};
pub use error::ModelError;
pub use pulse::{Basis, PulseParams, Symbol};
